//! Fixed message header prepended to every two-sided message.
//!
//! `[2B magic][16B sender gid][2B sender port][4B dct_num][8B dct_key]
//! [1B flags][4B payload length][payload or descriptor]`, integers little-endian.
//! Descriptor body: `[8B source address][4B size][4B dest VQP id]`.

use thiserror::Error;

use crate::addr::{Gid, NodeId};

pub const MAGIC: u16 = 0x4b43;
pub const HEADER_BYTES: usize = 2 + 16 + 2 + 4 + 8 + 1 + 4;
pub const DESCRIPTOR_BYTES: usize = 16;

pub const FLAG_ZERO_COPY: u8 = 1 << 0;
pub const FLAG_CONTROL: u8 = 1 << 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeaderError {
    #[error("message shorter than header ({0} bytes)")]
    Truncated(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("payload length {declared} exceeds {available} available bytes")]
    Length { declared: u32, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub sender: NodeId,
    pub dct_num: u32,
    pub dct_key: u64,
    pub flags: u8,
    pub payload_len: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub src_addr: u64,
    pub size: u32,
    /// 0 = dispatch by destination port.
    pub dest_vqp: u32,
}

impl Header {
    pub fn encode(&self, body: &[u8]) -> Vec<u8> {
        debug_assert_eq!(body.len() as u32, self.payload_len);
        let mut b = Vec::with_capacity(HEADER_BYTES + body.len());
        b.extend_from_slice(&MAGIC.to_le_bytes());
        b.extend_from_slice(&self.sender.gid.0);
        b.extend_from_slice(&self.sender.port.to_le_bytes());
        b.extend_from_slice(&self.dct_num.to_le_bytes());
        b.extend_from_slice(&self.dct_key.to_le_bytes());
        b.push(self.flags);
        b.extend_from_slice(&self.payload_len.to_le_bytes());
        b.extend_from_slice(body);
        b
    }

    /// Parses the header; returns it with the body slice.
    pub fn decode(b: &[u8]) -> Result<(Header, &[u8]), HeaderError> {
        if b.len() < HEADER_BYTES {
            return Err(HeaderError::Truncated(b.len()));
        }
        let magic = u16::from_le_bytes([b[0], b[1]]);
        if magic != MAGIC {
            return Err(HeaderError::BadMagic(magic));
        }
        let mut gid = [0u8; 16];
        gid.copy_from_slice(&b[2..18]);
        let port = u16::from_le_bytes([b[18], b[19]]);
        let dct_num = u32::from_le_bytes(b[20..24].try_into().expect("4"));
        let dct_key = u64::from_le_bytes(b[24..32].try_into().expect("8"));
        let flags = b[32];
        let payload_len = u32::from_le_bytes(b[33..37].try_into().expect("4"));
        let rest = &b[HEADER_BYTES..];
        if payload_len as usize > rest.len() {
            return Err(HeaderError::Length {
                declared: payload_len,
                available: rest.len(),
            });
        }
        Ok((
            Header {
                sender: NodeId::new(Gid(gid), port),
                dct_num,
                dct_key,
                flags,
                payload_len,
            },
            &rest[..payload_len as usize],
        ))
    }

    pub fn is_zero_copy(&self) -> bool {
        self.flags & FLAG_ZERO_COPY != 0
    }

    pub fn is_control(&self) -> bool {
        self.flags & FLAG_CONTROL != 0
    }
}

impl Descriptor {
    pub fn encode(&self) -> [u8; DESCRIPTOR_BYTES] {
        let mut b = [0u8; DESCRIPTOR_BYTES];
        b[..8].copy_from_slice(&self.src_addr.to_le_bytes());
        b[8..12].copy_from_slice(&self.size.to_le_bytes());
        b[12..].copy_from_slice(&self.dest_vqp.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Descriptor> {
        if b.len() != DESCRIPTOR_BYTES {
            return None;
        }
        Some(Descriptor {
            src_addr: u64::from_le_bytes(b[..8].try_into().ok()?),
            size: u32::from_le_bytes(b[8..12].try_into().ok()?),
            dest_vqp: u32::from_le_bytes(b[12..].try_into().ok()?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_37_bytes() {
        assert_eq!(HEADER_BYTES, 37);
    }

    #[test]
    fn exact_layout() {
        let h = Header {
            sender: NodeId::new(Gid::for_node(0x01020304), 0x0506),
            dct_num: 0x0708090a,
            dct_key: 0x1112131415161718,
            flags: FLAG_ZERO_COPY,
            payload_len: 2,
        };
        let b = h.encode(&[0xaa, 0xbb]);
        assert_eq!(&b[0..2], &[0x43, 0x4b]);
        assert_eq!(&b[2..4], &[0xfe, 0x80]);
        assert_eq!(&b[14..18], &[1, 2, 3, 4]);
        assert_eq!(&b[18..20], &[0x06, 0x05]);
        assert_eq!(&b[20..24], &[0x0a, 0x09, 0x08, 0x07]);
        assert_eq!(b[24], 0x18);
        assert_eq!(b[32], 1);
        assert_eq!(&b[33..37], &[2, 0, 0, 0]);
        assert_eq!(&b[37..], &[0xaa, 0xbb]);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(Header::decode(&[0; 5]), Err(HeaderError::Truncated(5)));
        let mut b = Header {
            sender: NodeId::new(Gid::for_node(1), 1),
            dct_num: 1,
            dct_key: 1,
            flags: 0,
            payload_len: 0,
        }
        .encode(&[]);
        b[0] = 0;
        assert!(matches!(Header::decode(&b), Err(HeaderError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn round_trip(n in any::<u32>(), port in any::<u16>(), num in any::<u32>(),
                      key in any::<u64>(), flags in any::<u8>(),
                      body in proptest::collection::vec(any::<u8>(), 0..64)) {
            let h = Header {
                sender: NodeId::new(Gid::for_node(n), port),
                dct_num: num,
                dct_key: key,
                flags,
                payload_len: body.len() as u32,
            };
            let enc = h.encode(&body);
            let (d, rest) = Header::decode(&enc).unwrap();
            prop_assert_eq!(d, h);
            prop_assert_eq!(rest, &body[..]);
        }

        #[test]
        fn descriptor_round_trip(a in any::<u64>(), s in any::<u32>(), v in any::<u32>()) {
            let d = Descriptor { src_addr: a, size: s, dest_vqp: v };
            prop_assert_eq!(Descriptor::decode(&d.encode()), Some(d));
        }
    }
}
