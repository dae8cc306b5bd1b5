//! Packing of dispatch data into the physical wr_id.
//!
//! Layout: bit 63 fence flag, bit 62 unsignaled flag, bits 61..32 VQP id
//! (0 = no VQP, injected tail signal), bits 31..0 number of send-queue slots
//! the completion frees.
//!
//! Unsignaled requests also carry an encoding so that an error completion on
//! one of them can still be attributed; for those, `comp_cnt` is the position
//! within the current unsignaled run.

use super::VqpId;

const FENCE: u64 = 1 << 63;
const UNSIGNALED: u64 = 1 << 62;
const ID_BITS: u32 = 30;
pub const MAX_VQP_ID: u32 = (1 << ID_BITS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WrIdEncoding {
    pub vqp: Option<VqpId>,
    pub comp_cnt: u32,
    /// Completion of a transfer fence request rather than a user request.
    pub fence: bool,
    pub unsignaled: bool,
}

impl WrIdEncoding {
    pub fn new(vqp: Option<VqpId>, comp_cnt: u32) -> Self {
        Self {
            vqp,
            comp_cnt,
            fence: false,
            unsignaled: false,
        }
    }

    pub fn encode(&self) -> u64 {
        let id = self.vqp.map_or(0, |v| v.0);
        debug_assert!(id <= MAX_VQP_ID);
        let f = if self.fence { FENCE } else { 0 };
        let u = if self.unsignaled { UNSIGNALED } else { 0 };
        f | u | (id as u64) << 32 | self.comp_cnt as u64
    }

    pub fn decode(raw: u64) -> Self {
        let id = ((raw >> 32) as u32) & MAX_VQP_ID;
        Self {
            vqp: (id != 0).then_some(VqpId(id)),
            comp_cnt: raw as u32,
            fence: raw & FENCE != 0,
            unsignaled: raw & UNSIGNALED != 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tail_signal_has_no_vqp() {
        let e = WrIdEncoding::new(None, 5);
        assert_eq!(WrIdEncoding::decode(e.encode()), e);
        assert_eq!(e.encode(), 5);
    }

    proptest! {
        #[test]
        fn round_trip(id in 0u32..=MAX_VQP_ID, cnt in any::<u32>(), fence in any::<bool>(),
                      unsignaled in any::<bool>()) {
            let e = WrIdEncoding {
                vqp: (id != 0).then_some(VqpId(id)),
                comp_cnt: cnt,
                fence,
                unsignaled,
            };
            prop_assert_eq!(WrIdEncoding::decode(e.encode()), e);
        }
    }
}
