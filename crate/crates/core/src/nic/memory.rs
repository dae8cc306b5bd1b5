use std::collections::HashMap;

const PAGE: u64 = 4096;

/// Sparse byte-addressable memory; unwritten bytes read as zero.
#[derive(Debug, Default, Clone)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl Memory {
    pub fn read(&self, addr: u64, len: u64) -> Vec<u8> {
        let mut out = vec![0u8; len as usize];
        let mut done = 0u64;
        while done < len {
            let a = addr + done;
            let (page, off) = (a / PAGE, a % PAGE);
            let n = (PAGE - off).min(len - done);
            if let Some(p) = self.pages.get(&page) {
                out[done as usize..(done + n) as usize]
                    .copy_from_slice(&p[off as usize..(off + n) as usize]);
            }
            done += n;
        }
        out
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        let len = data.len() as u64;
        let mut done = 0u64;
        while done < len {
            let a = addr + done;
            let (page, off) = (a / PAGE, a % PAGE);
            let n = (PAGE - off).min(len - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0u8; PAGE as usize]));
            p[off as usize..(off + n) as usize]
                .copy_from_slice(&data[done as usize..(done + n) as usize]);
            done += n;
        }
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        u64::from_le_bytes(self.read(addr, 8).try_into().expect("8 bytes"))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) {
        self.write(addr, &v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unwritten_is_zero() {
        let m = Memory::default();
        assert_eq!(m.read(12345, 4), vec![0; 4]);
    }

    #[test]
    fn write_across_pages() {
        let mut m = Memory::default();
        let data: Vec<u8> = (0..10_000u32).map(|i| (i % 251) as u8).collect();
        m.write(PAGE - 7, &data);
        assert_eq!(m.read(PAGE - 7, data.len() as u64), data);
        assert_eq!(m.read(PAGE - 8, 1), vec![0]);
    }
}
