//! Per-node shared and private memories with DMA-style access.
//!
//! The private region reserves its first [`COMPLETION_FLAG_LEN`] bytes for
//! the compute-completion counter and its tail for the medium-message
//! scratch ring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::SegmentLayout;

pub const DEFAULT_SCRATCH_SIZE: u64 = 64 * 1024;
pub const COMPLETION_FLAG_OFFSET: u64 = 0;
pub const COMPLETION_FLAG_LEN: u64 = 8;

/// Element type of accelerator tensors: 16-bit integers, matching the
/// accelerator's 16-bit datapath.
pub type Element = i16;
pub const ELEMENT_SIZE: usize = std::mem::size_of::<Element>();

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("{region:?} access [{offset}, +{len}) exceeds region size {size}")]
    OutOfBounds { region: Region, offset: u64, len: u64, size: u64 },
    #[error("medium payload of {len} bytes exceeds the {capacity}-byte scratch buffer")]
    ScratchOverflow { len: u64, capacity: u64 },
    #[error("byte range of {0} bytes is not a whole number of elements")]
    Misaligned(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Shared,
    Private,
}

/// A byte range in one of a node's own regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalRange {
    pub region: Region,
    pub offset: u64,
    pub len: u64,
}

impl LocalRange {
    pub fn shared(offset: u64, len: u64) -> Self {
        LocalRange { region: Region::Shared, offset, len }
    }

    pub fn private(offset: u64, len: u64) -> Self {
        LocalRange { region: Region::Private, offset, len }
    }
}

#[derive(Debug, Clone)]
struct ScratchRing {
    base: u64,
    capacity: u64,
    next: u64,
}

#[derive(Debug, Clone)]
pub struct NodeMemory {
    shared: Vec<u8>,
    private: Vec<u8>,
    scratch: ScratchRing,
}

impl NodeMemory {
    /// Zero-initialized memory. The scratch ring takes `scratch_size` bytes
    /// at the end of private memory, clamped to half of the region.
    pub fn new(layout: &SegmentLayout, scratch_size: u64) -> Self {
        let capacity = scratch_size.min(layout.private_size / 2);
        NodeMemory {
            shared: vec![0; layout.shared_size as usize],
            private: vec![0; layout.private_size as usize],
            scratch: ScratchRing { base: layout.private_size - capacity, capacity, next: 0 },
        }
    }

    pub fn size(&self, region: Region) -> u64 {
        self.bytes(region).len() as u64
    }

    fn bytes(&self, region: Region) -> &[u8] {
        match region {
            Region::Shared => &self.shared,
            Region::Private => &self.private,
        }
    }

    fn bytes_mut(&mut self, region: Region) -> &mut [u8] {
        match region {
            Region::Shared => &mut self.shared,
            Region::Private => &mut self.private,
        }
    }

    pub fn check(&self, range: LocalRange) -> Result<(), MemoryError> {
        let size = self.size(range.region);
        match range.offset.checked_add(range.len) {
            Some(end) if end <= size => Ok(()),
            _ => Err(MemoryError::OutOfBounds {
                region: range.region,
                offset: range.offset,
                len: range.len,
                size,
            }),
        }
    }

    /// Borrowed view of a checked range.
    pub fn view(&self, range: LocalRange) -> Result<&[u8], MemoryError> {
        self.check(range)?;
        let start = range.offset as usize;
        Ok(&self.bytes(range.region)[start..start + range.len as usize])
    }

    pub fn dma_read(&self, region: Region, offset: u64, len: u64) -> Result<Vec<u8>, MemoryError> {
        self.view(LocalRange { region, offset, len }).map(<[u8]>::to_vec)
    }

    pub fn dma_write(&mut self, region: Region, offset: u64, data: &[u8]) -> Result<(), MemoryError> {
        self.check(LocalRange { region, offset, len: data.len() as u64 })?;
        let start = offset as usize;
        self.bytes_mut(region)[start..start + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read_elements(&self, range: LocalRange) -> Result<Vec<Element>, MemoryError> {
        if range.len % ELEMENT_SIZE as u64 != 0 {
            return Err(MemoryError::Misaligned(range.len));
        }
        let bytes = self.view(range)?;
        Ok(bytes
            .chunks_exact(ELEMENT_SIZE)
            .map(|c| Element::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    pub fn write_elements(&mut self, region: Region, offset: u64, values: &[Element]) -> Result<(), MemoryError> {
        let len = (values.len() * ELEMENT_SIZE) as u64;
        self.check(LocalRange { region, offset, len })?;
        let start = offset as usize;
        let dst = &mut self.bytes_mut(region)[start..start + len as usize];
        for (chunk, v) in dst.chunks_exact_mut(ELEMENT_SIZE).zip(values) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Places a medium payload in the scratch ring and returns where it went.
    pub fn stage_medium(&mut self, payload: &[u8]) -> Result<LocalRange, MemoryError> {
        let len = payload.len() as u64;
        let ring = &mut self.scratch;
        if len > ring.capacity {
            return Err(MemoryError::ScratchOverflow { len, capacity: ring.capacity });
        }
        if ring.next + len > ring.capacity {
            ring.next = 0;
        }
        let offset = ring.base + ring.next;
        ring.next += len;
        self.dma_write(Region::Private, offset, payload)?;
        Ok(LocalRange::private(offset, len))
    }

    pub fn scratch_range(&self) -> LocalRange {
        LocalRange::private(self.scratch.base, self.scratch.capacity)
    }

    /// Number of compute commands this node's accelerator has finished, as
    /// published to the host-visible completion flag.
    pub fn completion_count(&self) -> u64 {
        let b = &self.private[COMPLETION_FLAG_OFFSET as usize..(COMPLETION_FLAG_OFFSET + COMPLETION_FLAG_LEN) as usize];
        u64::from_le_bytes(b.try_into().expect("8-byte flag"))
    }

    pub(crate) fn bump_completion_count(&mut self) {
        let next = self.completion_count() + 1;
        let start = COMPLETION_FLAG_OFFSET as usize;
        self.private[start..start + COMPLETION_FLAG_LEN as usize].copy_from_slice(&next.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mem() -> NodeMemory {
        NodeMemory::new(&SegmentLayout { shared_size: 4096, private_size: 4096 }, DEFAULT_SCRATCH_SIZE)
    }

    #[test]
    fn read_write_examples() {
        let mut m = mem();
        m.dma_write(Region::Shared, 0, &[1, 2, 3]).unwrap();
        assert_eq!(m.dma_read(Region::Shared, 0, 3).unwrap(), vec![1, 2, 3]);
        assert!(matches!(m.dma_read(Region::Shared, 4095, 2), Err(MemoryError::OutOfBounds { .. })));
        assert_eq!(m.dma_read(Region::Shared, 0, 0).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn write_edges() {
        let mut m = mem();
        assert!(m.dma_write(Region::Private, 4096, &[1]).is_err());
        let before = m.dma_read(Region::Shared, 0, 4096).unwrap();
        m.dma_write(Region::Shared, 17, &[]).unwrap();
        assert_eq!(m.dma_read(Region::Shared, 0, 4096).unwrap(), before);
        assert!(m.dma_read(Region::Shared, u64::MAX, 2).is_err());
    }

    #[test]
    fn elements_round_trip() {
        let mut m = mem();
        m.write_elements(Region::Shared, 10, &[-3, 0, 32767, -32768]).unwrap();
        assert_eq!(m.read_elements(LocalRange::shared(10, 8)).unwrap(), vec![-3, 0, 32767, -32768]);
        assert_eq!(m.read_elements(LocalRange::shared(10, 3)), Err(MemoryError::Misaligned(3)));
    }

    #[test]
    fn scratch_ring_wraps_inside_private() {
        let mut m = mem();
        let scratch = m.scratch_range();
        assert_eq!(scratch.len, 2048);
        assert_eq!(scratch.offset + scratch.len, 4096);
        let a = m.stage_medium(&[1; 1500]).unwrap();
        let b = m.stage_medium(&[2; 1000]).unwrap();
        assert_eq!(a.offset, scratch.offset);
        assert_eq!(b.offset, scratch.offset, "wrapped to the ring start");
        assert_eq!(m.dma_read(Region::Private, b.offset, 1000).unwrap(), vec![2; 1000]);
        assert!(matches!(m.stage_medium(&[0; 4000]), Err(MemoryError::ScratchOverflow { .. })));
    }

    #[test]
    fn completion_flag() {
        let mut m = mem();
        assert_eq!(m.completion_count(), 0);
        m.bump_completion_count();
        m.bump_completion_count();
        assert_eq!(m.completion_count(), 2);
    }

    proptest! {
        #[test]
        fn matches_flat_array_oracle(ops in prop::collection::vec((0u64..600, prop::collection::vec(any::<u8>(), 0..64), any::<bool>()), 1..200)) {
            let layout = SegmentLayout { shared_size: 512, private_size: 512 };
            let mut m = NodeMemory::new(&layout, 128);
            let mut oracle = vec![0u8; 512];
            for (offset, data, read) in ops {
                if read {
                    let len = data.len() as u64;
                    let got = m.dma_read(Region::Shared, offset, len);
                    if offset + len <= 512 {
                        prop_assert_eq!(got.unwrap(), oracle[offset as usize..(offset + len) as usize].to_vec());
                    } else {
                        prop_assert!(got.is_err());
                    }
                } else {
                    let res = m.dma_write(Region::Shared, offset, &data);
                    if offset + data.len() as u64 <= 512 {
                        res.unwrap();
                        oracle[offset as usize..offset as usize + data.len()].copy_from_slice(&data);
                    } else {
                        prop_assert!(res.is_err());
                    }
                }
                prop_assert_eq!(m.dma_read(Region::Shared, 0, 512).unwrap(), oracle.clone());
            }
        }
    }
}
