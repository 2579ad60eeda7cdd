//! Node identity and the partitioned global address space.
//!
//! Every node owns one shared segment of identical size plus a private
//! region. A [`GlobalAddress`] names a byte inside some node's shared
//! segment; private memory is never globally addressable.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("offset {offset:#x} (+{len} bytes) lies outside the {shared_size}-byte shared segment")]
    OutOfSegment { offset: u64, len: u64, shared_size: u64 },
    #[error("node {node} is not a rank of this {node_count}-node job")]
    BadNode { node: NodeId, node_count: usize },
    #[error("invalid segment layout: {0}")]
    InvalidLayout(&'static str),
}

/// 0-based rank of a node in the job.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn check(self, node_count: usize) -> Result<Self, AddressError> {
        if self.index() < node_count {
            Ok(self)
        } else {
            Err(AddressError::BadNode { node: self, node_count })
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u16> for NodeId {
    fn from(id: u16) -> Self {
        NodeId(id)
    }
}

/// A byte location inside a node's shared segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlobalAddress {
    pub node: NodeId,
    pub offset: u64,
}

impl GlobalAddress {
    pub fn new(node: impl Into<NodeId>, offset: u64) -> Self {
        GlobalAddress { node: node.into(), offset }
    }

    /// The address `delta` bytes further into the same segment.
    pub fn add(self, delta: u64) -> Self {
        GlobalAddress { node: self.node, offset: self.offset + delta }
    }
}

/// Per-node memory sizes. The shared size is uniform across the job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentLayout {
    pub shared_size: u64,
    pub private_size: u64,
}

impl Default for SegmentLayout {
    fn default() -> Self {
        SegmentLayout { shared_size: 4 << 20, private_size: 1 << 20 }
    }
}

/// Maps a global address to an offset in its node's shared segment.
pub fn resolve(ga: GlobalAddress, layout: &SegmentLayout) -> Result<u64, AddressError> {
    if ga.offset >= layout.shared_size {
        return Err(AddressError::OutOfSegment {
            offset: ga.offset,
            len: 0,
            shared_size: layout.shared_size,
        });
    }
    Ok(ga.offset)
}

/// Like [`resolve`], but also requires `len` bytes starting at the address
/// to fit in the segment. A zero-length access is valid at any in-bounds
/// offset.
pub fn resolve_range(
    ga: GlobalAddress,
    len: u64,
    layout: &SegmentLayout,
) -> Result<u64, AddressError> {
    let offset = resolve(ga, layout)?;
    match offset.checked_add(len) {
        Some(end) if end <= layout.shared_size => Ok(offset),
        _ => Err(AddressError::OutOfSegment { offset, len, shared_size: layout.shared_size }),
    }
}

pub fn validate_layout(layout: &SegmentLayout, node_count: usize) -> Result<(), AddressError> {
    if node_count == 0 {
        return Err(AddressError::InvalidLayout("job needs at least one node"));
    }
    if node_count > u16::MAX as usize {
        return Err(AddressError::InvalidLayout("node count exceeds 16-bit rank space"));
    }
    if layout.shared_size == 0 {
        return Err(AddressError::InvalidLayout("shared segment size is zero"));
    }
    if layout.private_size == 0 {
        return Err(AddressError::InvalidLayout("private region size is zero"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KIB64: u64 = 64 * 1024;

    fn layout() -> SegmentLayout {
        SegmentLayout { shared_size: KIB64, private_size: KIB64 }
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(resolve(GlobalAddress::new(1, 0), &layout()), Ok(0));
        assert_eq!(resolve(GlobalAddress::new(0, 4096), &layout()), Ok(4096));
        assert!(matches!(
            resolve(GlobalAddress::new(0, 65536), &layout()),
            Err(AddressError::OutOfSegment { .. })
        ));
    }

    #[test]
    fn resolve_range_checks_length() {
        let l = layout();
        assert_eq!(resolve_range(GlobalAddress::new(0, KIB64 - 4), 4, &l), Ok(KIB64 - 4));
        assert!(resolve_range(GlobalAddress::new(0, KIB64 - 4), 5, &l).is_err());
        assert!(resolve_range(GlobalAddress::new(0, 1), u64::MAX, &l).is_err());
    }

    #[test]
    fn validate_layout_examples() {
        assert!(validate_layout(&layout(), 2).is_ok());
        let zero_shared = SegmentLayout { shared_size: 0, private_size: KIB64 };
        assert!(matches!(
            validate_layout(&zero_shared, 2),
            Err(AddressError::InvalidLayout(_))
        ));
        assert!(matches!(validate_layout(&layout(), 0), Err(AddressError::InvalidLayout(_))));
    }

    #[test]
    fn node_check() {
        assert!(NodeId(1).check(2).is_ok());
        assert!(NodeId(2).check(2).is_err());
    }

    proptest! {
        #[test]
        fn resolve_stays_in_segment(node in 0u16..8, offset in any::<u64>(), shared in 1u64..1 << 40) {
            let l = SegmentLayout { shared_size: shared, private_size: 1 };
            match resolve(GlobalAddress::new(node, offset), &l) {
                Ok(local) => {
                    prop_assert!(local < shared);
                    prop_assert_eq!(local, offset);
                }
                Err(_) => prop_assert!(offset >= shared),
            }
        }
    }
}
