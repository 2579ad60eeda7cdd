//! Job configuration, read from a single JSON document.
//!
//! ```json
//! {
//!   "nodes": 2,
//!   "topology": "ring",
//!   "link": { "hop_latency_cycles": 44, "packet_overhead_bytes": 16 },
//!   "segment": { "shared_size": 4194304, "private_size": 1048576 },
//!   "dla": { "drain_overhead_cycles": 256 },
//!   "packet_size": 512
//! }
//! ```
//!
//! Every key is optional and falls back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::addressing::{validate_layout, SegmentLayout};
use crate::am::DEFAULT_QUEUE_DEPTH;
use crate::compute::DlaConfig;
use crate::memory::{COMPLETION_FLAG_LEN, DEFAULT_SCRATCH_SIZE};
use crate::transport::{LinkConfig, TopologyKind};
use crate::wire::check_mtu;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreConfig {
    pub queue_depth: usize,
    /// Cycles from grant to a formed message header.
    pub sequencer_cycles: u64,
    /// Extra cycles to fetch a payload from memory, charged only when there
    /// is one.
    pub dma_read_latency_cycles: u64,
    /// Cycles from the last packet's arrival to handler dispatch.
    pub rx_handler_cycles: u64,
    pub scratch_size: u64,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            queue_depth: DEFAULT_QUEUE_DEPTH,
            sequencer_cycles: 2,
            dma_read_latency_cycles: 16,
            rx_handler_cycles: 4,
            scratch_size: DEFAULT_SCRATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub nodes: usize,
    pub topology: TopologyKind,
    pub link: LinkConfig,
    pub segment: SegmentLayout,
    pub dla: DlaConfig,
    pub core: CoreConfig,
    /// Maximum packet body size in bytes.
    pub packet_size: usize,
    /// Events a single run may process before it is declared livelocked.
    pub max_events: u64,
    pub trace: bool,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            nodes: 2,
            topology: TopologyKind::Ring,
            link: LinkConfig::default(),
            segment: SegmentLayout::default(),
            dla: DlaConfig::default(),
            core: CoreConfig::default(),
            packet_size: 512,
            max_events: 200_000_000,
            trace: true,
        }
    }
}

impl JobConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        validate_layout(&self.segment, self.nodes).map_err(|e| e.to_string())?;
        if self.segment.private_size < 2 * COMPLETION_FLAG_LEN {
            return Err(format!("private region must hold at least {} bytes", 2 * COMPLETION_FLAG_LEN));
        }
        self.link.validate().map_err(|e| e.to_string())?;
        self.dla.validate()?;
        if self.dla.clock_hz != self.link.clock_hz {
            return Err("the accelerator and links must share one clock".into());
        }
        check_mtu(self.packet_size).map_err(|e| e.to_string())?;
        if self.core.queue_depth < self.nodes.max(1) {
            return Err(format!(
                "queue depth {} cannot hold one barrier release per node ({} nodes)",
                self.core.queue_depth, self.nodes
            ));
        }
        if self.max_events == 0 {
            return Err("max_events must be positive".into());
        }
        Ok(())
    }
}
