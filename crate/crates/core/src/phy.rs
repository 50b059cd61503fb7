//! Abstract PHY and stop-and-wait HARQ.
//!
//! CQI maps one-to-one onto an MCS index; a grant of `rbs` resource blocks at
//! MCS `m` carries `rbs * bytes_per_rb[m]` bytes.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::model::{Bytes, ConfigError, Grant, GrantKind, Slot, UeId, UeState};

const DEFAULT_TABLE: &str = include_str!("../data/phy_table_default.txt");

/// Bytes per RB for MCS 1..=15.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyTable {
    bytes_per_rb: Vec<u32>,
}

impl PhyTable {
    pub const ENTRIES: usize = 15;

    pub fn new(bytes_per_rb: Vec<u32>) -> Result<Self, ConfigError> {
        if bytes_per_rb.len() != Self::ENTRIES {
            return Err(ConfigError::invalid(
                "phy_table",
                format!("expected {} entries, got {}", Self::ENTRIES, bytes_per_rb.len()),
            ));
        }
        if bytes_per_rb.contains(&0) {
            return Err(ConfigError::invalid("phy_table", "entries must be positive"));
        }
        if bytes_per_rb.windows(2).any(|w| w[1] < w[0]) {
            return Err(ConfigError::invalid("phy_table", "entries must be non-decreasing in MCS"));
        }
        Ok(Self { bytes_per_rb })
    }

    /// Parses one integer per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let v = line.parse::<u32>().map_err(|e| {
                ConfigError::invalid("phy_table", format!("line {}: {e}", lineno + 1))
            })?;
            values.push(v);
        }
        Self::new(values)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn bytes_per_rb(&self, mcs: u8) -> Result<u32, ConfigError> {
        if !(1..=Self::ENTRIES as u8).contains(&mcs) {
            return Err(ConfigError::invalid("mcs", format!("{mcs} outside [1, 15]")));
        }
        Ok(self.bytes_per_rb[mcs as usize - 1])
    }

    pub fn values(&self) -> &[u32] {
        &self.bytes_per_rb
    }
}

impl Default for PhyTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped PHY table is valid")
    }
}

/// CQI to MCS mapping (identity over 1..=15).
pub fn mcs_for_cqi(cqi: u8) -> u8 {
    cqi.clamp(1, 15)
}

pub fn tbs_lookup(mcs: u8, rbs: u32, table: &PhyTable) -> Result<Bytes, ConfigError> {
    Ok(rbs as Bytes * table.bytes_per_rb(mcs)? as Bytes)
}

/// One Bernoulli draw: `true` means the block was received in error.
pub fn draw_block_error<R: Rng + ?Sized>(rng: &mut R, attempt: u32, bler_new: f64, bler_retx: f64) -> bool {
    debug_assert!(attempt >= 1);
    let p = if attempt == 1 { bler_new } else { bler_retx };
    rng.gen::<f64>() < p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarqState {
    Free,
    InFlight { feedback_slot: Slot },
    AwaitRetx { nack_slot: Slot },
}

/// Part of a packet carried by a transport block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub packet: u64,
    pub bytes: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarqProcess {
    pub pid: usize,
    pub state: HarqState,
    /// Queue bytes carried by the TB (padding excluded).
    pub tb_bytes: Bytes,
    pub tbs: Bytes,
    pub segments: Vec<Segment>,
    pub attempts: u32,
    pub rbs_used: u32,
    pub mcs: u8,
}

impl HarqProcess {
    pub fn new(pid: usize) -> Self {
        Self {
            pid,
            state: HarqState::Free,
            tb_bytes: 0,
            tbs: 0,
            segments: Vec::new(),
            attempts: 0,
            rbs_used: 0,
            mcs: 1,
        }
    }

    pub fn is_free(&self) -> bool {
        self.state == HarqState::Free
    }

    /// Loads a fresh TB and marks the first attempt in flight.
    pub fn start(&mut self, now: Slot, rtt: Slot, tbs: Bytes, rbs: u32, mcs: u8, segments: Vec<Segment>) {
        debug_assert!(self.is_free());
        self.tb_bytes = segments.iter().map(|s| s.bytes).sum();
        self.tbs = tbs;
        self.segments = segments;
        self.attempts = 1;
        self.rbs_used = rbs;
        self.mcs = mcs;
        self.state = HarqState::InFlight { feedback_slot: now + rtt };
    }

    fn release(&mut self) -> Vec<Segment> {
        self.state = HarqState::Free;
        self.tb_bytes = 0;
        self.tbs = 0;
        self.attempts = 0;
        std::mem::take(&mut self.segments)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeedbackOutcome {
    /// TB acknowledged; the carried segments are delivered.
    Delivered(Vec<Segment>),
    /// NACK with attempts left; the job awaits a retransmission.
    AwaitRetx,
    /// NACK after the last allowed attempt; the carried segments are lost.
    Dropped(Vec<Segment>),
}

#[derive(Debug, thiserror::Error)]
#[error("feedback for HARQ process {pid} that is not in flight")]
pub struct HarqError {
    pub pid: usize,
}

pub fn on_feedback(process: &mut HarqProcess, ack: bool, now: Slot, max_retx: u32) -> Result<FeedbackOutcome, HarqError> {
    if !matches!(process.state, HarqState::InFlight { .. }) {
        return Err(HarqError { pid: process.pid });
    }
    if ack {
        return Ok(FeedbackOutcome::Delivered(process.release()));
    }
    if process.attempts > max_retx {
        return Ok(FeedbackOutcome::Dropped(process.release()));
    }
    process.state = HarqState::AwaitRetx { nack_slot: now };
    Ok(FeedbackOutcome::AwaitRetx)
}

/// Pending retransmission, ordered oldest NACK first, then UE id, then pid.
pub type RetxJob = (Slot, UeId, usize);

/// Allocates pending retransmissions in FIFO order with their original RB
/// count until the next job no longer fits. Served jobs go back in flight
/// and leave the pending set.
pub fn schedule_retx(
    pending: &mut BTreeSet<RetxJob>,
    ues: &mut [UeState],
    rb_budget: u32,
    now: Slot,
    rtt: Slot,
) -> (Vec<Grant>, u32) {
    let mut residual = rb_budget;
    let mut grants = Vec::new();
    while let Some(&job) = pending.first() {
        let (_, ue, pid) = job;
        let proc = &mut ues[ue].harq[pid];
        if proc.rbs_used > residual {
            break;
        }
        pending.pop_first();
        residual -= proc.rbs_used;
        proc.attempts += 1;
        proc.state = HarqState::InFlight { feedback_slot: now + rtt };
        grants.push(Grant {
            ue,
            slot: now,
            kind: GrantKind::Retx,
            rbs: proc.rbs_used,
            mcs: proc.mcs,
            tbs_bytes: proc.tbs,
            served_bytes: 0,
            padding_bytes: 0,
            harq_pid: pid,
        });
    }
    (grants, residual)
}
