//! Domain types and scenario configuration shared by every other module.
//!
//! All byte quantities (credit, allowance, clamps, backlog, TBS) are whole
//! bytes held in `i64`; the naive and event-driven gates must agree bit for
//! bit, so no floating point enters the credit path.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{HarqProcess, PhyTable};

/// Slot index.
pub type Slot = u64;
/// UE index in `[0, U)`.
pub type UeId = usize;
/// Signed byte count.
pub type Bytes = i64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(
        "target load rho={target} needs arrival probability {needed:.3} > 1; \
         enable `traffic.allow_payload_scaling` to scale payloads instead"
    )]
    UnreachableLoad { target: f64, needed: f64 },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassId {
    #[serde(rename = "p1")]
    P1,
    #[serde(rename = "p2")]
    P2,
    #[serde(rename = "p3")]
    P3,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::P1, ClassId::P2, ClassId::P3];

    pub fn index(self) -> usize {
        match self {
            ClassId::P1 => 0,
            ClassId::P2 => 1,
            ClassId::P3 => 2,
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassId::P1 => "p1",
            ClassId::P2 => "p2",
            ClassId::P3 => "p3",
        })
    }
}

/// A priority class with its reserved share of the residual capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityClass {
    pub id: ClassId,
    /// Fraction of the calibrated residual capacity reserved for the class.
    pub idle_slope_share: f64,
    pub payload_bytes: u32,
    /// Fixed per-UE allowance in bytes/slot; bypasses the share-based
    /// derivation when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowance_bytes: Option<Bytes>,
}

/// Per-UE allowance in bytes/slot: `round(share * link_rate * slot_ms / 1000)`,
/// never below one byte.
pub fn derive_allowance(share: f64, link_rate: f64, slot_ms: f64) -> Result<Bytes, ConfigError> {
    if !(share > 0.0) || !share.is_finite() {
        return Err(ConfigError::invalid(
            "idle_slope_share",
            format!("must be positive, got {share}"),
        ));
    }
    if !(link_rate > 0.0) || !link_rate.is_finite() {
        return Err(ConfigError::invalid(
            "link_rate",
            format!("must be positive, got {link_rate}"),
        ));
    }
    let raw = (share * link_rate * slot_ms / 1000.0).round();
    Ok((raw as Bytes).max(1))
}

/// Credit clamps `(lo, hi)`.
///
/// `hi` holds `burst_factor` maximum-size payloads worth of accrual, rounded
/// up to whole slots of allowance; `lo` is one maximal transport block.
pub fn derive_clamps(payload: Bytes, allowance: Bytes, max_tbs: Bytes, burst_factor: u32) -> (Bytes, Bytes) {
    debug_assert!(allowance > 0 && max_tbs > 0);
    let slots = (payload + allowance - 1) / allowance;
    let hi = (burst_factor.max(1) as Bytes) * slots.max(1) * allowance;
    (-max_tbs, hi)
}

/// One downlink packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub size: Bytes,
    pub arrival_slot: Slot,
    /// Bytes not yet packed into a new transport block.
    pub remaining: Bytes,
    pub delivered_slot: Option<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GrantKind {
    New,
    Retx,
}

/// One slot's allocation to one UE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub ue: UeId,
    pub slot: Slot,
    pub kind: GrantKind,
    pub rbs: u32,
    pub mcs: u8,
    /// Transport block size; for retransmissions the size of the original TB.
    pub tbs_bytes: Bytes,
    /// Bytes taken from the queue (`min(TBS, Q)`); zero for retransmissions.
    pub served_bytes: Bytes,
    pub padding_bytes: Bytes,
    pub harq_pid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateVariant {
    DT,
    PU,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateEngine {
    Naive,
    EventDriven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerKind {
    RR,
    PF,
    WPF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarqConfig {
    pub n_processes: usize,
    pub max_retx: u32,
    pub bler_new: f64,
    pub bler_retx: f64,
    pub rtt_slots: u64,
}

impl Default for HarqConfig {
    fn default() -> Self {
        Self {
            n_processes: 8,
            max_retx: 3,
            bler_new: 0.1,
            bler_retx: 0.01,
            rtt_slots: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub mean_on_slots: f64,
    /// Zero makes the source always ON.
    pub mean_off_slots: f64,
    /// Per-slot emission probability while ON; ignored when `target_rho` is set.
    pub arrival_prob: f64,
    pub target_rho: Option<f64>,
    pub allow_payload_scaling: bool,
    /// UEs whose queues are kept topped up (persistently backlogged).
    pub saturated_ues: Vec<UeId>,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            mean_on_slots: 20.0,
            mean_off_slots: 20.0,
            arrival_prob: 0.9,
            target_rho: None,
            allow_payload_scaling: true,
            saturated_ues: Vec::new(),
        }
    }
}

/// Two-state good/bad channel per UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CqiMarkov {
    pub p_good_to_bad: f64,
    pub p_bad_to_good: f64,
    /// CQI drop while in the bad state (floored at CQI 1).
    pub bad_cqi_drop: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClampPolicy {
    pub burst_factor: u32,
}

impl Default for ClampPolicy {
    fn default() -> Self {
        Self { burst_factor: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub num_slots: u64,
    /// Residual new-transmission rate in bytes/slot. When set, the
    /// saturated pre-run is skipped.
    pub c_res_override: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            num_slots: 20_000,
            c_res_override: None,
        }
    }
}

/// Per-UE overrides on top of the evenly split population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeOverride {
    pub ue: UeId,
    #[serde(default)]
    pub cqi: Option<u8>,
    #[serde(default)]
    pub class: Option<ClassId>,
}

/// Full scenario description for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_ues: usize,
    pub classes: Vec<PriorityClass>,
    /// Fixed CQI per class, indexed p1, p2, p3.
    pub cqi_by_class: [u8; 3],
    pub ue_overrides: Vec<UeOverride>,
    pub slot_ms: f64,
    pub num_slots: u64,
    pub rb_budget: u32,
    /// Allocation granularity in RBs.
    pub rbg_size: u32,
    pub grant_cap: usize,
    pub gate_variant: GateVariant,
    pub gate_engine: GateEngine,
    pub scheduler: SchedulerKind,
    /// Permits a credit gate under PF/WPF (no latency bound applies).
    pub allow_gated_pf: bool,
    pub pf_beta: f64,
    pub harq: HarqConfig,
    /// Inline bytes/RB table (15 entries); takes precedence over the file.
    pub phy_table: Option<Vec<u32>>,
    pub phy_table_path: Option<PathBuf>,
    pub cqi_markov: Option<CqiMarkov>,
    pub traffic: TrafficConfig,
    pub clamp: ClampPolicy,
    pub calibration: CalibrationConfig,
    /// Eligible-burst bound for the latency audit; measured when absent.
    pub e_max: Option<usize>,
    pub warmup_slots: u64,
    pub rng_seed: u64,
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_ues: 6,
            classes: vec![
                PriorityClass {
                    id: ClassId::P1,
                    idle_slope_share: 0.75,
                    payload_bytes: 80,
                    allowance_bytes: None,
                },
                PriorityClass {
                    id: ClassId::P2,
                    idle_slope_share: 0.20,
                    payload_bytes: 160,
                    allowance_bytes: None,
                },
                PriorityClass {
                    id: ClassId::P3,
                    idle_slope_share: 0.05,
                    payload_bytes: 240,
                    allowance_bytes: None,
                },
            ],
            cqi_by_class: [2, 5, 13],
            ue_overrides: Vec::new(),
            slot_ms: 1.0,
            num_slots: 100_000,
            rb_budget: 50,
            rbg_size: 2,
            grant_cap: 2,
            gate_variant: GateVariant::PU,
            gate_engine: GateEngine::EventDriven,
            scheduler: SchedulerKind::RR,
            allow_gated_pf: false,
            pf_beta: 0.01,
            harq: HarqConfig::default(),
            phy_table: None,
            phy_table_path: None,
            cqi_markov: None,
            traffic: TrafficConfig::default(),
            clamp: ClampPolicy::default(),
            calibration: CalibrationConfig::default(),
            e_max: None,
            warmup_slots: 2_000,
            rng_seed: 1,
            record_trace: false,
        }
    }
}

impl SimConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn class(&self, id: ClassId) -> Option<&PriorityClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Class of each UE: the population is split evenly in class order,
    /// then per-UE overrides apply.
    pub fn ue_classes(&self) -> Vec<ClassId> {
        let n = self.classes.len().max(1);
        let mut out: Vec<ClassId> = (0..self.num_ues)
            .map(|u| self.classes[(u * n / self.num_ues.max(1)).min(n - 1)].id)
            .collect();
        for o in &self.ue_overrides {
            if let (Some(c), Some(slot)) = (o.class, out.get_mut(o.ue)) {
                *slot = c;
            }
        }
        out
    }

    pub fn ue_cqis(&self) -> Vec<u8> {
        let classes = self.ue_classes();
        let mut out: Vec<u8> = classes.iter().map(|c| self.cqi_by_class[c.index()]).collect();
        for o in &self.ue_overrides {
            if let (Some(q), Some(slot)) = (o.cqi, out.get_mut(o.ue)) {
                *slot = q;
            }
        }
        out
    }

    pub fn gated(&self) -> bool {
        self.gate_variant != GateVariant::None
    }

    /// Resolves the PHY table from the inline list, the referenced file, or
    /// the shipped default.
    pub fn load_phy_table(&self) -> Result<PhyTable, ConfigError> {
        if let Some(values) = &self.phy_table {
            return PhyTable::new(values.clone());
        }
        match &self.phy_table_path {
            Some(path) => PhyTable::from_path(path),
            None => Ok(PhyTable::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_ues == 0 {
            return Err(ConfigError::invalid("num_ues", "must be at least 1"));
        }
        if self.classes.is_empty() {
            return Err(ConfigError::invalid("classes", "at least one class required"));
        }
        let mut share_sum = 0.0;
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.idle_slope_share > 0.0 && c.idle_slope_share <= 1.0) {
                return Err(ConfigError::invalid(
                    format!("classes[{i}].idle_slope_share"),
                    "must lie in (0, 1]",
                ));
            }
            if c.payload_bytes == 0 {
                return Err(ConfigError::invalid(format!("classes[{i}].payload_bytes"), "must be positive"));
            }
            if matches!(c.allowance_bytes, Some(a) if a <= 0) {
                return Err(ConfigError::invalid(format!("classes[{i}].allowance_bytes"), "must be positive"));
            }
            if self.classes[..i].iter().any(|o| o.id == c.id) {
                return Err(ConfigError::invalid(format!("classes[{i}].id"), "duplicate class"));
            }
            share_sum += c.idle_slope_share;
        }
        if share_sum > 1.0 + 1e-9 {
            return Err(ConfigError::invalid(
                "classes",
                format!("idle_slope_share values sum to {share_sum}, exceeding 1"),
            ));
        }
        for c in self.ue_classes() {
            if self.class(c).is_none() {
                return Err(ConfigError::invalid("ue_overrides", format!("class {c} is not configured")));
            }
        }
        for (i, q) in self.ue_cqis().iter().enumerate() {
            if !(1..=15).contains(q) {
                return Err(ConfigError::invalid(format!("cqi of ue {i}"), "must lie in [1, 15]"));
            }
        }
        for o in &self.ue_overrides {
            if o.ue >= self.num_ues {
                return Err(ConfigError::invalid("ue_overrides", format!("ue {} out of range", o.ue)));
            }
        }
        if !(self.slot_ms > 0.0) {
            return Err(ConfigError::invalid("slot_ms", "must be positive"));
        }
        if self.rb_budget == 0 {
            return Err(ConfigError::invalid("rb_budget", "must be positive"));
        }
        if self.rbg_size == 0 || self.rbg_size > self.rb_budget {
            return Err(ConfigError::invalid("rbg_size", "must lie in [1, rb_budget]"));
        }
        if self.grant_cap == 0 {
            return Err(ConfigError::invalid("grant_cap", "must be at least 1"));
        }
        if !(self.pf_beta > 0.0 && self.pf_beta <= 1.0) {
            return Err(ConfigError::invalid("pf_beta", "must lie in (0, 1]"));
        }
        if self.gated() && self.scheduler != SchedulerKind::RR && !self.allow_gated_pf {
            return Err(ConfigError::invalid(
                "scheduler",
                "credit gates run over RR; set allow_gated_pf for the experimental PF hybrid",
            ));
        }
        let h = &self.harq;
        if h.n_processes == 0 {
            return Err(ConfigError::invalid("harq.n_processes", "must be at least 1"));
        }
        if h.rtt_slots == 0 {
            return Err(ConfigError::invalid("harq.rtt_slots", "must be at least 1"));
        }
        for (key, p) in [("harq.bler_new", h.bler_new), ("harq.bler_retx", h.bler_retx)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::invalid(key, "must lie in [0, 1]"));
            }
        }
        let t = &self.traffic;
        if !(t.mean_on_slots >= 1.0) {
            return Err(ConfigError::invalid("traffic.mean_on_slots", "must be at least 1"));
        }
        if !(t.mean_off_slots == 0.0 || t.mean_off_slots >= 1.0) {
            return Err(ConfigError::invalid("traffic.mean_off_slots", "must be 0 or at least 1"));
        }
        if !(0.0..=1.0).contains(&t.arrival_prob) {
            return Err(ConfigError::invalid("traffic.arrival_prob", "must lie in [0, 1]"));
        }
        if matches!(t.target_rho, Some(r) if !(r > 0.0 && r.is_finite())) {
            return Err(ConfigError::invalid("traffic.target_rho", "must be positive"));
        }
        if let Some(u) = t.saturated_ues.iter().find(|&&u| u >= self.num_ues) {
            return Err(ConfigError::invalid("traffic.saturated_ues", format!("ue {u} out of range")));
        }
        if let Some(m) = &self.cqi_markov {
            for (key, p) in [("cqi_markov.p_good_to_bad", m.p_good_to_bad), ("cqi_markov.p_bad_to_good", m.p_bad_to_good)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(ConfigError::invalid(key, "must lie in [0, 1]"));
                }
            }
        }
        if matches!(self.calibration.c_res_override, Some(c) if !(c > 0.0)) {
            return Err(ConfigError::invalid("calibration.c_res_override", "must be positive"));
        }
        if self.calibration.num_slots == 0 && self.calibration.c_res_override.is_none() {
            return Err(ConfigError::invalid("calibration.num_slots", "must be positive"));
        }
        if self.clamp.burst_factor == 0 {
            return Err(ConfigError::invalid("clamp.burst_factor", "must be at least 1"));
        }
        self.load_phy_table()?;
        Ok(())
    }
}

/// Per-UE state owned by the slot loop.
#[derive(Debug, Clone)]
pub struct UeState {
    pub id: UeId,
    pub class: ClassId,
    /// Credit at `last_update_slot` (the event engine's lazy-accrual anchor;
    /// the naive engine keeps it current every slot).
    pub credit: Bytes,
    pub allowance: Bytes,
    pub clamp_lo: Bytes,
    pub clamp_hi: Bytes,
    /// Packets with bytes not yet packed into a new transport block.
    pub queue: VecDeque<Packet>,
    pub backlog: Bytes,
    pub last_update_slot: Slot,
    pub cqi: u8,
    pub harq: Vec<HarqProcess>,
}

impl UeState {
    pub fn is_backlogged(&self) -> bool {
        self.backlog > 0
    }

    pub fn has_free_harq(&self) -> bool {
        self.harq.iter().any(HarqProcess::is_free)
    }

    pub fn free_harq_pid(&self) -> Option<usize> {
        self.harq.iter().position(HarqProcess::is_free)
    }
}
