//! Slot loop: HARQ feedback, retransmissions, gate, selection, RB
//! allocation, queue service, credit update, arrivals.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credit::{compute_debit, slot_update, CreditUpdateInput, DebitVariant};
use crate::event::{credit_at, EngineError, EventCounters, EventGate};
use crate::model::{
    derive_allowance, derive_clamps, Bytes, ClassId, ConfigError, GateEngine, GateVariant, Grant, GrantKind,
    Packet, SchedulerKind, SimConfig, Slot, UeId, UeState,
};
use crate::phy::{
    draw_block_error, mcs_for_cqi, on_feedback, schedule_retx, FeedbackOutcome, HarqError, HarqProcess, PhyTable,
    RetxJob, Segment,
};
use crate::rng::{stream, StreamKind};
use crate::sched::{allocate_rbs, pf_select, rbs_needed, rr_select, wpf_select, EligibleRing, PfState};
use crate::traffic::{calibrate_load, on_fraction, OnOffSource};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Harq(#[from] HarqError),
    #[error("slot {slot}: {message}")]
    Invariant { slot: Slot, message: String },
}

/// Capacity measurement and the traffic scaling derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Saturated new-transmission service rate, bytes/slot.
    pub c_dl: f64,
    /// Residual capacity that class shares are taken from, bytes/slot.
    pub c_res: f64,
    pub arrival_prob: f64,
    pub payload_scale: u32,
    /// Offered load in bytes/slot.
    pub offered: f64,
}

/// Measures capacity with a saturated RR pre-run (or takes the override)
/// and scales traffic to the target load.
pub fn calibrate(cfg: &SimConfig) -> Result<Calibration, SimError> {
    cfg.validate()?;
    let c_dl = match cfg.calibration.c_res_override {
        Some(c) => c,
        None => measure_capacity(cfg)?,
    };
    let saturated: BTreeSet<UeId> = cfg.traffic.saturated_ues.iter().copied().collect();
    let payloads: Vec<Bytes> = cfg
        .ue_classes()
        .iter()
        .enumerate()
        .filter(|(u, _)| !saturated.contains(u))
        .map(|(_, c)| cfg.class(*c).map_or(0, |k| k.payload_bytes as Bytes))
        .collect();
    let on_frac = on_fraction(cfg.traffic.mean_on_slots, cfg.traffic.mean_off_slots);
    let (arrival_prob, payload_scale, offered) = match cfg.traffic.target_rho {
        Some(rho) if !payloads.is_empty() => {
            let cal = calibrate_load(c_dl, &payloads, on_frac, rho, cfg.traffic.allow_payload_scaling)?;
            (cal.arrival_prob, cal.payload_scale, cal.offered)
        }
        _ => {
            let q = cfg.traffic.arrival_prob;
            (q, 1, q * on_frac * payloads.iter().sum::<Bytes>() as f64)
        }
    };
    Ok(Calibration {
        c_dl,
        c_res: c_dl,
        arrival_prob,
        payload_scale,
        offered,
    })
}

fn measure_capacity(cfg: &SimConfig) -> Result<f64, SimError> {
    let mut pre = cfg.clone();
    pre.gate_variant = GateVariant::None;
    pre.gate_engine = GateEngine::EventDriven;
    pre.scheduler = SchedulerKind::RR;
    pre.traffic.saturated_ues = (0..cfg.num_ues).collect();
    pre.traffic.target_rho = None;
    pre.num_slots = cfg.calibration.num_slots;
    pre.warmup_slots = cfg.calibration.num_slots / 10;
    pre.record_trace = false;
    let placeholder = Calibration {
        c_dl: 1.0,
        c_res: 1.0,
        arrival_prob: 0.0,
        payload_scale: 1,
        offered: 0.0,
    };
    let report = Simulation::new(pre, placeholder)?.run_to_end()?;
    let served: Bytes = report.ues.iter().map(|u| u.served_bytes).sum();
    let slots = report.measured_slots().max(1);
    Ok(served as f64 / slots as f64)
}

/// One point of a population sweep at fixed per-slot event rates: sources
/// are always ON and each UE emits with probability `packets_per_slot / U`.
/// Shares are taken from `c_res`, so the saturated pre-run is skipped.
pub fn scaled_population(base: &SimConfig, num_ues: usize, packets_per_slot: f64, c_res: f64) -> SimConfig {
    let mut cfg = base.clone();
    cfg.num_ues = num_ues;
    cfg.traffic.mean_off_slots = 0.0;
    cfg.traffic.target_rho = None;
    cfg.traffic.arrival_prob = (packets_per_slot / num_ues as f64).min(1.0);
    cfg.calibration.c_res_override = Some(c_res);
    cfg
}

/// Observable state of one slot, identical between engines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTrace {
    pub slot: Slot,
    /// Ring members at the grant phase (backlogged, free HARQ, credit >= 0).
    pub members: Vec<UeId>,
    /// Members not holding a retransmission this slot.
    pub eligible: Vec<UeId>,
    pub k_eff: usize,
    pub grants: Vec<Grant>,
    /// Backlog at the start of the slot.
    pub backlog: Vec<Bytes>,
    /// Credit at the start of the next slot.
    pub credits: Vec<Bytes>,
    pub arrivals: Vec<(UeId, Bytes)>,
    /// Packets delivered this slot.
    pub departures: Vec<(UeId, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ue: UeId,
    pub class: ClassId,
    pub arrival_slot: Slot,
    pub latency_slots: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UeMetrics {
    pub ue: UeId,
    pub class: Option<ClassId>,
    pub cqi: u8,
    pub allowance: Bytes,
    pub clamp_lo: Bytes,
    pub clamp_hi: Bytes,
    pub max_tbs: Bytes,
    pub saturated: bool,
    /// Queue bytes carried by new grants.
    pub served_bytes: Bytes,
    /// TBS of new grants.
    pub tbs_bytes: Bytes,
    pub delivered_bytes: Bytes,
    pub dropped_bytes: Bytes,
    pub arrived_bytes: Bytes,
    pub new_grants: u64,
    pub retx_grants: u64,
}

impl UeMetrics {
    pub fn eta(&self) -> f64 {
        if self.tbs_bytes == 0 {
            1.0
        } else {
            self.served_bytes as f64 / self.tbs_bytes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_slots: u64,
    pub warmup_slots: u64,
    pub slot_ms: f64,
    pub calibration: Calibration,
    pub packets: Vec<PacketRecord>,
    pub ues: Vec<UeMetrics>,
    pub counters: EventCounters,
    /// First transmissions of new TBs and how many were NACKed.
    pub first_tx: u64,
    pub first_tx_nacks: u64,
    pub max_members: usize,
}

impl MetricsReport {
    pub fn measured_slots(&self) -> u64 {
        self.num_slots.saturating_sub(self.warmup_slots)
    }

    /// Offered bytes/slot over the measured window, relative to `c_dl`.
    pub fn measured_rho(&self) -> f64 {
        let arrived: Bytes = self.ues.iter().filter(|u| !u.saturated).map(|u| u.arrived_bytes).sum();
        arrived as f64 / self.measured_slots().max(1) as f64 / self.calibration.c_dl
    }

    pub fn class_eta(&self, class: ClassId) -> f64 {
        let (s, t) = self
            .ues
            .iter()
            .filter(|u| u.class == Some(class))
            .fold((0, 0), |(s, t), u| (s + u.served_bytes, t + u.tbs_bytes));
        if t == 0 {
            1.0
        } else {
            s as f64 / t as f64
        }
    }

    pub fn overall_eta(&self) -> f64 {
        let (s, t) = self.ues.iter().fold((0, 0), |(s, t), u| (s + u.served_bytes, t + u.tbs_bytes));
        if t == 0 {
            1.0
        } else {
            s as f64 / t as f64
        }
    }

    /// Latencies in ms of the class's delivered packets, sorted.
    pub fn latencies_ms(&self, class: ClassId) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .packets
            .iter()
            .filter(|p| p.class == class)
            .map(|p| p.latency_slots as f64 * self.slot_ms)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Nearest-rank quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Result of packing a new TB from the head of the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Service {
    pub served: Bytes,
    pub padding: Bytes,
    pub segments: Vec<Segment>,
    /// Packets whose last byte went into this TB.
    pub completed: Vec<u64>,
}

/// Dequeues `min(tbs, backlog)` bytes FIFO; packets may split across TBs.
pub fn serve_queue(ue: &mut UeState, tbs: Bytes) -> Service {
    let mut left = tbs.min(ue.backlog).max(0);
    let served = left;
    let mut segments = Vec::new();
    let mut completed = Vec::new();
    while left > 0 {
        let p = ue.queue.front_mut().expect("backlog accounts for queued bytes");
        let take = p.remaining.min(left);
        p.remaining -= take;
        left -= take;
        segments.push(Segment {
            packet: p.id,
            bytes: take,
        });
        if p.remaining == 0 {
            completed.push(p.id);
            ue.queue.pop_front();
        }
    }
    ue.backlog -= served;
    Service {
        served,
        padding: tbs.max(0) - served,
        segments,
        completed,
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Lifetime {
    arrived: Bytes,
    delivered: Bytes,
    dropped: Bytes,
}

#[derive(Debug, Clone)]
struct PacketTrack {
    ue: UeId,
    arrival_slot: Slot,
    outstanding: u32,
    packed: bool,
    lost: bool,
}

/// One run in progress.
pub struct Simulation {
    cfg: SimConfig,
    table: PhyTable,
    calibration: Calibration,
    variant: Option<DebitVariant>,
    ues: Vec<UeState>,
    classes: Vec<ClassId>,
    base_cqi: Vec<u8>,
    max_tbs: Vec<Bytes>,
    payload: Vec<Bytes>,
    weight: Vec<f64>,
    saturated: Vec<bool>,
    sources: Vec<OnOffSource>,
    harq_rng: Vec<ChaCha8Rng>,
    chan_rng: Vec<ChaCha8Rng>,
    chan_bad: Vec<bool>,
    ring: EligibleRing,
    gate: Option<EventGate>,
    pf: PfState,
    pending_retx: BTreeSet<RetxJob>,
    feedback_due: BTreeMap<Slot, Vec<(UeId, usize)>>,
    packets: HashMap<u64, PacketTrack>,
    next_packet: u64,
    now: Slot,
    counters: EventCounters,
    metrics: Vec<UeMetrics>,
    lifetime: Vec<Lifetime>,
    records: Vec<PacketRecord>,
    first_tx: u64,
    first_tx_nacks: u64,
    max_members: usize,
    observe: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig, calibration: Calibration) -> Result<Self, SimError> {
        cfg.validate()?;
        let table = cfg.load_phy_table()?;
        let classes = cfg.ue_classes();
        let base_cqi = cfg.ue_cqis();
        let n = cfg.num_ues;
        let mut per_class = [0usize; 3];
        for c in &classes {
            per_class[c.index()] += 1;
        }
        let saturated_set: BTreeSet<UeId> = cfg.traffic.saturated_ues.iter().copied().collect();
        let link_rate = calibration.c_res * 1000.0 / cfg.slot_ms;
        let mut ues = Vec::with_capacity(n);
        let mut max_tbs = Vec::with_capacity(n);
        let mut payload = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        let mut metrics = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        for u in 0..n {
            let class = cfg.class(classes[u]).expect("validated");
            let size = class.payload_bytes as Bytes * calibration.payload_scale as Bytes;
            let allowance = match class.allowance_bytes {
                Some(a) => a,
                None => derive_allowance(
                    class.idle_slope_share,
                    link_rate / per_class[classes[u].index()] as f64,
                    cfg.slot_ms,
                )?,
            };
            let best = table.bytes_per_rb(mcs_for_cqi(base_cqi[u]))? as Bytes * cfg.rb_budget as Bytes;
            let (lo, hi) = derive_clamps(size, allowance, best, cfg.clamp.burst_factor);
            ues.push(UeState {
                id: u,
                class: classes[u],
                credit: 0,
                allowance,
                clamp_lo: lo,
                clamp_hi: hi,
                queue: Default::default(),
                backlog: 0,
                last_update_slot: 0,
                cqi: base_cqi[u],
                harq: (0..cfg.harq.n_processes).map(HarqProcess::new).collect(),
            });
            max_tbs.push(best);
            payload.push(size);
            weight.push(class.idle_slope_share);
            metrics.push(UeMetrics {
                ue: u,
                class: Some(classes[u]),
                cqi: base_cqi[u],
                allowance,
                clamp_lo: lo,
                clamp_hi: hi,
                max_tbs: best,
                saturated: saturated_set.contains(&u),
                ..Default::default()
            });
            sources.push(OnOffSource::new(
                cfg.traffic.mean_on_slots,
                cfg.traffic.mean_off_slots,
                calibration.arrival_prob,
                size,
                stream(cfg.rng_seed, u, StreamKind::Traffic),
            ));
        }
        let gated = cfg.gated();
        Ok(Self {
            variant: DebitVariant::from_gate(cfg.gate_variant),
            gate: (cfg.gate_engine == GateEngine::EventDriven).then(|| EventGate::new(n, gated)),
            pf: PfState::new(n, cfg.pf_beta),
            harq_rng: (0..n).map(|u| stream(cfg.rng_seed, u, StreamKind::Harq)).collect(),
            chan_rng: (0..n).map(|u| stream(cfg.rng_seed, u, StreamKind::Channel)).collect(),
            chan_bad: vec![false; n],
            saturated: (0..n).map(|u| saturated_set.contains(&u)).collect(),
            observe: cfg.record_trace,
            table,
            calibration,
            ues,
            classes,
            base_cqi,
            max_tbs,
            payload,
            weight,
            sources,
            ring: EligibleRing::new(),
            pending_retx: BTreeSet::new(),
            feedback_due: BTreeMap::new(),
            packets: HashMap::new(),
            next_packet: 0,
            now: 0,
            counters: EventCounters::default(),
            metrics,
            lifetime: vec![Lifetime::default(); n],
            records: Vec::new(),
            first_tx: 0,
            first_tx_nacks: 0,
            max_members: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> Slot {
        self.now
    }

    pub fn ues(&self) -> &[UeState] {
        &self.ues
    }

    pub fn counters(&self) -> &EventCounters {
        &self.counters
    }

    /// Emit a [`SlotTrace`] from every step.
    pub fn set_observe(&mut self, on: bool) {
        self.observe = on;
    }

    fn bytes_per_rb(&self, ue: UeId) -> u32 {
        self.table
            .bytes_per_rb(mcs_for_cqi(self.ues[ue].cqi))
            .expect("cqi validated")
    }

    fn gated(&self) -> bool {
        self.variant.is_some()
    }

    /// Credit at the start of `slot` as the naive recursion would hold it.
    pub fn credit_now(&self, ue: UeId, slot: Slot) -> Bytes {
        let u = &self.ues[ue];
        match self.gate {
            Some(_) if self.gated() => credit_at(u, slot, u.is_backlogged()),
            _ => u.credit,
        }
    }

    /// Arrived = delivered + queued + in HARQ + dropped, over the whole run.
    pub fn conservation_gap(&self) -> Bytes {
        let mut gap = 0;
        for (u, ue) in self.ues.iter().enumerate() {
            let in_harq: Bytes = ue.harq.iter().filter(|p| !p.is_free()).map(|p| p.tb_bytes).sum();
            let m = &self.lifetime[u];
            gap += m.arrived - m.delivered - ue.backlog - in_harq - m.dropped;
        }
        gap
    }

    fn invariant(&self, message: impl Into<String>) -> SimError {
        SimError::Invariant {
            slot: self.now,
            message: message.into(),
        }
    }

    /// Advances one slot. Returns the slot's trace when observing.
    pub fn step(&mut self) -> Result<Option<SlotTrace>, SimError> {
        let n = self.now;
        let measured = n >= self.cfg.warmup_slots;
        let mut departures = Vec::new();

        // HARQ feedback
        if let Some(mut due) = self.feedback_due.remove(&n) {
            due.sort_unstable();
            for (u, pid) in due {
                let attempts = self.ues[u].harq[pid].attempts;
                let error = draw_block_error(
                    &mut self.harq_rng[u],
                    attempts,
                    self.cfg.harq.bler_new,
                    self.cfg.harq.bler_retx,
                );
                if attempts == 1 {
                    self.first_tx += 1;
                    self.first_tx_nacks += u64::from(error);
                }
                let outcome = on_feedback(&mut self.ues[u].harq[pid], !error, n, self.cfg.harq.max_retx)?;
                match outcome {
                    FeedbackOutcome::AwaitRetx => {
                        self.pending_retx.insert((n, u, pid));
                    }
                    FeedbackOutcome::Delivered(segs) => {
                        self.settle(u, segs, false, n, measured, &mut departures);
                        self.harq_freed(u, n);
                    }
                    FeedbackOutcome::Dropped(segs) => {
                        self.settle(u, segs, true, n, measured, &mut departures);
                        self.harq_freed(u, n);
                    }
                }
            }
        }

        // wake-ups
        if let Some(gate) = self.gate.as_mut() {
            gate.on_slot_start(n, &mut self.ues, &mut self.ring, &mut self.counters)?;
        }

        // retransmissions first
        let (retx, residual) = schedule_retx(
            &mut self.pending_retx,
            &mut self.ues,
            self.cfg.rb_budget,
            n,
            self.cfg.harq.rtt_slots,
        );
        let retx_set: BTreeSet<UeId> = retx.iter().map(|g| g.ue).collect();
        for g in &retx {
            self.feedback_due
                .entry(n + self.cfg.harq.rtt_slots)
                .or_default()
                .push((g.ue, g.harq_pid));
            if measured {
                self.metrics[g.ue].retx_grants += 1;
            }
        }

        // naive gate: full membership scan
        if self.gate.is_none() {
            let gated = self.gated();
            for ue in &self.ues {
                let member = ue.is_backlogged() && ue.has_free_harq() && (!gated || ue.credit >= 0);
                match (member, self.ring.contains(ue.id)) {
                    (true, false) => self.ring.join(ue.id, n),
                    (false, true) => self.ring.evict(ue.id),
                    _ => {}
                }
            }
            self.counters.touched += self.ues.len() as u64;
            self.counters.max_touched_per_slot = self.counters.max_touched_per_slot.max(self.ues.len() as u64);
        }
        self.max_members = self.max_members.max(self.ring.len());
        let members = if self.observe { self.ring.members() } else { Vec::new() };

        // selection
        let k_eff = self.cfg.grant_cap.min((residual / self.cfg.rbg_size) as usize);
        let selected = match self.cfg.scheduler {
            SchedulerKind::RR => rr_select(&mut self.ring, k_eff, |u| retx_set.contains(&u)),
            kind => {
                self.ring.admit_pending();
                let cands: Vec<UeId> = self.ring.iter().filter(|u| !retx_set.contains(u)).collect();
                let rate = |u: UeId| residual as f64 * self.bytes_per_rb(u) as f64;
                if kind == SchedulerKind::PF {
                    pf_select(&cands, &self.pf, rate, k_eff)
                } else {
                    wpf_select(&cands, &self.pf, rate, |u| self.weight[u], k_eff)
                }
            }
        };

        // RB allocation and service
        let caps: Vec<u32> = selected
            .iter()
            .map(|&u| rbs_needed(self.ues[u].backlog, self.bytes_per_rb(u), self.cfg.rbg_size).min(residual))
            .collect();
        let rbs = allocate_rbs(&caps, residual, self.cfg.rbg_size);
        if rbs.iter().sum::<u32>() + retx.iter().map(|g| g.rbs).sum::<u32>() > self.cfg.rb_budget {
            return Err(self.invariant("RB budget exceeded"));
        }
        let backlog: Vec<Bytes> = self.ues.iter().map(|u| u.backlog).collect();
        let mut grants = retx;
        let mut served_now = vec![0 as Bytes; self.ues.len()];
        let mut granted: Vec<(UeId, Bytes)> = Vec::with_capacity(selected.len());
        for (&u, &r) in selected.iter().zip(&rbs) {
            if r == 0 {
                continue;
            }
            let mcs = mcs_for_cqi(self.ues[u].cqi);
            let tbs = r as Bytes * self.bytes_per_rb(u) as Bytes;
            let pid = self.ues[u]
                .free_harq_pid()
                .ok_or_else(|| self.invariant(format!("ue {u} selected without a free HARQ process")))?;
            let svc = serve_queue(&mut self.ues[u], tbs);
            for seg in &svc.segments {
                if let Some(t) = self.packets.get_mut(&seg.packet) {
                    t.outstanding += 1;
                }
            }
            for id in &svc.completed {
                if let Some(t) = self.packets.get_mut(id) {
                    t.packed = true;
                }
            }
            self.ues[u].harq[pid].start(n, self.cfg.harq.rtt_slots, tbs, r, mcs, svc.segments);
            self.feedback_due
                .entry(n + self.cfg.harq.rtt_slots)
                .or_default()
                .push((u, pid));
            served_now[u] = svc.served;
            if measured {
                let m = &mut self.metrics[u];
                m.served_bytes += svc.served;
                m.tbs_bytes += tbs;
                m.new_grants += 1;
            }
            self.counters.new_grants += 1;
            if self.cfg.scheduler == SchedulerKind::RR {
                self.ring.rotate(u);
            }
            let debit = self.variant.map_or(0, |v| compute_debit(v, true, tbs, backlog[u]));
            granted.push((u, debit));
            grants.push(Grant {
                ue: u,
                slot: n,
                kind: GrantKind::New,
                rbs: r,
                mcs,
                tbs_bytes: tbs,
                served_bytes: svc.served,
                padding_bytes: svc.padding,
                harq_pid: pid,
            });
        }

        // credit update
        match self.gate.as_mut() {
            None => {
                if let Some(v) = self.variant {
                    let mut tbs_of = vec![0 as Bytes; self.ues.len()];
                    for g in grants.iter().filter(|g| g.kind == GrantKind::New) {
                        tbs_of[g.ue] = g.tbs_bytes;
                    }
                    for ue in self.ues.iter_mut() {
                        ue.credit = slot_update(
                            CreditUpdateInput {
                                credit_in: ue.credit,
                                backlog: backlog[ue.id],
                                allowance: ue.allowance,
                                granted: tbs_of[ue.id] > 0,
                                tbs: tbs_of[ue.id],
                                lo: ue.clamp_lo,
                                hi: ue.clamp_hi,
                            },
                            v,
                        );
                        ue.last_update_slot = n + 1;
                    }
                }
            }
            Some(gate) => {
                for &(u, debit) in &granted {
                    gate.post_grant_bookkeeping(
                        &mut self.ues[u],
                        backlog[u],
                        debit,
                        n,
                        &mut self.ring,
                        &mut self.counters,
                    );
                }
            }
        }

        // arrivals, appended after service
        let mut arrivals = Vec::new();
        for u in 0..self.ues.len() {
            let size = self.payload[u];
            let mut incoming = 0;
            if self.saturated[u] {
                let floor = self.max_tbs[u];
                while self.ues[u].backlog + incoming <= floor {
                    incoming += size;
                }
            } else if let Some(bytes) = self.sources[u].step(n) {
                incoming = bytes;
            }
            if incoming == 0 {
                continue;
            }
            if self.ues[u].backlog == 0 {
                self.counters.activations += 1;
                if let Some(gate) = self.gate.as_mut() {
                    gate.on_queue_activation(&mut self.ues[u], n, &mut self.ring, &mut self.counters);
                }
            }
            let mut added = 0;
            while added < incoming {
                let id = self.next_packet;
                self.next_packet += 1;
                self.ues[u].queue.push_back(Packet {
                    id,
                    size,
                    arrival_slot: n,
                    remaining: size,
                    delivered_slot: None,
                });
                self.packets.insert(
                    id,
                    PacketTrack {
                        ue: u,
                        arrival_slot: n,
                        outstanding: 0,
                        packed: false,
                        lost: false,
                    },
                );
                added += size;
            }
            self.ues[u].backlog += incoming;
            self.lifetime[u].arrived += incoming;
            if measured {
                self.metrics[u].arrived_bytes += incoming;
            }
            arrivals.push((u, incoming));
        }

        // channel state
        if let Some(m) = &self.cfg.cqi_markov {
            for u in 0..self.ues.len() {
                let draw: f64 = self.chan_rng[u].gen();
                let bad = &mut self.chan_bad[u];
                *bad = if *bad { draw >= m.p_bad_to_good } else { draw < m.p_good_to_bad };
                self.ues[u].cqi = if *bad {
                    self.base_cqi[u].saturating_sub(m.bad_cqi_drop).max(1)
                } else {
                    self.base_cqi[u]
                };
            }
        }
        if self.cfg.scheduler != SchedulerKind::RR {
            self.pf.update(&served_now);
        }

        if let Some(gate) = self.gate.as_mut() {
            let (touched, bound) = gate.end_slot(&mut self.counters);
            if touched > bound {
                return Err(self.invariant(format!("touched {touched} UEs, event bound {bound}")));
            }
        }
        self.counters.slots += 1;
        if self.counters.heap_inserts > self.counters.activations + self.counters.new_grants {
            return Err(self.invariant("heap insertions exceed A + G"));
        }

        let trace = if self.observe {
            let credits: Vec<Bytes> = (0..self.ues.len()).map(|u| self.credit_now(u, n + 1)).collect();
            for (u, &c) in credits.iter().enumerate() {
                let ue = &self.ues[u];
                if self.gated() && !(ue.clamp_lo <= c && c <= ue.clamp_hi) {
                    return Err(self.invariant(format!("credit {c} of ue {u} outside clamps")));
                }
            }
            let eligible = members.iter().copied().filter(|u| !retx_set.contains(u)).collect();
            Some(SlotTrace {
                slot: n,
                members,
                eligible,
                k_eff,
                grants,
                backlog,
                credits,
                arrivals,
                departures,
            })
        } else {
            None
        };
        self.now += 1;
        Ok(trace)
    }

    fn harq_freed(&mut self, u: UeId, n: Slot) {
        if let Some(gate) = self.gate.as_mut() {
            gate.on_harq_free(&mut self.ues[u], n, &mut self.ring, &mut self.counters);
        }
    }

    fn settle(&mut self, u: UeId, segs: Vec<Segment>, lost: bool, n: Slot, measured: bool, departures: &mut Vec<(UeId, u64)>) {
        for seg in segs {
            if lost {
                self.lifetime[u].dropped += seg.bytes;
                if measured {
                    self.metrics[u].dropped_bytes += seg.bytes;
                }
            } else {
                self.lifetime[u].delivered += seg.bytes;
                if measured {
                    self.metrics[u].delivered_bytes += seg.bytes;
                }
            }
            let Some(t) = self.packets.get_mut(&seg.packet) else { continue };
            t.outstanding -= 1;
            t.lost |= lost;
            if t.outstanding == 0 && t.packed {
                let t = self.packets.remove(&seg.packet).expect("present");
                if !t.lost {
                    departures.push((t.ue, seg.packet));
                    if t.arrival_slot >= self.cfg.warmup_slots && !self.saturated[t.ue] {
                        self.records.push(PacketRecord {
                            ue: t.ue,
                            class: self.classes[t.ue],
                            arrival_slot: t.arrival_slot,
                            latency_slots: n - t.arrival_slot,
                        });
                    }
                }
            }
        }
    }

    pub fn finish(self) -> MetricsReport {
        MetricsReport {
            num_slots: self.now,
            warmup_slots: self.cfg.warmup_slots.min(self.now),
            slot_ms: self.cfg.slot_ms,
            calibration: self.calibration,
            packets: self.records,
            ues: self.metrics,
            counters: self.counters,
            first_tx: self.first_tx,
            first_tx_nacks: self.first_tx_nacks,
            max_members: self.max_members,
        }
    }

    pub fn run_to_end(mut self) -> Result<MetricsReport, SimError> {
        while self.now < self.cfg.num_slots {
            self.step()?;
        }
        Ok(self.finish())
    }
}

/// Calibrates and runs `cfg`, collecting the trace when `record_trace` is set.
pub fn run(cfg: &SimConfig) -> Result<(MetricsReport, Vec<SlotTrace>), SimError> {
    let cal = calibrate(cfg)?;
    run_calibrated(cfg, cal)
}

pub fn run_calibrated(cfg: &SimConfig, cal: Calibration) -> Result<(MetricsReport, Vec<SlotTrace>), SimError> {
    let mut sim = Simulation::new(cfg.clone(), cal)?;
    let mut trace = Vec::new();
    while sim.now() < cfg.num_slots {
        if let Some(t) = sim.step()? {
            trace.push(t);
        }
    }
    Ok((sim.finish(), trace))
}
