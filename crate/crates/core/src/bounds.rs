//! Deterministic waiting-time bounds, trace audit, and the per-slot cost
//! model of the two gate engines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::event::EventCounters;
use crate::model::{Bytes, GrantKind, SchedulerKind, Slot, UeId};
use crate::sim::SlotTrace;

fn ceil_div(a: Bytes, b: Bytes) -> u64 {
    debug_assert!(a >= 0 && b > 0);
    (a as u64).div_ceil(b as u64)
}

/// Slots for a deficit to recover under pure accrual.
pub fn eligibility_bound(deficit: Bytes, allowance: Bytes) -> u64 {
    ceil_div(deficit.max(0), allowance)
}

/// Slots from eligibility to the first grant under RR with `k` grants per
/// slot and at most `e_max` competing members.
pub fn first_service_bound(e_max: usize, k: usize) -> u64 {
    assert!(k >= 1);
    e_max.div_ceil(k) as u64
}

/// Slots from a grant back to non-negative credit: the deficit after one
/// grant is at most `min(-lo, d_max)`.
pub fn reelig_bound(lo: Bytes, d_max: Bytes, allowance: Bytes) -> u64 {
    ceil_div((-lo).min(d_max).max(0), allowance)
}

/// Per-UE inputs the bounds are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeBoundInput {
    pub allowance: Bytes,
    pub lo: Bytes,
    pub d_max: Bytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundSet {
    pub w_elig_max: u64,
    pub w_queue_max: u64,
    pub w_svc_max: u64,
    pub w_reelig_max: u64,
    pub w_cycle_max: u64,
    pub t_rec_max: u64,
}

impl BoundSet {
    pub fn new(input: UeBoundInput, e_max: usize, k: usize) -> Self {
        let w_elig_max = eligibility_bound(-input.lo, input.allowance);
        let w_queue_max = first_service_bound(e_max, k);
        let w_reelig_max = reelig_bound(input.lo, input.d_max, input.allowance);
        Self {
            w_elig_max,
            w_queue_max,
            w_svc_max: w_elig_max + w_queue_max,
            w_reelig_max,
            w_cycle_max: w_reelig_max + w_queue_max,
            t_rec_max: w_elig_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Eligibility,
    QueueWait,
    Reeligibility,
    IneligibleGrant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: BoundKind,
    pub ue: UeId,
    /// Slot the measured interval started (or the offending grant's slot).
    pub slot: Slot,
    pub measured: u64,
    pub bound: u64,
}

/// An interval still open when the trace ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenEvent {
    pub kind: BoundKind,
    pub ue: UeId,
    pub since: Slot,
    pub elapsed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSetup {
    pub grant_cap: usize,
    pub scheduler: SchedulerKind,
    pub gated: bool,
    /// Admission value; the measured maximum ring size is used when absent.
    pub e_max: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub open_events: Vec<OpenEvent>,
    pub warnings: Vec<String>,
    /// Largest ring seen in the trace.
    pub measured_e_max: usize,
    pub e_max_used: usize,
    pub checked_eligibility: u64,
    pub checked_queue_wait: u64,
    pub checked_reeligibility: u64,
    pub checked_grants: u64,
    /// Per-UE bounds the audit compared against.
    pub bounds: Vec<BoundSet>,
    pub max_measured: MeasuredMax,
}

/// Largest observed interval per kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredMax {
    pub eligibility: u64,
    pub queue_wait: u64,
    pub reeligibility: u64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every interval in `trace` against its bound.
///
/// * eligibility: a queue activating with credit `C < 0` reaches
///   `C >= 0` within `ceil(-C/dC)` slots;
/// * queue wait: from joining the ring to the grant, counting only slots in
///   which the UE was selectable and the full grant cap was available,
///   the wait is at most `ceil(E_max/K)` (`E_max` counts the UE itself);
/// * re-eligibility: after a grant that leaves a deficit, credit is back at
///   zero within `ceil(min(-lo, D_max)/dC)` slots;
/// * every new grant goes to a member of the eligible set.
///
/// The queue-wait bound only holds for RR; other schedulers get a warning.
pub fn audit_trace(trace: &[SlotTrace], ues: &[UeBoundInput], setup: AuditSetup) -> AuditReport {
    let n_ues = ues.len();
    let measured_e_max = trace.iter().map(|t| t.members.len()).max().unwrap_or(0);
    let e_max = setup.e_max.unwrap_or(measured_e_max).max(1);
    let mut report = AuditReport {
        measured_e_max,
        e_max_used: e_max,
        bounds: ues.iter().map(|&u| BoundSet::new(u, e_max, setup.grant_cap)).collect(),
        ..Default::default()
    };
    let rr = setup.scheduler == SchedulerKind::RR;
    if !rr {
        report.warnings.push(format!(
            "{:?} scheduler: queue-wait bound does not apply; only credit bounds checked",
            setup.scheduler
        ));
    }
    if !setup.gated {
        report.warnings.push("ungated run: credit bounds do not apply".into());
    }

    // open intervals: (start slot, bound) for credit recovery; (start, count) for queue wait
    let mut elig_open: Vec<Option<(Slot, u64)>> = vec![None; n_ues];
    let mut reelig_open: Vec<Option<(Slot, u64)>> = vec![None; n_ues];
    let mut wait_open: Vec<Option<(Slot, u64)>> = vec![None; n_ues];
    let mut credit_prev: Vec<Bytes> = vec![0; n_ues];

    for t in trace {
        let n = t.slot;
        // credit at the start of this slot is the previous row's C[n+1]
        let c_now = &credit_prev;
        let mut granted = vec![false; n_ues];
        for g in t.grants.iter().filter(|g| g.kind == GrantKind::New) {
            granted[g.ue] = true;
            report.checked_grants += 1;
            let ok = t.eligible.binary_search(&g.ue).is_ok() && (!setup.gated || c_now[g.ue] >= 0);
            if !ok {
                report.violations.push(Violation {
                    kind: BoundKind::IneligibleGrant,
                    ue: g.ue,
                    slot: n,
                    measured: 0,
                    bound: 0,
                });
            }
        }

        if setup.gated {
            for u in 0..n_ues {
                let input = ues[u];
                // eligibility / re-eligibility close when credit is back at zero
                for (slot_open, kind) in [(&mut elig_open[u], BoundKind::Eligibility), (&mut reelig_open[u], BoundKind::Reeligibility)] {
                    if let Some((start, bound)) = *slot_open {
                        if c_now[u] >= 0 {
                            let measured = n - start;
                            let max = match kind {
                                BoundKind::Eligibility => &mut report.max_measured.eligibility,
                                _ => &mut report.max_measured.reeligibility,
                            };
                            *max = (*max).max(measured);
                            if measured > bound {
                                report.violations.push(Violation { kind, ue: u, slot: start, measured, bound });
                            }
                            *slot_open = None;
                        }
                    }
                }
                // deficit activation: the queue was empty at n and is not at n+1
                let arrived = t.arrivals.iter().any(|&(v, _)| v == u);
                let next_credit = t.credits[u];
                if arrived && t.backlog[u] == 0 && next_credit < 0 && elig_open[u].is_none() && !granted[u] {
                    elig_open[u] = Some((n + 1, eligibility_bound(-next_credit, input.allowance)));
                    report.checked_eligibility += 1;
                }
                if granted[u] && next_credit < 0 {
                    reelig_open[u] = Some((n + 1, reelig_bound(input.lo, input.d_max, input.allowance)));
                    report.checked_reeligibility += 1;
                }
            }
        }

        if rr {
            let full = t.k_eff == setup.grant_cap;
            for u in 0..n_ues {
                let member = t.members.binary_search(&u).is_ok();
                let selectable = t.eligible.binary_search(&u).is_ok();
                if member && wait_open[u].is_none() {
                    wait_open[u] = Some((n, 0));
                }
                if let Some((start, count)) = wait_open[u].as_mut() {
                    if granted[u] {
                        let measured = *count + 1;
                        let bound = report.bounds[u].w_queue_max;
                        report.checked_queue_wait += 1;
                        report.max_measured.queue_wait = report.max_measured.queue_wait.max(measured);
                        if measured > bound {
                            report.violations.push(Violation {
                                kind: BoundKind::QueueWait,
                                ue: u,
                                slot: *start,
                                measured,
                                bound,
                            });
                        }
                        wait_open[u] = None;
                    } else if !member {
                        wait_open[u] = None;
                    } else if selectable && full {
                        *count += 1;
                    }
                }
            }
        }
        credit_prev.clone_from(&t.credits);
    }

    let end = trace.last().map_or(0, |t| t.slot + 1);
    for u in 0..n_ues {
        for (open, kind) in [
            (elig_open[u], BoundKind::Eligibility),
            (reelig_open[u], BoundKind::Reeligibility),
            (wait_open[u], BoundKind::QueueWait),
        ] {
            if let Some((since, _)) = open {
                report.open_events.push(OpenEvent {
                    kind,
                    ue: u,
                    since,
                    elapsed: end.saturating_sub(since),
                });
            }
        }
    }
    report
}

/// Per-slot cost curves of the two engines.
///
/// naive: `c0 + cU * U`; event-driven: `c0' + cG * G + cH * (A + G) * log2 U`,
/// with `A`, `G` the per-slot activation and grant rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c0: f64,
    pub c_u: f64,
    pub c0_event: f64,
    pub c_g: f64,
    pub c_h: f64,
    pub a_bar: f64,
    pub g_bar: f64,
}

impl CostModel {
    pub fn naive(&self, u: f64) -> f64 {
        self.c0 + self.c_u * u
    }

    pub fn event(&self, u: f64) -> f64 {
        self.c0_event + self.c_g * self.g_bar + self.c_h * (self.a_bar + self.g_bar) * u.log2()
    }

    pub fn with_rates(self, a_bar: f64, g_bar: f64) -> Self {
        Self { a_bar, g_bar, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurves {
    /// `(U, naive, event)` at the evaluated points.
    pub rows: Vec<(f64, f64, f64)>,
    /// Every crossing of the two curves inside the range, ascending.
    pub crossings: Vec<f64>,
    /// Population beyond which the event-driven engine is cheaper.
    pub u_star: Option<f64>,
}

/// Evaluates both curves on `points` log-spaced populations in
/// `[u_min, u_max]` and bisects every sign change of `naive - event`.
pub fn cost_model_eval(model: &CostModel, u_min: f64, u_max: f64, points: usize) -> CostCurves {
    assert!(u_min > 0.0 && u_max > u_min && points >= 2);
    let diff = |u: f64| model.naive(u) - model.event(u);
    let grid: Vec<f64> = (0..points)
        .map(|i| u_min * (u_max / u_min).powf(i as f64 / (points - 1) as f64))
        .collect();
    let rows = grid.iter().map(|&u| (u, model.naive(u), model.event(u))).collect();
    let mut crossings = Vec::new();
    for w in grid.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (da, db) = (diff(a), diff(b));
        if da == 0.0 {
            if crossings.last() != Some(&a) {
                crossings.push(a);
            }
            continue;
        }
        if da.signum() == db.signum() || db == 0.0 {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if diff(m).signum() == da.signum() {
                a = m;
            } else {
                b = m;
            }
        }
        crossings.push(0.5 * (a + b));
    }
    if diff(u_max) == 0.0 && crossings.last() != Some(&u_max) {
        crossings.push(u_max);
    }
    let u_star = crossings.last().copied().filter(|_| diff(u_max) >= 0.0);
    CostCurves { rows, crossings, u_star }
}

/// Ordinary least squares with an intercept. Returns `(coefficients, R²)`
/// with the intercept first.
pub fn ols(features: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = y.len();
    let p = features.first().map_or(0, Vec::len) + 1;
    if n < p || features.len() != n {
        return None;
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let yv = DVector::from_column_slice(y);
    let beta = x.clone().svd(true, true).solve(&yv, 1e-12).ok()?;
    let fitted = &x * &beta;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some((beta.iter().copied().collect(), r2))
}

/// One measured point of a population sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub num_ues: usize,
    /// Per-slot activations and new grants.
    pub a_bar: f64,
    pub g_bar: f64,
    /// Per-slot work units of each engine.
    pub naive_work: f64,
    pub event_work: f64,
}

impl CostSample {
    /// Per-slot work of one population measured with both engines: UEs
    /// touched plus heap comparisons.
    pub fn from_counters(num_ues: usize, naive: &EventCounters, event: &EventCounters) -> Self {
        let per_slot = |c: &EventCounters, x: u64| x as f64 / c.slots.max(1) as f64;
        Self {
            num_ues,
            a_bar: per_slot(event, event.activations),
            g_bar: per_slot(event, event.new_grants),
            naive_work: per_slot(naive, naive.touched + naive.heap_comparisons),
            event_work: per_slot(event, event.touched + event.heap_comparisons),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    pub model: CostModel,
    pub r2_naive: f64,
    pub r2_event: f64,
}

/// Fits the naive line against `U` and the event-driven curve against
/// `G` and `(A + G) log2 U`. When the grant rate barely varies across the
/// samples the `G` term is folded into the intercept.
pub fn fit_cost_model(samples: &[CostSample]) -> Option<CostFit> {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| vec![s.num_ues as f64]).collect();
    let yn: Vec<f64> = samples.iter().map(|s| s.naive_work).collect();
    let (bn, r2_naive) = ols(&xs, &yn)?;

    let ye: Vec<f64> = samples.iter().map(|s| s.event_work).collect();
    let log_term = |s: &CostSample| (s.a_bar + s.g_bar) * (s.num_ues as f64).log2();
    let g_mean = samples.iter().map(|s| s.g_bar).sum::<f64>() / samples.len() as f64;
    let g_spread = samples.iter().map(|s| (s.g_bar - g_mean).abs()).fold(0.0, f64::max);
    let (c0_event, c_g, c_h, r2_event) = if g_spread > 0.05 * g_mean.max(1e-12) {
        let xe: Vec<Vec<f64>> = samples.iter().map(|s| vec![s.g_bar, log_term(s)]).collect();
        let (be, r2) = ols(&xe, &ye)?;
        (be[0], be[1], be[2], r2)
    } else {
        let xe: Vec<Vec<f64>> = samples.iter().map(|s| vec![log_term(s)]).collect();
        let (be, r2) = ols(&xe, &ye)?;
        // grant term folded into the intercept, split one work unit per grant
        let c_g = 1.0;
        (be[0] - c_g * g_mean, c_g, be[1], r2)
    };
    let a_mean = samples.iter().map(|s| s.a_bar).sum::<f64>() / samples.len() as f64;
    Some(CostFit {
        model: CostModel {
            c0: bn[0],
            c_u: bn[1],
            c0_event,
            c_g,
            c_h,
            a_bar: a_mean,
            g_bar: g_mean,
        },
        r2_naive,
        r2_event,
    })
}
