//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass a substring to run a subset, `--list` to
//! list the criteria.

use std::process::ExitCode;
use std::time::Instant;

use cbsnr::bounds::{
    audit_trace, cost_model_eval, fit_cost_model, reelig_bound, AuditReport, AuditSetup, CostSample, UeBoundInput,
};
use cbsnr::credit::{slot_update, CreditUpdateInput, DebitVariant};
use cbsnr::event::{wakeup_slot, EventCounters};
use cbsnr::phy::PhyTable;
use cbsnr::sim::{calibrate, quantile, run, scaled_population, MetricsReport, Simulation, SlotTrace};
use cbsnr::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: u64 = 100_000;
/// Background load for the rate check: the lightest acceptance load, where
/// the reservations are comfortably admissible.
const RATE_RHO: f64 = 0.2;

/// Results shared across criteria: every gated RR run is audited, and
/// counter identities are checked on every run of either engine.
#[derive(Default)]
struct Collected {
    audits: Vec<(String, AuditReport)>,
    heap_identity: Vec<(String, EventCounters)>,
    naive_touched: Vec<(String, usize, EventCounters)>,
}

impl Collected {
    fn record(&mut self, label: &str, cfg: &SimConfig, report: &MetricsReport, trace: &[SlotTrace]) {
        match cfg.gate_engine {
            GateEngine::EventDriven => self.heap_identity.push((label.into(), report.counters)),
            GateEngine::Naive => self.naive_touched.push((label.into(), cfg.num_ues, report.counters)),
        }
        if cfg.gated() && cfg.scheduler == SchedulerKind::RR && !trace.is_empty() {
            self.audits.push((label.into(), audit(cfg, report, trace)));
        }
    }
}

fn audit(cfg: &SimConfig, report: &MetricsReport, trace: &[SlotTrace]) -> AuditReport {
    let ues: Vec<UeBoundInput> = report
        .ues
        .iter()
        .map(|u| UeBoundInput {
            allowance: u.allowance,
            lo: u.clamp_lo,
            d_max: u.max_tbs,
        })
        .collect();
    audit_trace(
        trace,
        &ues,
        AuditSetup {
            grant_cap: cfg.grant_cap,
            scheduler: cfg.scheduler,
            gated: cfg.gated(),
            e_max: cfg.e_max,
        },
    )
}

fn base(num_ues: usize, gate: GateVariant, rho: f64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig {
        num_ues,
        gate_variant: gate,
        num_slots: N,
        rng_seed: seed,
        record_trace: true,
        ..SimConfig::default()
    };
    cfg.traffic.target_rho = Some(rho);
    cfg
}

fn traced(cfg: &SimConfig, label: &str, col: &mut Collected) -> MetricsReport {
    let (report, trace) = run(cfg).unwrap_or_else(|e| panic!("{label}: {e}"));
    col.record(label, cfg, &report, &trace);
    report
}

type Verdict = (bool, String);

fn equivalence(col: &mut Collected) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut cases = Vec::new();
    for u in [2usize, 6, 50] {
        for g in [GateVariant::DT, GateVariant::PU] {
            for rho in [0.2, 1.0, 4.0] {
                cases.push((u, g, rho));
            }
        }
    }
    for _ in 0..2 {
        cases.push((
            *[2usize, 6, 50].choose(&mut rng).unwrap(),
            *[GateVariant::DT, GateVariant::PU].choose(&mut rng).unwrap(),
            *[0.2, 1.0, 4.0].choose(&mut rng).unwrap(),
        ));
    }
    let mut mismatches = Vec::new();
    for (u, g, rho) in cases {
        let mut cfg = base(u, g, rho, rng.gen_range(1..1_000_000));
        cfg.grant_cap = *[1usize, 2, 4].choose(&mut rng).unwrap();
        if rng.gen_bool(0.5) {
            cfg.cqi_markov = Some(CqiMarkov {
                p_good_to_bad: 0.02,
                p_bad_to_good: 0.1,
                bad_cqi_drop: 3,
            });
        }
        let label = format!("equiv U={u} {g:?} rho={rho} K={} seed={}", cfg.grant_cap, cfg.rng_seed);
        let cal = calibrate(&cfg).unwrap();
        let naive_cfg = SimConfig {
            gate_engine: GateEngine::Naive,
            ..cfg.clone()
        };
        let event_cfg = SimConfig {
            gate_engine: GateEngine::EventDriven,
            ..cfg.clone()
        };
        let mut a = Simulation::new(naive_cfg.clone(), cal).unwrap();
        let mut b = Simulation::new(event_cfg.clone(), cal).unwrap();
        a.set_observe(true);
        b.set_observe(true);
        let mut trace = Vec::with_capacity(N as usize);
        let mut first_diff = None;
        for _ in 0..N {
            let x = a.step().unwrap().expect("observed");
            let y = b.step().unwrap().expect("observed");
            if x != y && first_diff.is_none() {
                first_diff = Some(x.slot);
            }
            trace.push(y);
        }
        if let Some(s) = first_diff {
            mismatches.push(format!("{label}: first difference at slot {s}"));
        }
        let ra = a.finish();
        let rb = b.finish();
        col.record(&label, &naive_cfg, &ra, &[]);
        col.record(&label, &event_cfg, &rb, &trace);
    }
    (
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "20 configs x 1e5 slots, identical traces".into()
        } else {
            mismatches.join("; ")
        },
    )
}

fn dominance(col: &mut Collected) -> Verdict {
    let mut slots = 0u64;
    let mut deficit_slots = 0u64;
    let mut failures = Vec::new();
    for seed in 1..=10u64 {
        let rho = [0.2, 1.0, 4.0][(seed % 3) as usize];
        let cfg = base(6, GateVariant::DT, rho, seed);
        let label = format!("dominance DT rho={rho} seed={seed}");
        let (report, trace) = run(&cfg).unwrap();
        let mut dt = vec![0 as Bytes; cfg.num_ues];
        let mut pu = vec![0 as Bytes; cfg.num_ues];
        'slots: for t in &trace {
            for u in 0..cfg.num_ues {
                let m = &report.ues[u];
                let grant = t.grants.iter().find(|g| g.ue == u && g.kind == GrantKind::New);
                let input = |credit_in| CreditUpdateInput {
                    credit_in,
                    backlog: t.backlog[u],
                    allowance: m.allowance,
                    granted: grant.is_some(),
                    tbs: grant.map_or(0, |g| g.tbs_bytes),
                    lo: m.clamp_lo,
                    hi: m.clamp_hi,
                };
                dt[u] = slot_update(input(dt[u]), DebitVariant::DT);
                pu[u] = slot_update(input(pu[u]), DebitVariant::PU);
                if dt[u] != t.credits[u] {
                    failures.push(format!("{label}: DT replay diverges from recording at slot {} ue {u}", t.slot));
                    break 'slots;
                }
                if pu[u] < dt[u] {
                    failures.push(format!("{label}: PU {} < DT {} at slot {} ue {u}", pu[u], dt[u], t.slot));
                    break 'slots;
                }
                deficit_slots += (dt[u] < 0) as u64;
            }
            slots += 1;
        }
        col.record(&label, &cfg, &report, &trace);
    }
    let ok = failures.is_empty();
    (
        ok,
        if ok {
            format!("{slots} slots x 6 UEs, PU >= DT throughout ({deficit_slots} UE-slots in DT deficit)")
        } else {
            failures.join("; ")
        },
    )
}

fn rate_preservation(col: &mut Collected) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for g in [GateVariant::DT, GateVariant::PU] {
        let mut cfg = base(6, g, RATE_RHO, 7);
        cfg.num_slots = N + 2_000;
        cfg.warmup_slots = 2_000;
        let classes = cfg.ue_classes();
        let pick = |c| classes.iter().position(|&x| x == c).unwrap();
        cfg.traffic.saturated_ues = vec![pick(ClassId::P2), pick(ClassId::P3)];
        let (report, trace) = run(&cfg).unwrap();
        col.record(&format!("rate {g:?}"), &cfg, &report, &trace);
        let window = &trace[cfg.warmup_slots as usize..];
        for &u in &cfg.traffic.saturated_ues {
            let m = &report.ues[u];
            let delta = m.allowance as f64;
            let rate = m.delivered_bytes as f64 / report.measured_slots() as f64;
            let err = (rate - delta).abs() / delta;
            ok &= err <= 0.02;
            // accrual discarded when a deficit recovers past zero
            let mut prev = trace[cfg.warmup_slots as usize - 1].credits[u];
            let mut truncated = 0;
            for t in window {
                if prev < 0 {
                    truncated += (prev + m.allowance).max(0);
                }
                prev = t.credits[u];
            }
            lines.push(format!(
                "{g:?} ue{u}({}) {rate:.2}/{} B/slot ({:+.2}%, recovery truncation {:.2} B/slot)",
                classes[u],
                m.allowance,
                100.0 * (rate / delta - 1.0),
                truncated as f64 / window.len() as f64
            ));
        }
    }
    (ok, lines.join(", "))
}

/// True when some latency value has F_a(x) < F_b(x).
fn cdf_below(a: &[f64], b: &[f64]) -> bool {
    let frac = |s: &[f64], x: f64| s.partition_point(|&v| v <= x) as f64 / s.len() as f64;
    b.iter().any(|&x| frac(a, x) < frac(b, x))
}

fn class_ordering(col: &mut Collected) -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    let classes = [ClassId::P1, ClassId::P2, ClassId::P3];
    for g in [GateVariant::DT, GateVariant::PU] {
        let mut held = 0;
        for seed in 1..=10u64 {
            let cfg = base(6, g, 4.0, seed);
            let report = traced(&cfg, &format!("ordering {g:?} seed={seed}"), col);
            let lat: Vec<Vec<f64>> = classes.iter().map(|&c| report.latencies_ms(c)).collect();
            let med: Vec<f64> = lat.iter().map(|l| quantile(l, 0.5).unwrap_or(f64::NAN)).collect();
            let p99: Vec<f64> = lat.iter().map(|l| quantile(l, 0.99).unwrap_or(f64::NAN)).collect();
            let good = med[0] < med[1] && med[1] < med[2] && p99[0] < p99[1] && p99[1] < p99[2];
            held += good as u32;
            if !good {
                notes.push(format!("{g:?} seed {seed}: median {med:?} p99 {p99:?}"));
            }
        }
        ok &= held == 10;
        notes.push(format!("{g:?} ordered in {held}/10 seeds"));
    }
    let mut inverted = 0;
    for seed in 1..=10u64 {
        let mut cfg = base(6, GateVariant::None, 4.0, seed);
        cfg.scheduler = SchedulerKind::PF;
        cfg.record_trace = false;
        let report = traced(&cfg, "ordering PF", col);
        inverted += cdf_below(&report.latencies_ms(ClassId::P1), &report.latencies_ms(ClassId::P2)) as u32;
    }
    ok &= inverted == 10;
    notes.push(format!("PF p1-below-p2 CDF crossing in {inverted}/10 seeds"));
    (ok, notes.join("; "))
}

fn utilization(col: &mut Collected) -> Verdict {
    let classes = [ClassId::P1, ClassId::P2, ClassId::P3];
    let gates = [GateVariant::PU, GateVariant::DT, GateVariant::None];
    // eta[gate][class], plus overall in slot 3
    let mut eta = [[0.0f64; 4]; 3];
    for (gi, &g) in gates.iter().enumerate() {
        for seed in 1..=10u64 {
            let mut cfg = base(6, g, 0.2, seed);
            cfg.record_trace = g != GateVariant::None;
            let report = traced(&cfg, &format!("utilization {g:?} seed={seed}"), col);
            for (ci, &c) in classes.iter().enumerate() {
                eta[gi][ci] += report.class_eta(c) / 10.0;
            }
            eta[gi][3] += report.overall_eta() / 10.0;
        }
    }
    let ordered = (0..3).all(|c| eta[0][c] >= eta[1][c] && eta[1][c] >= eta[2][c]);
    let pu_level = eta[0][3] >= 0.97;
    let rr_low = eta[2][2] <= 0.90;
    let fmt = |r: &[f64; 4]| format!("p1 {:.4} p2 {:.4} p3 {:.4} all {:.4}", r[0], r[1], r[2], r[3]);
    (
        ordered && pu_level && rr_low,
        format!(
            "PU [{}] DT [{}] RR [{}]; ordered={ordered} pu>=0.97={pu_level} rr_p3<=0.90={rr_low}",
            fmt(&eta[0]),
            fmt(&eta[1]),
            fmt(&eta[2])
        ),
    )
}

fn complexity(col: &mut Collected) -> Verdict {
    let mut samples = Vec::new();
    // Equal shares on a wide carrier keep every per-UE allowance well above
    // one byte/slot at U = 1024, so the deficit population scales with U.
    let mut proto = SimConfig {
        num_slots: 20_000,
        warmup_slots: 2_000,
        rng_seed: 11,
        rb_budget: 273,
        cqi_by_class: [15, 15, 15],
        ..SimConfig::default()
    };
    for c in &mut proto.classes {
        c.idle_slope_share = 1.0 / 3.0;
        c.payload_bytes = 4_000;
    }
    for u in [8usize, 16, 32, 64, 128, 256, 512, 1024] {
        let cfg = scaled_population(&proto, u, 1.0, 6_000.0);
        let mut counters = Vec::new();
        for engine in [GateEngine::Naive, GateEngine::EventDriven] {
            let c = SimConfig {
                gate_engine: engine,
                ..cfg.clone()
            };
            let (report, _) = run(&c).unwrap();
            col.record(&format!("scaling U={u}"), &c, &report, &[]);
            counters.push(report.counters);
        }
        samples.push(CostSample::from_counters(u, &counters[0], &counters[1]));
    }

    let heap_bad: Vec<&String> = col
        .heap_identity
        .iter()
        .filter(|(_, c)| c.heap_inserts > c.activations + c.new_grants)
        .map(|(l, _)| l)
        .collect();
    let touched_bad: Vec<&String> = col
        .naive_touched
        .iter()
        .filter(|(_, u, c)| c.touched != *u as u64 * c.slots || c.max_touched_per_slot != *u as u64)
        .map(|(l, _, _)| l)
        .collect();

    let Some(fit) = fit_cost_model(&samples) else {
        return (false, "cost model fit is singular".into());
    };
    let mut unique = 0;
    for a in [0.5, 2.0, 4.0] {
        for g in [4.0, 8.0, 16.0] {
            let curves = cost_model_eval(&fit.model.with_rates(a, g), 1.0, 1e7, 400);
            unique += (curves.crossings.len() == 1 && curves.u_star.is_some()) as u32;
        }
    }
    let ok = heap_bad.is_empty() && touched_bad.is_empty() && fit.r2_event >= 0.95 && fit.model.c_h > 0.0 && unique == 9;
    let works: Vec<String> = samples
        .iter()
        .map(|s| format!("{}:{:.1}", s.num_ues, s.event_work))
        .collect();
    (
        ok,
        format!(
            "heap inserts <= A+G on {} runs ({} bad); naive touched = U on {} runs ({} bad); \
             event work/slot [{}] R2={:.4} c_h={:.3}; unique U* {unique}/9",
            col.heap_identity.len(),
            heap_bad.len(),
            col.naive_touched.len(),
            touched_bad.len(),
            works.join(" "),
            fit.r2_event,
            fit.model.c_h,
        ),
    )
}

/// Replays a lossless run through a small model with no HARQ: every
/// backlogged UE with non-negative credit is served its whole backlog
/// (rounded up to RBGs) and its packets are delivered one round trip later.
fn harq_free_oracle(cfg: &SimConfig, report: &MetricsReport, trace: &[SlotTrace]) -> Result<(), String> {
    let table = PhyTable::default();
    let cqis = cfg.ue_cqis();
    let u_n = cfg.num_ues;
    let rtt = cfg.harq.rtt_slots;
    let mut credit = vec![0 as Bytes; u_n];
    let mut queue: Vec<std::collections::VecDeque<(u64, Bytes)>> = vec![Default::default(); u_n];
    let mut next_id = 0u64;
    let mut deliveries: std::collections::BTreeMap<u64, Vec<(UeId, u64)>> = Default::default();
    for t in trace {
        let n = t.slot;
        let backlog: Vec<Bytes> = queue.iter().map(|q| q.iter().map(|p| p.1).sum()).collect();
        if backlog != t.backlog {
            return Err(format!("slot {n}: backlog {backlog:?} vs {:?}", t.backlog));
        }
        let mut want_dep = deliveries.remove(&n).unwrap_or_default();
        let mut got_dep = t.departures.clone();
        want_dep.sort();
        got_dep.sort();
        if want_dep != got_dep {
            return Err(format!("slot {n}: departures {want_dep:?} vs {got_dep:?}"));
        }
        let members: Vec<UeId> = (0..u_n).filter(|&u| backlog[u] > 0 && credit[u] >= 0).collect();
        let mut got_members = t.members.clone();
        got_members.sort();
        if members != got_members {
            return Err(format!("slot {n}: members {members:?} vs {got_members:?}"));
        }
        let mut grants = Vec::new();
        let mut rbs_total = 0;
        for &u in &members {
            let bpr = table.values()[cqis[u] as usize - 1] as Bytes;
            let rbg = cfg.rbg_size as Bytes;
            let rbs = ((backlog[u] + bpr - 1) / bpr + rbg - 1) / rbg * rbg;
            let tbs = rbs * bpr;
            rbs_total += rbs;
            grants.push((u, rbs as u32, tbs, backlog[u].min(tbs)));
        }
        if rbs_total > cfg.rb_budget as Bytes {
            return Err(format!("slot {n}: scenario leaves the oracle's regime ({rbs_total} RBs)"));
        }
        let mut got: Vec<(UeId, u32, Bytes, Bytes)> = t
            .grants
            .iter()
            .map(|g| {
                if g.kind == GrantKind::Retx {
                    return (usize::MAX, 0, 0, 0);
                }
                (g.ue, g.rbs, g.tbs_bytes, g.served_bytes)
            })
            .collect();
        got.sort();
        if grants != got {
            return Err(format!("slot {n}: grants {grants:?} vs {got:?}"));
        }
        for &(u, _, _, _) in &grants {
            let done: Vec<(UeId, u64)> = queue[u].drain(..).map(|(id, _)| (u, id)).collect();
            deliveries.entry(n + rtt).or_default().extend(done);
        }
        for u in 0..u_n {
            let m = &report.ues[u];
            let mut c = credit[u];
            c = if c < 0 {
                (c + m.allowance).min(0)
            } else if backlog[u] == 0 {
                0
            } else {
                c + m.allowance
            };
            if grants.iter().any(|g| g.0 == u) {
                c -= backlog[u];
            }
            credit[u] = c.clamp(m.clamp_lo, m.clamp_hi);
        }
        if credit != t.credits {
            return Err(format!("slot {n}: credits {credit:?} vs {:?}", t.credits));
        }
        for &(u, bytes) in &t.arrivals {
            queue[u].push_back((next_id, bytes));
            next_id += 1;
        }
    }
    Ok(())
}

fn phy_harq(col: &mut Collected) -> Verdict {
    let mut cfg = SimConfig {
        num_ues: 3,
        grant_cap: 3,
        rb_budget: 1_000,
        gate_variant: GateVariant::PU,
        num_slots: 30_000,
        warmup_slots: 0,
        rng_seed: 5,
        record_trace: true,
        ..SimConfig::default()
    };
    cfg.harq.bler_new = 0.0;
    cfg.harq.bler_retx = 0.0;
    cfg.traffic.arrival_prob = 0.1;
    cfg.calibration.c_res_override = Some(300.0);
    let (report, trace) = run(&cfg).unwrap();
    col.record("phy lossless", &cfg, &report, &trace);
    let oracle = harq_free_oracle(&cfg, &report, &trace);
    let grants: usize = trace.iter().map(|t| t.grants.len()).sum();

    let mut lossy = SimConfig {
        gate_variant: GateVariant::None,
        num_slots: 60_000,
        rng_seed: 9,
        ..SimConfig::default()
    };
    lossy.traffic.saturated_ues = (0..lossy.num_ues).collect();
    let report = run(&lossy).unwrap().0;
    let n = report.first_tx as f64;
    let p = report.first_tx_nacks as f64 / n;
    let sigma = (0.1f64 * 0.9 / n).sqrt();
    let within = (p - 0.1).abs() <= 3.0 * sigma;
    let ok = oracle.is_ok() && within && report.first_tx >= 100_000;
    (
        ok,
        format!(
            "lossless vs HARQ-free oracle: {} ({grants} grants); NACK {p:.5} over {} TBs (3 sigma = {:.5})",
            match &oracle {
                Ok(()) => "identical".to_string(),
                Err(e) => e.clone(),
            },
            report.first_tx,
            3.0 * sigma
        ),
    )
}

fn waiting_time_bounds(col: &mut Collected) -> Verdict {
    if col.audits.is_empty() {
        // run on its own: audit a small set of gated runs
        for (u, g, rho) in [(6, GateVariant::DT, 1.0), (6, GateVariant::PU, 4.0), (50, GateVariant::PU, 1.0)] {
            traced(&base(u, g, rho, 3), &format!("bounds U={u} {g:?} rho={rho}"), col);
        }
    }
    let mut ok = true;
    let mut violations = 0;
    let mut failed = Vec::new();
    let (mut checked, mut open) = (0u64, 0usize);
    let mut max_wait = (0u64, 0u64);
    for (label, a) in &col.audits {
        violations += a.violations.len();
        open += a.open_events.len();
        checked += a.checked_eligibility + a.checked_queue_wait + a.checked_reeligibility + a.checked_grants;
        max_wait = max_wait.max((a.max_measured.queue_wait, a.e_max_used as u64));
        if !a.passed() {
            failed.push(label.clone());
        }
    }
    ok &= failed.is_empty() && !col.audits.is_empty();

    let mut recovery = Vec::new();
    for (lo, delta) in [(-500i64, 20i64), (-500, 30), (-7, 2), (-240, 7), (-1, 1), (-1000, 1000), (-999, 1000)] {
        let expected = ((-lo) as f64 / delta as f64).ceil() as u64;
        let mut c = lo;
        let mut n = 0u64;
        let mut before = None;
        while c < 0 {
            before = Some(c);
            c = slot_update(
                CreditUpdateInput {
                    credit_in: c,
                    backlog: 1_000,
                    allowance: delta,
                    granted: false,
                    tbs: 0,
                    lo,
                    hi: 10_000,
                },
                DebitVariant::PU,
            );
            n += 1;
        }
        let not_early = (-lo) % delta == 0 || before.is_some_and(|b| b < 0);
        let event = wakeup_slot(0, lo, delta);
        let bound = reelig_bound(lo, i64::MAX, delta);
        let good = n == expected && event == expected && bound == expected && not_early;
        ok &= good;
        recovery.push(format!("({lo},{delta})->{n}{}", if good { "" } else { "!" }));
    }
    (
        ok,
        format!(
            "{} audited runs, {checked} checks, {violations} violations{}, {open} open at horizon; \
             max queue wait {} (E_max {}); recovery {}",
            col.audits.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" in [{}]", failed.join(", "))
            },
            max_wait.0,
            max_wait.1,
            recovery.join(" ")
        ),
    )
}

type Criterion = (&'static str, fn(&mut Collected) -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("engine_equivalence", equivalence),
        ("credit_dominance", dominance),
        ("rate_preservation", rate_preservation),
        ("class_ordering_overload", class_ordering),
        ("utilization_low_load", utilization),
        ("complexity_counters", complexity),
        ("phy_harq_sanity", phy_harq),
        // last: audits every gated RR run recorded above
        ("waiting_time_bounds", waiting_time_bounds),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let filter = args.iter().find(|a| !a.starts_with('-'));
    let mut col = Collected::default();
    let mut failures = 0;
    for (name, check) in criteria {
        if filter.is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check(&mut col);
        failures += !pass as u32;
        println!(
            "{} {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
