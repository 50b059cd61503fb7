//! Executes one configuration with the requested engine(s) and turns the
//! result into on-disk artifacts and summary rows.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use cbsnr::event::EventCounters;
use cbsnr::output::{self, Manifest};
use cbsnr::sim::{calibrate, quantile, Calibration, MetricsReport, SimError, Simulation, SlotTrace};
use cbsnr::{ClassId, GateEngine, SimConfig};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

/// Trace files are written by default only for runs up to this length.
pub const AUTO_TRACE_SLOTS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    Naive,
    Event,
    /// Both engines in lockstep; any trace difference fails the run.
    Both,
}

impl EngineMode {
    pub fn of(cfg: &SimConfig) -> Self {
        match cfg.gate_engine {
            GateEngine::Naive => EngineMode::Naive,
            GateEngine::EventDriven => EngineMode::Event,
        }
    }

    pub fn apply(self, cfg: &mut SimConfig) {
        cfg.gate_engine = match self {
            EngineMode::Naive => GateEngine::Naive,
            EngineMode::Event | EngineMode::Both => GateEngine::EventDriven,
        };
    }
}

/// Failure of one run, split by who has to act on it.
#[derive(Debug, thiserror::Error)]
pub enum RunFailure {
    /// Bad configuration or missing input file.
    #[error("{0:#}")]
    Input(anyhow::Error),
    /// Invariant breach, engine mismatch, or I/O failure while writing.
    #[error("{0:#}")]
    Run(anyhow::Error),
}

impl RunFailure {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunFailure::Input(_) => 2,
            RunFailure::Run(_) => 1,
        }
    }
}

impl From<SimError> for RunFailure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => RunFailure::Input(e.into()),
            other => RunFailure::Run(other.into()),
        }
    }
}

pub struct Outcome {
    pub report: MetricsReport,
    pub trace: Option<Vec<SlotTrace>>,
    /// Counters of the naive engine when it ran alongside the event engine.
    pub naive_counters: Option<EventCounters>,
}

pub fn execute(cfg: &SimConfig, mode: EngineMode, cal: Option<Calibration>, want_trace: bool) -> Result<Outcome, RunFailure> {
    let cal = match cal {
        Some(c) => c,
        None => calibrate(cfg)?,
    };
    let mut primary = cfg.clone();
    mode.apply(&mut primary);
    if mode != EngineMode::Both {
        let mut sim = Simulation::new(primary, cal)?;
        sim.set_observe(want_trace);
        let mut trace = Vec::new();
        while sim.now() < cfg.num_slots {
            if let Some(t) = sim.step()? {
                trace.push(t);
            }
        }
        return Ok(Outcome {
            report: sim.finish(),
            trace: want_trace.then_some(trace),
            naive_counters: None,
        });
    }
    let mut naive_cfg = cfg.clone();
    EngineMode::Naive.apply(&mut naive_cfg);
    let mut a = Simulation::new(naive_cfg, cal)?;
    let mut b = Simulation::new(primary, cal)?;
    a.set_observe(true);
    b.set_observe(true);
    let mut trace = Vec::new();
    while b.now() < cfg.num_slots {
        let x = a.step()?.expect("observed");
        let y = b.step()?.expect("observed");
        if x != y {
            return Err(RunFailure::Run(anyhow!(
                "engines diverge at slot {}:\n  naive: {x:?}\n  event: {y:?}",
                x.slot
            )));
        }
        if want_trace {
            trace.push(y);
        }
    }
    let naive = a.finish();
    Ok(Outcome {
        report: b.finish(),
        trace: want_trace.then_some(trace),
        naive_counters: Some(naive.counters),
    })
}

pub fn wants_trace(cfg: &SimConfig, forced: bool) -> bool {
    forced || cfg.record_trace || cfg.num_slots <= AUTO_TRACE_SLOTS
}

/// Directory name of a point: config hash prefix, plus `-x` when the
/// engines were cross-checked.
pub fn point_name(cfg: &SimConfig, mode: EngineMode) -> String {
    let mut c = cfg.clone();
    mode.apply(&mut c);
    let id = output::point_id(&c);
    if mode == EngineMode::Both {
        format!("{id}-x")
    } else {
        id
    }
}

pub fn write_point(dir: &Path, scenario: &str, cfg: &SimConfig, mode: EngineMode, out: &Outcome) -> Result<Manifest> {
    let mut c = cfg.clone();
    mode.apply(&mut c);
    let manifest = output::write_run_dir(dir, scenario, &c, &out.report, out.trace.as_deref())?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub point: String,
    pub scenario: String,
    pub num_ues: usize,
    pub target_rho: Option<f64>,
    pub gate: String,
    pub scheduler: String,
    pub engine: EngineMode,
    pub seed: u64,
    /// `p1`, `p2`, `p3`, or `all`.
    pub class: String,
    pub packets: usize,
    pub latency_mean_ms: Option<f64>,
    pub latency_p50_ms: Option<f64>,
    pub latency_p90_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
    pub latency_max_ms: Option<f64>,
    pub served_bytes: i64,
    pub tbs_bytes: i64,
    pub eta: f64,
    pub measured_rho: f64,
    pub a_bar: f64,
    pub g_bar: f64,
    pub work_per_slot: f64,
    pub naive_work_per_slot: Option<f64>,
    pub heap_ops_per_slot: f64,
}

fn per_slot(c: &EventCounters, x: u64) -> f64 {
    x as f64 / c.slots.max(1) as f64
}

fn latency_stats(sorted: &[f64]) -> [Option<f64>; 5] {
    let mean = (!sorted.is_empty()).then(|| sorted.iter().sum::<f64>() / sorted.len() as f64);
    [
        mean,
        quantile(sorted, 0.5),
        quantile(sorted, 0.9),
        quantile(sorted, 0.99),
        sorted.last().copied(),
    ]
}

pub fn summary_rows(point: &str, scenario: &str, cfg: &SimConfig, mode: EngineMode, out: &Outcome) -> Vec<SummaryRow> {
    let r = &out.report;
    let c = &r.counters;
    let mut groups: Vec<(String, Vec<f64>, i64, i64)> = ClassId::ALL
        .iter()
        .map(|&class| {
            let (s, t) = r
                .ues
                .iter()
                .filter(|u| u.class == Some(class))
                .fold((0, 0), |(s, t), u| (s + u.served_bytes, t + u.tbs_bytes));
            (class.to_string(), r.latencies_ms(class), s, t)
        })
        .collect();
    let mut all: Vec<f64> = r.packets.iter().map(|p| p.latency_slots as f64 * r.slot_ms).collect();
    all.sort_by(f64::total_cmp);
    let (s, t) = r.ues.iter().fold((0, 0), |(s, t), u| (s + u.served_bytes, t + u.tbs_bytes));
    groups.push(("all".into(), all, s, t));
    groups
        .into_iter()
        .map(|(class, lat, served, tbs)| {
            let [mean, p50, p90, p99, max] = latency_stats(&lat);
            SummaryRow {
                point: point.to_string(),
                scenario: scenario.to_string(),
                num_ues: cfg.num_ues,
                target_rho: cfg.traffic.target_rho,
                gate: format!("{:?}", cfg.gate_variant),
                scheduler: format!("{:?}", cfg.scheduler),
                engine: mode,
                seed: cfg.rng_seed,
                class,
                packets: lat.len(),
                latency_mean_ms: mean,
                latency_p50_ms: p50,
                latency_p90_ms: p90,
                latency_p99_ms: p99,
                latency_max_ms: max,
                served_bytes: served,
                tbs_bytes: tbs,
                eta: if tbs == 0 { 1.0 } else { served as f64 / tbs as f64 },
                measured_rho: r.measured_rho(),
                a_bar: per_slot(c, c.activations),
                g_bar: per_slot(c, c.new_grants),
                work_per_slot: per_slot(c, c.touched + c.heap_comparisons),
                naive_work_per_slot: out
                    .naive_counters
                    .map(|n| per_slot(&n, n.touched + n.heap_comparisons)),
                heap_ops_per_slot: per_slot(c, c.heap_ops()),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 24] = [
    "point",
    "scenario",
    "num_ues",
    "target_rho",
    "gate",
    "scheduler",
    "engine",
    "seed",
    "class",
    "packets",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p90_ms",
    "latency_p99_ms",
    "latency_max_ms",
    "served_bytes",
    "tbs_bytes",
    "eta",
    "measured_rho",
    "a_bar",
    "g_bar",
    "work_per_slot",
    "naive_work_per_slot",
    "heap_ops_per_slot",
];

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Output root: `--out`, then `CBSNR_OUT` (via clap), then `./out`.
pub fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from("out"))
}
