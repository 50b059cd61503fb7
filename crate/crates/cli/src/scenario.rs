//! Sweep scenarios: a base config plus axes whose cartesian product gives
//! the run points.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cbsnr::sim::scaled_population;
use cbsnr::{GateVariant, SchedulerKind, SimConfig};
use serde::{Deserialize, Serialize};

use crate::runner::EngineMode;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    pub rho: Vec<f64>,
    pub num_ues: Vec<usize>,
    pub gate: Vec<GateVariant>,
    pub scheduler: Vec<SchedulerKind>,
    pub seed: Vec<u64>,
    pub engine: Vec<EngineMode>,
}

/// Population sweep at fixed per-slot event rates (see `scaled_population`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaling {
    pub packets_per_slot: f64,
    pub c_res: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub base: SimConfig,
    #[serde(default)]
    pub sweep: Axes,
    #[serde(default)]
    pub scaling: Option<Scaling>,
    /// Write traces for every point regardless of length.
    #[serde(default)]
    pub trace: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn or<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct Point {
    pub config: SimConfig,
    pub engine: EngineMode,
}

/// Why a point of the product was left out.
#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub gate: GateVariant,
    pub scheduler: SchedulerKind,
    pub reason: String,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if s.name.is_empty() || s.name.contains(['/', '\\']) {
            bail!("scenario name `{}` must be a non-empty single path component", s.name);
        }
        s.base.validate().with_context(|| format!("{}: base config", path.display()))?;
        Ok(s)
    }

    /// Expands the axes. An empty axis keeps the base value, so a scenario
    /// without axes is a single run. Credit gates over PF/WPF are skipped
    /// unless the base enables the experimental hybrid.
    pub fn points(&self) -> Result<(Vec<Point>, Vec<Skipped>)> {
        let b = &self.base;
        let rhos: Vec<Option<f64>> = if self.sweep.rho.is_empty() {
            vec![b.traffic.target_rho]
        } else {
            self.sweep.rho.iter().map(|&r| Some(r)).collect()
        };
        let mut points = Vec::new();
        let mut skipped = Vec::new();
        for &u in &or(&self.sweep.num_ues, b.num_ues) {
            for &gate in &or(&self.sweep.gate, b.gate_variant) {
                for &scheduler in &or(&self.sweep.scheduler, b.scheduler) {
                    if gate != GateVariant::None && scheduler != SchedulerKind::RR && !b.allow_gated_pf {
                        if !skipped.iter().any(|s: &Skipped| s.gate == gate && s.scheduler == scheduler) {
                            skipped.push(Skipped {
                                gate,
                                scheduler,
                                reason: "credit gates run over RR only".into(),
                            });
                        }
                        continue;
                    }
                    for &rho in &rhos {
                        for &seed in &or(&self.sweep.seed, b.rng_seed) {
                            for &engine in &or(&self.sweep.engine, EngineMode::of(b)) {
                                let mut cfg = b.clone();
                                cfg.num_ues = u;
                                cfg.gate_variant = gate;
                                cfg.scheduler = scheduler;
                                cfg.traffic.target_rho = rho;
                                cfg.rng_seed = seed;
                                if let Some(s) = &self.scaling {
                                    cfg = scaled_population(&cfg, u, s.packets_per_slot, s.c_res);
                                }
                                engine.apply(&mut cfg);
                                cfg.validate()
                                    .with_context(|| format!("point U={u} {gate:?}/{scheduler:?} rho={rho:?} seed={seed}"))?;
                                points.push(Point { config: cfg, engine });
                            }
                        }
                    }
                }
            }
        }
        Ok((points, skipped))
    }
}
