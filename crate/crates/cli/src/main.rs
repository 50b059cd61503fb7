//! `cbsnr`: run, sweep, audit and cost-fit scenarios of the downlink
//! credit-gate simulator.
//!
//! Exit codes: 0 success, 1 run failure (invariant breach, engine mismatch,
//! audit violation), 2 bad input (config, schema, missing file).

mod overrides;
mod runner;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cbsnr::bounds::{audit_trace, cost_model_eval, fit_cost_model, AuditReport, AuditSetup, BoundSet, CostFit, CostSample};
use cbsnr::output::{self, read_trace_gz, Manifest, MANIFEST_JSON};
use cbsnr::{ClassId, SimConfig};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use runner::{EngineMode, RunFailure};
use scenario::Scenario;

#[derive(Parser)]
#[command(name = "cbsnr", version, about = "Slot-level NR downlink simulator with credit-based shaping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one configuration (or re-run a manifest).
    Run {
        /// SimConfig JSON, or a manifest.json from an earlier run.
        config: PathBuf,
        /// Override a config key (dotted path or alias: rho, gate, engine,
        /// scheduler, seed, slots, ues, k, bler, warmup).
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = overrides::parse_assignment)]
        sets: Vec<(String, String)>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        engine: Option<EngineMode>,
        /// Write the slot trace even for long runs.
        #[arg(long)]
        trace: bool,
        #[arg(long, env = "CBSNR_OUT")]
        out: Option<PathBuf>,
        /// Output group name (defaults to the config file stem).
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Run every point of a scenario grid and write a summary CSV.
    Sweep {
        scenario: PathBuf,
        #[arg(long, env = "CBSNR_OUT")]
        out: Option<PathBuf>,
        /// Worker threads (defaults to the number of CPUs).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        trace: bool,
    },
    /// Check a traced run against the waiting-time bounds.
    Audit {
        run_dir: PathBuf,
        /// Admission value for the eligible burst; measured when absent.
        #[arg(long)]
        e_max: Option<usize>,
    },
    /// Fit the per-slot cost model to a sweep with cross-checked engines.
    Cost {
        sweep_dir: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        u_min: f64,
        #[arg(long, default_value_t = 1e6)]
        u_max: f64,
        #[arg(long, default_value_t = 400)]
        points: usize,
        /// Activation rates of the model envelope.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 2.0, 4.0])]
        a: Vec<f64>,
        /// Grant rates of the model envelope.
        #[arg(long, value_delimiter = ',', default_values_t = [4.0, 8.0, 16.0])]
        g: Vec<f64>,
    },
}

fn input(e: impl Into<anyhow::Error>) -> RunFailure {
    RunFailure::Input(e.into())
}

fn failure(e: impl Into<anyhow::Error>) -> RunFailure {
    RunFailure::Run(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            sets,
            seed,
            engine,
            trace,
            out,
            scenario,
        } => cmd_run(&config, &sets, seed, engine, trace, out, scenario),
        Command::Sweep {
            scenario,
            out,
            jobs,
            trace,
        } => cmd_sweep(&scenario, out, jobs, trace),
        Command::Audit { run_dir, e_max } => cmd_audit(&run_dir, e_max),
        Command::Cost {
            sweep_dir,
            u_min,
            u_max,
            points,
            a,
            g,
        } => cmd_cost(&sweep_dir, u_min, u_max, points, &a, &g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_run(
    path: &Path,
    sets: &[(String, String)],
    seed: Option<u64>,
    engine: Option<EngineMode>,
    force_trace: bool,
    out: Option<PathBuf>,
    scenario: Option<String>,
) -> Result<(), RunFailure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(input)?;
    let (cfg, mut cal, default_name) = if value.get("config_hash").is_some() {
        let m = Manifest::read(path).map_err(input)?;
        m.config.validate().map_err(input)?;
        (m.config, Some(m.calibration), m.scenario)
    } else {
        let cfg = SimConfig::from_json_str(&text)
            .with_context(|| format!("{}", path.display()))
            .map_err(input)?;
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        (cfg, None, stem)
    };
    let mut cfg = overrides::apply(&cfg, sets).map_err(input)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    if !sets.is_empty() || seed.is_some() {
        // a stored calibration belongs to the unmodified config
        cal = None;
    }
    let mode = engine.unwrap_or_else(|| EngineMode::of(&cfg));
    let name = scenario.unwrap_or(default_name);
    let want_trace = runner::wants_trace(&cfg, force_trace);
    let outcome = runner::execute(&cfg, mode, cal, want_trace)?;
    let dir = runner::out_root(out).join(&name).join(runner::point_name(&cfg, mode));
    runner::write_point(&dir, &name, &cfg, mode, &outcome).map_err(failure)?;

    let rows = runner::summary_rows("", &name, &cfg, mode, &outcome);
    println!("{}", dir.display());
    for r in &rows {
        println!(
            "  {:<3} packets {:>7}  p50 {:>9} ms  p99 {:>9} ms  eta {:.4}",
            r.class,
            r.packets,
            fmt_opt(r.latency_p50_ms),
            fmt_opt(r.latency_p99_ms),
            r.eta
        );
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.1}"))
}

#[derive(Serialize)]
struct PointStatus {
    point: String,
    status: &'static str,
    exit_code: u8,
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepRecord {
    scenario: String,
    points: Vec<PointStatus>,
    skipped: Vec<scenario::Skipped>,
}

fn cmd_sweep(path: &Path, out: Option<PathBuf>, jobs: Option<usize>, force_trace: bool) -> Result<(), RunFailure> {
    let sc = Scenario::from_path(path).map_err(input)?;
    let (points, skipped) = sc.points().map_err(input)?;
    let root = runner::out_root(out.or_else(|| sc.out.clone())).join(&sc.name);
    std::fs::create_dir_all(&root)
        .with_context(|| format!("creating {}", root.display()))
        .map_err(failure)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(failure)?;
    let results: Vec<(String, Result<Vec<runner::SummaryRow>, RunFailure>)> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let name = runner::point_name(&p.config, p.engine);
                let res = (|| {
                    let want = runner::wants_trace(&p.config, force_trace || sc.trace);
                    let o = runner::execute(&p.config, p.engine, None, want)?;
                    runner::write_point(&root.join(&name), &sc.name, &p.config, p.engine, &o).map_err(failure)?;
                    Ok(runner::summary_rows(&name, &sc.name, &p.config, p.engine, &o))
                })();
                (name, res)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut statuses = Vec::new();
    let mut worst = 0u8;
    for (point, res) in results {
        match res {
            Ok(r) => {
                rows.extend(r);
                statuses.push(PointStatus {
                    point,
                    status: "ok",
                    exit_code: 0,
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("point {point}: {e}");
                worst = worst.max(e.exit_code());
                statuses.push(PointStatus {
                    point,
                    status: "failed",
                    exit_code: e.exit_code(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    runner::write_summary(&root.join("summary.csv"), &rows).map_err(failure)?;
    output::write_json(
        &root.join("sweep.json"),
        &SweepRecord {
            scenario: sc.name.clone(),
            points: statuses,
            skipped,
        },
    )
    .map_err(failure)?;
    let failed = rows.is_empty() && !points.is_empty() || worst != 0;
    println!("{}: {} points, summary in {}", sc.name, points.len(), root.join("summary.csv").display());
    if failed {
        let code = worst.max(1);
        let msg = anyhow!("one or more sweep points failed (see sweep.json)");
        return Err(if code == 2 { RunFailure::Input(msg) } else { RunFailure::Run(msg) });
    }
    Ok(())
}

#[derive(Serialize)]
struct UeBounds {
    ue: usize,
    class: ClassId,
    #[serde(flatten)]
    bounds: BoundSet,
}

#[derive(Serialize)]
struct ClassBounds {
    class: ClassId,
    w_svc_max_slots: u64,
    w_cycle_max_slots: u64,
    w_cycle_max_ms: f64,
}

#[derive(Serialize)]
struct AuditFile {
    config_hash: String,
    passed: bool,
    slot_ms: f64,
    ue_bounds: Vec<UeBounds>,
    class_bounds: Vec<ClassBounds>,
    report: AuditReport,
}

fn cmd_audit(dir: &Path, e_max: Option<usize>) -> Result<(), RunFailure> {
    let mpath = dir.join(MANIFEST_JSON);
    if !mpath.exists() {
        return Err(input(anyhow!("{} not found", mpath.display())));
    }
    let m = Manifest::read(&mpath).map_err(input)?;
    let tname = m
        .trace_file
        .clone()
        .ok_or_else(|| input(anyhow!("run in {} has no trace; re-run with --trace", dir.display())))?;
    let tpath = dir.join(tname);
    if !tpath.exists() {
        return Err(input(anyhow!("trace {} not found", tpath.display())));
    }
    let trace = read_trace_gz(&tpath).map_err(input)?;
    let cfg = &m.config;
    let report = audit_trace(
        &trace,
        &m.ues,
        AuditSetup {
            grant_cap: cfg.grant_cap,
            scheduler: cfg.scheduler,
            gated: cfg.gated(),
            e_max: e_max.or(cfg.e_max),
        },
    );
    let classes = cfg.ue_classes();
    let ue_bounds: Vec<UeBounds> = report
        .bounds
        .iter()
        .enumerate()
        .map(|(ue, b)| UeBounds {
            ue,
            class: classes[ue],
            bounds: *b,
        })
        .collect();
    let class_bounds = ClassId::ALL
        .iter()
        .filter_map(|&c| {
            let of_class = || ue_bounds.iter().filter(move |u| u.class == c);
            let cycle = of_class().map(|u| u.bounds.w_cycle_max).max()?;
            Some(ClassBounds {
                class: c,
                w_svc_max_slots: of_class().map(|u| u.bounds.w_svc_max).max()?,
                w_cycle_max_slots: cycle,
                w_cycle_max_ms: cycle as f64 * cfg.slot_ms,
            })
        })
        .collect();
    let passed = report.passed();
    let file = AuditFile {
        config_hash: m.config_hash.clone(),
        passed,
        slot_ms: cfg.slot_ms,
        ue_bounds,
        class_bounds,
        report,
    };
    output::write_json(&dir.join("audit.json"), &file).map_err(failure)?;
    for w in &file.report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{}: {} violations, {} open events, E_max {} (measured {})",
        dir.display(),
        file.report.violations.len(),
        file.report.open_events.len(),
        file.report.e_max_used,
        file.report.measured_e_max
    );
    for v in file.report.violations.iter().take(10) {
        println!("  {v:?}");
    }
    if passed {
        Ok(())
    } else {
        Err(failure(anyhow!("{} bound violations", file.report.violations.len())))
    }
}

#[derive(Serialize)]
struct EnvelopePoint {
    a_bar: f64,
    g_bar: f64,
    crossings: Vec<f64>,
    u_star: Option<f64>,
}

#[derive(Serialize)]
struct CostReport {
    fit: CostFit,
    samples: Vec<CostSample>,
    envelope: Vec<EnvelopePoint>,
}

fn cmd_cost(dir: &Path, u_min: f64, u_max: f64, points: usize, a: &[f64], g: &[f64]) -> Result<(), RunFailure> {
    let path = dir.join("summary.csv");
    let rows = runner::read_summary(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)?;
    let samples: Vec<CostSample> = rows
        .iter()
        .filter(|r| r.class == "all")
        .filter_map(|r| {
            Some(CostSample {
                num_ues: r.num_ues,
                a_bar: r.a_bar,
                g_bar: r.g_bar,
                naive_work: r.naive_work_per_slot?,
                event_work: r.work_per_slot,
            })
        })
        .collect();
    let mut sizes: Vec<usize> = samples.iter().map(|s| s.num_ues).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(input(anyhow!(
            "{} has {} population sizes with both engines; need at least 3 (sweep with engine \"both\")",
            path.display(),
            sizes.len()
        )));
    }
    let fit = fit_cost_model(&samples).ok_or_else(|| failure(anyhow!("cost model fit is singular")))?;
    let mut envelope = Vec::new();
    let mut w = csv::Writer::from_path(dir.join("cost_curves.csv")).map_err(failure)?;
    w.write_record(["a_bar", "g_bar", "num_ues", "naive_cost", "event_cost"]).map_err(failure)?;
    for &ai in a {
        for &gi in g {
            let curves = cost_model_eval(&fit.model.with_rates(ai, gi), u_min, u_max, points);
            for (u, n, e) in &curves.rows {
                w.write_record([ai.to_string(), gi.to_string(), u.to_string(), n.to_string(), e.to_string()])
                    .map_err(failure)?;
            }
            envelope.push(EnvelopePoint {
                a_bar: ai,
                g_bar: gi,
                crossings: curves.crossings,
                u_star: curves.u_star,
            });
        }
    }
    w.flush().map_err(failure)?;
    println!(
        "naive = {:.3} + {:.4} U (R2 {:.4}); event = {:.3} + {:.3} G + {:.4} (A+G) log2 U (R2 {:.4})",
        fit.model.c0, fit.model.c_u, fit.r2_naive, fit.model.c0_event, fit.model.c_g, fit.model.c_h, fit.r2_event
    );
    for e in &envelope {
        println!("  A={} G={}: U* = {}", e.a_bar, e.g_bar, fmt_opt(e.u_star));
    }
    output::write_json(
        &dir.join("cost_fit.json"),
        &CostReport {
            fit,
            samples,
            envelope,
        },
    )
    .map_err(failure)?;
    Ok(())
}
