//! On-disk run artifacts: per-packet and per-UE CSVs, the gzipped slot
//! trace, and the JSON manifest. Column meanings are listed in
//! `docs/data_dictionary.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::UeBoundInput;
use crate::event::EventCounters;
use crate::model::{Bytes, Grant, GrantKind, SimConfig, UeId};
use crate::sim::{Calibration, MetricsReport, SlotTrace};

pub const MANIFEST_FORMAT: u32 = 1;
pub const METRICS_CSV: &str = "metrics.csv";
pub const UTILIZATION_CSV: &str = "utilization.csv";
pub const COUNTERS_CSV: &str = "counters.csv";
pub const TRACE_CSV_GZ: &str = "trace.csv.gz";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: row {row}: {reason}")]
    Malformed { path: PathBuf, row: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Content hash of a configuration (hex SHA-256 of its canonical JSON).
pub fn config_hash(cfg: &SimConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Short directory name for a sweep point.
pub fn point_id(cfg: &SimConfig) -> String {
    config_hash(cfg)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub scenario: String,
    pub config_hash: String,
    pub config: SimConfig,
    pub calibration: Calibration,
    pub counters: EventCounters,
    pub measured_rho: f64,
    pub max_members: usize,
    /// Per-UE inputs of the waiting-time bounds.
    pub ues: Vec<UeBoundInput>,
    pub trace_file: Option<String>,
}

impl Manifest {
    pub fn new(scenario: &str, cfg: &SimConfig, report: &MetricsReport, has_trace: bool) -> Self {
        Self {
            format: MANIFEST_FORMAT,
            scenario: scenario.to_string(),
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            calibration: report.calibration,
            counters: report.counters,
            measured_rho: report.measured_rho(),
            max_members: report.max_members,
            ues: report
                .ues
                .iter()
                .map(|u| UeBoundInput {
                    allowance: u.allowance,
                    lo: u.clamp_lo,
                    d_max: u.max_tbs,
                })
                .collect(),
            trace_file: has_trace.then(|| TRACE_CSV_GZ.to_string()),
        }
    }

    pub fn read(path: &Path) -> Result<Self, OutputError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| OutputError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), OutputError> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Serialize)]
struct PacketRow {
    class: String,
    ue: UeId,
    arrival_ms: f64,
    latency_ms: f64,
}

pub const METRICS_HEADER: [&str; 4] = ["class", "ue", "arrival_ms", "latency_ms"];

pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<(), OutputError> {
    // explicit header so a run without deliveries still yields a parseable file
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(path))?;
    for p in &report.packets {
        w.serialize(PacketRow {
            class: p.class.to_string(),
            ue: p.ue,
            arrival_ms: p.arrival_slot as f64 * report.slot_ms,
            latency_ms: p.latency_slots as f64 * report.slot_ms,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub ue: UeId,
    pub class: String,
    pub cqi: u8,
    pub allowance_bytes: Bytes,
    pub clamp_lo: Bytes,
    pub clamp_hi: Bytes,
    pub saturated: bool,
    pub served_bytes: Bytes,
    pub tbs_bytes: Bytes,
    pub eta: f64,
    pub delivered_bytes: Bytes,
    pub dropped_bytes: Bytes,
    pub arrived_bytes: Bytes,
    pub new_grants: u64,
    pub retx_grants: u64,
}

pub fn write_utilization_csv(path: &Path, report: &MetricsReport) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for u in &report.ues {
        w.serialize(UtilizationRow {
            ue: u.ue,
            class: u.class.map(|c| c.to_string()).unwrap_or_default(),
            cqi: u.cqi,
            allowance_bytes: u.allowance,
            clamp_lo: u.clamp_lo,
            clamp_hi: u.clamp_hi,
            saturated: u.saturated,
            served_bytes: u.served_bytes,
            tbs_bytes: u.tbs_bytes,
            eta: u.eta(),
            delivered_bytes: u.delivered_bytes,
            dropped_bytes: u.dropped_bytes,
            arrived_bytes: u.arrived_bytes,
            new_grants: u.new_grants,
            retx_grants: u.retx_grants,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_utilization_csv(path: &Path) -> Result<Vec<UtilizationRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

pub fn write_counters_csv(path: &Path, report: &MetricsReport) -> Result<(), OutputError> {
    let c = &report.counters;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["counter", "value"]).map_err(csv_err(path))?;
    let rows: [(&str, u64); 15] = [
        ("slots", c.slots),
        ("activations", c.activations),
        ("new_grants", c.new_grants),
        ("wakeups", c.wakeups),
        ("stale_pops", c.stale_pops),
        ("heap_inserts", c.heap_inserts),
        ("heap_pops", c.heap_pops),
        ("heap_peeks", c.heap_peeks),
        ("heap_comparisons", c.heap_comparisons),
        ("harq_rejoins", c.harq_rejoins),
        ("touched", c.touched),
        ("max_touched_per_slot", c.max_touched_per_slot),
        ("max_heap_len", c.max_heap_len),
        ("first_tx", report.first_tx),
        ("first_tx_nacks", report.first_tx_nacks),
    ];
    for (k, v) in rows {
        w.write_record([k, &v.to_string()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

const TRACE_HEADER: [&str; 9] = [
    "slot", "members", "eligible", "k_eff", "grants", "backlog", "credits", "arrivals", "departures",
];

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn encode_grant(g: &Grant) -> String {
    let kind = match g.kind {
        GrantKind::New => "N",
        GrantKind::Retx => "R",
    };
    format!(
        "{}:{}:{}:{}:{}:{}:{}:{}",
        g.ue, kind, g.rbs, g.mcs, g.tbs_bytes, g.served_bytes, g.padding_bytes, g.harq_pid
    )
}

pub fn write_trace<W: Write>(out: W, trace: &[SlotTrace]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for t in trace {
        w.write_record([
            t.slot.to_string(),
            join(&t.members),
            join(&t.eligible),
            t.k_eff.to_string(),
            t.grants.iter().map(encode_grant).collect::<Vec<_>>().join(";"),
            join(&t.backlog),
            join(&t.credits),
            join(t.arrivals.iter().map(|(u, b)| format!("{u}:{b}"))),
            join(t.departures.iter().map(|(u, p)| format!("{u}:{p}"))),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_gz(path: &Path, trace: &[SlotTrace]) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let gz = GzEncoder::new(BufWriter::new(file), Compression::fast());
    write_trace(gz, trace).map_err(csv_err(path))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse::<T>().map_err(|_| format!("bad list item `{x}`")))
        .collect()
}

fn parse_pairs<A: std::str::FromStr, B: std::str::FromStr>(s: &str) -> Result<Vec<(A, B)>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| {
            let (a, b) = x.split_once(':').ok_or_else(|| format!("bad pair `{x}`"))?;
            Ok((
                a.parse().map_err(|_| format!("bad pair `{x}`"))?,
                b.parse().map_err(|_| format!("bad pair `{x}`"))?,
            ))
        })
        .collect()
}

fn parse_grant(s: &str, slot: u64) -> Result<Grant, String> {
    let f: Vec<&str> = s.split(':').collect();
    if f.len() != 8 {
        return Err(format!("bad grant `{s}`"));
    }
    let num = |i: usize| f[i].parse::<i64>().map_err(|_| format!("bad grant `{s}`"));
    Ok(Grant {
        ue: num(0)? as UeId,
        slot,
        kind: match f[1] {
            "N" => GrantKind::New,
            "R" => GrantKind::Retx,
            _ => return Err(format!("bad grant kind in `{s}`")),
        },
        rbs: num(2)? as u32,
        mcs: num(3)? as u8,
        tbs_bytes: num(4)?,
        served_bytes: num(5)?,
        padding_bytes: num(6)?,
        harq_pid: num(7)? as usize,
    })
}

pub fn read_trace<R: Read>(input: R, path: &Path) -> Result<Vec<SlotTrace>, OutputError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(OutputError::Malformed {
            path: path.to_path_buf(),
            row: 0,
            reason: "unexpected trace header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let malformed = |reason: String| OutputError::Malformed {
            path: path.to_path_buf(),
            row: i + 1,
            reason,
        };
        let slot: u64 = rec[0].parse().map_err(|_| malformed("bad slot".into()))?;
        let grants = if rec[4].is_empty() {
            Vec::new()
        } else {
            rec[4]
                .split(';')
                .map(|g| parse_grant(g, slot))
                .collect::<Result<_, _>>()
                .map_err(malformed)?
        };
        out.push(SlotTrace {
            slot,
            members: parse_list(&rec[1]).map_err(malformed)?,
            eligible: parse_list(&rec[2]).map_err(malformed)?,
            k_eff: rec[3].parse().map_err(|_| malformed("bad k_eff".into()))?,
            grants,
            backlog: parse_list(&rec[5]).map_err(malformed)?,
            credits: parse_list(&rec[6]).map_err(malformed)?,
            arrivals: parse_pairs(&rec[7]).map_err(malformed)?,
            departures: parse_pairs(&rec[8]).map_err(malformed)?,
        });
    }
    Ok(out)
}

pub fn read_trace_gz(path: &Path) -> Result<Vec<SlotTrace>, OutputError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_trace(GzDecoder::new(BufReader::new(file)), path)
}

/// Writes every artifact of one run into `dir` and returns the manifest.
pub fn write_run_dir(
    dir: &Path,
    scenario: &str,
    cfg: &SimConfig,
    report: &MetricsReport,
    trace: Option<&[SlotTrace]>,
) -> Result<Manifest, OutputError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_metrics_csv(&dir.join(METRICS_CSV), report)?;
    write_utilization_csv(&dir.join(UTILIZATION_CSV), report)?;
    write_counters_csv(&dir.join(COUNTERS_CSV), report)?;
    if let Some(t) = trace {
        write_trace_gz(&dir.join(TRACE_CSV_GZ), t)?;
    }
    let manifest = Manifest::new(scenario, cfg, report, trace.is_some());
    manifest.write(&dir.join(MANIFEST_JSON))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GrantKind;

    fn sample() -> Vec<SlotTrace> {
        vec![
            SlotTrace {
                slot: 0,
                members: vec![],
                eligible: vec![],
                k_eff: 2,
                grants: vec![],
                backlog: vec![0, 0],
                credits: vec![0, 0],
                arrivals: vec![(1, 80)],
                departures: vec![],
            },
            SlotTrace {
                slot: 1,
                members: vec![1],
                eligible: vec![1],
                k_eff: 2,
                grants: vec![Grant {
                    ue: 1,
                    slot: 1,
                    kind: GrantKind::New,
                    rbs: 20,
                    mcs: 2,
                    tbs_bytes: 80,
                    served_bytes: 80,
                    padding_bytes: 0,
                    harq_pid: 0,
                }],
                backlog: vec![0, 80],
                credits: vec![0, -12],
                arrivals: vec![],
                departures: vec![(0, 7)],
            },
        ]
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv.gz");
        write_trace_gz(&path, &sample()).unwrap();
        assert_eq!(read_trace_gz(&path).unwrap(), sample());
    }

    #[test]
    fn malformed_trace_row_is_named() {
        let text = format!("{}\n0,,,x,,,,,\n", TRACE_HEADER.join(","));
        let err = read_trace(text.as_bytes(), Path::new("f.csv")).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn hash_tracks_config() {
        let a = SimConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.rng_seed += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(point_id(&a).len(), 16);
    }
}
