//! `--set key=value` overrides applied to a config's JSON form, so unknown
//! keys and bad values surface through the same validation as a file.

use anyhow::{anyhow, bail, Context, Result};
use cbsnr::SimConfig;
use serde_json::Value;

/// Short names accepted by `--set` in addition to dotted config paths.
const ALIASES: [(&str, &str); 10] = [
    ("rho", "traffic.target_rho"),
    ("gate", "gate_variant"),
    ("engine", "gate_engine"),
    ("seed", "rng_seed"),
    ("slots", "num_slots"),
    ("ues", "num_ues"),
    ("k", "grant_cap"),
    ("bler", "harq.bler_new"),
    ("warmup", "warmup_slots"),
    ("scheduler", "scheduler"),
];

fn resolve(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| a.eq_ignore_ascii_case(key))
        .map_or(key, |(_, path)| path)
}

/// Accepts enum values in any case (`pu`, `event`, `wpf`).
fn normalize(path: &str, raw: &str) -> Value {
    let canon = match path {
        "gate_variant" => match raw.to_ascii_lowercase().as_str() {
            "dt" => Some("DT"),
            "pu" => Some("PU"),
            "none" => Some("None"),
            _ => None,
        },
        "gate_engine" => match raw.to_ascii_lowercase().as_str() {
            "naive" => Some("Naive"),
            "event" | "eventdriven" | "event_driven" => Some("EventDriven"),
            _ => None,
        },
        "scheduler" => match raw.to_ascii_lowercase().as_str() {
            "rr" => Some("RR"),
            "pf" => Some("PF"),
            "wpf" => Some("WPF"),
            _ => None,
        },
        _ => None,
    };
    match canon {
        Some(s) => Value::String(s.to_string()),
        None => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{s}` is not of the form key=value"))?;
    let k = k.trim();
    if k.is_empty() {
        bail!("override `{s}` has an empty key");
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("unknown config key `{path}`");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        let next = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
        if next.is_null() {
            *next = Value::Object(Default::default());
        }
        node = next;
    }
    unreachable!("split yields at least one part")
}

/// Applies overrides in order and revalidates.
pub fn apply(cfg: &SimConfig, sets: &[(String, String)]) -> Result<SimConfig> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut v = serde_json::to_value(cfg)?;
    for (k, raw) in sets {
        let path = resolve(k);
        set_path(&mut v, path, normalize(path, raw)).with_context(|| format!("--set {k}={raw}"))?;
    }
    let out: SimConfig = serde_json::from_value(v).context("applying --set overrides")?;
    out.validate()?;
    Ok(out)
}
