//! The published config schema must track `SimConfig` key for key.

use cbsnr::SimConfig;
use serde_json::Value;

fn schema() -> Value {
    let text = include_str!("../schema/simconfig.v1.json");
    serde_json::from_str(text).unwrap()
}

fn strip_nulls(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(_, x)| !x.is_null())
                .map(|(k, x)| (k.clone(), strip_nulls(x)))
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(strip_nulls).collect()),
        other => other.clone(),
    }
}

/// Walks schema and value together; every serialized key must be described,
/// and every described key of a fixed object must be serialized.
fn check(node: &Value, value: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(d) = node.get("default") {
        if strip_nulls(d) != strip_nulls(value) {
            errors.push(format!("{path}: schema default {d} != {value}"));
        }
    }
    match value {
        Value::Object(m) => {
            let Some(props) = node.get("properties").and_then(Value::as_object) else {
                errors.push(format!("{path}: object without properties"));
                return;
            };
            for (k, v) in m {
                match props.get(k) {
                    Some(p) => check(p, v, &format!("{path}.{k}"), errors),
                    None if v.is_null() => {}
                    None => errors.push(format!("{path}.{k}: not in schema")),
                }
            }
            for k in props.keys() {
                let optional = props[k].get("type").is_some_and(|t| t.to_string().contains("null"))
                    || !node.get("required").is_some_and(|r| r.as_array().unwrap().iter().any(|x| x == k))
                        && path.contains('[');
                if !m.contains_key(k) && !optional {
                    errors.push(format!("{path}.{k}: in schema but not serialized"));
                }
            }
        }
        Value::Array(a) => {
            if let Some(items) = node.get("items") {
                for (i, v) in a.iter().enumerate() {
                    let item_node = items.as_object().map(|o| {
                        let mut o = o.clone();
                        o.remove("default");
                        Value::Object(o)
                    });
                    check(&item_node.unwrap(), v, &format!("{path}[{i}]"), errors);
                }
            }
        }
        _ => {}
    }
}

#[test]
fn schema_matches_default_config() {
    let s = schema();
    assert_eq!(s["additionalProperties"], false);
    let value = serde_json::to_value(SimConfig::default()).unwrap();
    let mut errors = Vec::new();
    check(&s, &value, "$", &mut errors);
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn schema_describes_nested_variants() {
    // optional sub-objects that are null by default
    let mut cfg = SimConfig {
        cqi_markov: Some(cbsnr::CqiMarkov {
            p_good_to_bad: 0.01,
            p_bad_to_good: 0.1,
            bad_cqi_drop: 3,
        }),
        ..SimConfig::default()
    };
    cfg.classes[0].allowance_bytes = Some(40);
    cfg.ue_overrides.push(cbsnr::UeOverride {
        ue: 0,
        cqi: Some(7),
        class: None,
    });
    let mut value = serde_json::to_value(&cfg).unwrap();
    let s = schema();
    // defaults do not apply to a modified config
    let mut errors = Vec::new();
    for (k, node) in s["properties"].as_object().unwrap() {
        let mut n = node.clone();
        n.as_object_mut().unwrap().remove("default");
        check(&n, &value[k], &format!("$.{k}"), &mut errors);
    }
    assert!(errors.is_empty(), "{errors:#?}");
    value["cqi_markov"]["bogus"] = 1.into();
    assert!(SimConfig::from_json_str(&value.to_string()).is_err());
}

#[test]
fn every_key_documented() {
    fn walk(node: &Value, path: &str, missing: &mut Vec<String>) {
        if let Some(props) = node.get("properties").and_then(Value::as_object) {
            for (k, p) in props {
                let has_doc = p.get("description").is_some() || p.get("x-unit").is_some();
                let leaf = p.get("properties").is_none() && p.get("items").and_then(|i| i.get("properties")).is_none();
                if leaf && !has_doc && !matches!(k.as_str(), "ue" | "cqi" | "class") {
                    missing.push(format!("{path}.{k}"));
                }
                walk(p, &format!("{path}.{k}"), missing);
                if let Some(items) = p.get("items") {
                    walk(items, &format!("{path}.{k}[]"), missing);
                }
            }
        }
    }
    let mut missing = Vec::new();
    walk(&schema(), "$", &mut missing);
    assert!(missing.is_empty(), "{missing:?}");
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            SimConfig::from_path(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n > 0);
}
