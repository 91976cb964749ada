//! `--vary key=a,b,c` handling over the raw TOML document.

use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Axis {
    /// Dotted path from the document root, e.g. `hardware.interconnect_bandwidth`.
    pub path: Vec<String>,
    pub values: Vec<String>,
}

impl Axis {
    pub fn name(&self) -> String {
        self.path.join(".")
    }
}

/// Parses `key=a,b,c`, resolving a bare leaf name to the unique field that
/// carries it.
pub fn parse_axis(spec: &str, doc: &Table) -> Result<Axis, CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--vary expects key=v1,v2,...; got {spec:?}")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(CliError::usage(format!("--vary {key}: empty value")));
    }
    let key = key.trim();
    let path: Vec<String> = if key.contains('.') {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if lookup(doc, &path).is_none() {
            return Err(CliError::usage(format!("--vary: unknown config key {key:?}")));
        }
        path
    } else {
        let mut hits = Vec::new();
        leaves(doc, &mut Vec::new(), key, &mut hits);
        match hits.len() {
            0 => return Err(CliError::usage(format!("--vary: unknown config key {key:?}"))),
            1 => hits.remove(0),
            _ => {
                let names: Vec<String> = hits.iter().map(|p| p.join(".")).collect();
                return Err(CliError::usage(format!("--vary: key {key:?} is ambiguous ({})", names.join(", "))));
            }
        }
    };
    Ok(Axis { path, values })
}

fn lookup<'a>(doc: &'a Table, path: &[String]) -> Option<&'a Value> {
    let (last, parents) = path.split_last()?;
    let mut t = doc;
    for p in parents {
        t = t.get(p)?.as_table()?;
    }
    t.get(last)
}

fn leaves(t: &Table, prefix: &mut Vec<String>, key: &str, hits: &mut Vec<Vec<String>>) {
    for (k, v) in t {
        prefix.push(k.clone());
        if let Value::Table(inner) = v {
            leaves(inner, prefix, key, hits);
        } else if k == key {
            hits.push(prefix.clone());
        }
        prefix.pop();
    }
}

/// Typed value for `raw`, following the type of the value it replaces.
fn coerce(raw: &str, current: &Value) -> Value {
    let parsed = if let Ok(i) = raw.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(raw.to_string())
    };
    match (current, parsed) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Integer(_), Value::Float(f)) if f.fract() == 0.0 && f.abs() < 9.2e18 => Value::Integer(f as i64),
        (_, v) => v,
    }
}

pub fn set(doc: &mut Table, path: &[String], raw: &str) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = doc;
    for p in parents {
        t = t.get_mut(p).and_then(Value::as_table_mut).expect("path resolved at parse time");
    }
    let slot = t.get_mut(last).expect("path resolved at parse time");
    *slot = coerce(raw, slot);
}

/// Cross product of axis values, first axis varying slowest.
pub fn points(axes: &[Axis]) -> Vec<Vec<&str>> {
    let mut out: Vec<Vec<&str>> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.as_str());
                    p
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> Table {
        r#"
[hardware]
hbm_bandwidth = 1.6e12
gpu_mem = 96000000000
[runtime]
draft_length = 30
"#
        .parse()
        .unwrap()
    }

    #[test]
    fn bare_and_dotted_keys_resolve() {
        let d = doc();
        assert_eq!(parse_axis("draft_length=5,15", &d).unwrap().name(), "runtime.draft_length");
        assert_eq!(parse_axis("hardware.gpu_mem=1", &d).unwrap().values, ["1"]);
        assert!(parse_axis("nope=1", &d).is_err());
        assert!(parse_axis("runtime.nope=1", &d).is_err());
        assert!(parse_axis("draft_length", &d).is_err());
    }

    #[test]
    fn values_follow_existing_types() {
        let mut d = doc();
        set(&mut d, &["hardware".into(), "hbm_bandwidth".into()], "2000000000000");
        assert_eq!(d["hardware"]["hbm_bandwidth"], Value::Float(2e12));
        set(&mut d, &["runtime".into(), "draft_length".into()], "15");
        assert_eq!(d["runtime"]["draft_length"], Value::Integer(15));
    }

    #[test]
    fn cross_product_order() {
        let a = Axis { path: vec!["a".into()], values: vec!["1".into(), "2".into()] };
        let b = Axis { path: vec!["b".into()], values: vec!["x".into(), "y".into()] };
        assert_eq!(points(&[a, b]), vec![vec!["1", "x"], vec!["1", "y"], vec!["2", "x"], vec!["2", "y"]]);
        assert_eq!(points(&[]), vec![Vec::<&str>::new()]);
    }
}
