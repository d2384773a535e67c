//! JSON config files expanded into command-line flags.
//!
//! Top-level scalar and array entries become flags; an object keyed by a
//! subcommand name contributes flags only when that subcommand runs. The
//! expanded flags are placed before every explicit flag, and the parser
//! keeps the last occurrence, so explicit flags win.

use std::ffi::OsString;
use std::fs;

use serde_json::Value;

use crate::args::SUBCOMMANDS;

const GLOBAL_VALUE_FLAGS: [&str; 4] = ["--seed", "--jobs", "--out", "--config"];

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        let s = tok.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if SUBCOMMANDS.contains(&s.as_ref()) {
            return Some(i);
        }
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            i += 1;
        } else if !s.starts_with("--") {
            return None;
        }
        i += 1;
    }
    None
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &Value) -> Result<(), String> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(format!("config key {key:?}: unsupported value {other}")),
    };
    match value {
        Value::Null | Value::Bool(false) => {}
        Value::Bool(true) => out.push(flag.into()),
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            out.push(flag.into());
            out.push(parts.join(",").into());
        }
        v => {
            out.push(flag.into());
            out.push(scalar(v)?.into());
        }
    }
    Ok(())
}

/// Flags contributed by `config` for `subcommand`.
pub fn flags_from_json(config: &Value, subcommand: &str) -> Result<Vec<OsString>, String> {
    let obj = config
        .as_object()
        .ok_or_else(|| "config file must hold a JSON object".to_string())?;
    let mut out = Vec::new();
    for (k, v) in obj {
        match v {
            Value::Object(section) if k == subcommand => {
                for (sk, sv) in section {
                    push_flag(&mut out, sk, sv)?;
                }
            }
            Value::Object(_) => {}
            _ if k == "config" => {}
            _ => push_flag(&mut out, k, v)?,
        }
    }
    Ok(out)
}

/// Rewrites `argv` so config-file flags precede every explicit flag.
/// Returns `argv` unchanged when no `--config` is given or no subcommand
/// can be located (the parser then reports the problem).
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(idx) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let json: Value = serde_json::from_str(&text)
        .map_err(|e| format!("config {}: {e}", path.to_string_lossy()))?;
    let sub = argv[idx].to_string_lossy().into_owned();
    let mut out = vec![argv[0].clone(), argv[idx].clone()];
    out.extend(flags_from_json(&json, &sub)?);
    out.extend(argv[1..idx].iter().cloned());
    out.extend(argv[idx + 1..].iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn json_to_flags() {
        let cfg: Value = serde_json::from_str(
            r#"{"seed": 3, "no_early_stop": true, "families": ["unet"], "x": false,
                "train": {"epochs": 2}, "eval": {"subset": "all"}}"#,
        )
        .unwrap();
        let flags = flags_from_json(&cfg, "train").unwrap();
        let s: Vec<_> = flags
            .iter()
            .map(|f| f.to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            s,
            [
                "--families",
                "unet",
                "--no-early-stop",
                "--seed",
                "3",
                "--epochs",
                "2"
            ]
        );
    }

    #[test]
    fn explicit_flags_come_last() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 5, "jobs": 2}"#).unwrap();
        let argv = os(&[
            "bin",
            "--seed",
            "9",
            "--config",
            p.to_str().unwrap(),
            "train",
            "--data",
            "d",
        ]);
        let out = expand(argv).unwrap();
        let s: Vec<_> = out
            .iter()
            .map(|f| f.to_string_lossy().into_owned())
            .collect();
        assert_eq!(s[..2], ["bin", "train"]);
        let seeds: Vec<_> = s
            .iter()
            .enumerate()
            .filter(|(_, t)| *t == "--seed")
            .map(|(i, _)| &s[i + 1])
            .collect();
        assert_eq!(seeds, ["5", "9"]);
    }

    #[test]
    fn no_config_is_identity() {
        let argv = os(&["bin", "train", "--data", "d"]);
        assert_eq!(expand(argv.clone()).unwrap(), argv);
    }
}
