//! Flat `key=value` config files merged under command-line flags, and run manifests.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;
use serde_json::Value;

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got `{line}`", i + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn takes_value(cmd: &Command, sub: &Command, key: &str) -> Option<bool> {
    cmd.get_arguments()
        .chain(sub.get_arguments())
        .find(|a| a.get_long() == Some(key))
        .map(|a| a.get_action().takes_values())
}

/// Rewrites `argv` so that settings from `--config FILE` come right after the
/// subcommand, ahead of any flag the user typed (later flags win).
pub fn expand_argv(cmd: &Command, argv: Vec<String>) -> Result<Vec<String>> {
    let mut config_path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config_path = Some(it.next().context("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config_path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let Some(sub_at) = rest.iter().position(|a| cmd.find_subcommand(a).is_some()) else {
        bail!("--config needs a subcommand");
    };
    let sub = cmd.find_subcommand(&rest[sub_at]).expect("found above");
    let mut injected = Vec::new();
    for (k, v) in parse_config(&text)? {
        if k == "command" {
            if v != sub.get_name() {
                bail!("config is for `{v}`, not `{}`", sub.get_name());
            }
            continue;
        }
        match takes_value(cmd, sub, &k) {
            None => bail!("unknown config key `{k}` for `{}`", sub.get_name()),
            Some(true) => injected.extend([format!("--{k}"), v]),
            Some(false) => match v.as_str() {
                "true" => injected.push(format!("--{k}")),
                "false" => {}
                _ => bail!("config key `{k}` expects true or false, got `{v}`"),
            },
        }
    }
    rest.splice(sub_at + 1..sub_at + 1, injected);
    Ok(rest)
}

fn flat(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => Some(items.iter().filter_map(flat).collect::<Vec<_>>().join(",")),
        other => Some(other.to_string()),
    }
}

/// `command=...` followed by every resolved setting, one per line.
pub fn manifest(command: &str, settings: &[Value]) -> String {
    let mut out = format!("command={command}\n");
    for s in settings {
        if let Value::Object(map) = s {
            for (k, v) in map {
                if let Some(v) = flat(v) {
                    out.push_str(&format!("{k}={v}\n"));
                }
            }
        }
    }
    out
}

pub fn write_manifest(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let kv = parse_config("# c\na = 1\n\nb=x=y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
        assert!(parse_config("nonsense").is_err());
    }

    #[test]
    fn manifest_lines() {
        let v = serde_json::json!({"n": 4, "lens": [1, 2], "out": null, "flag": true});
        let m = manifest("gen", &[v]);
        assert!(m.starts_with("command=gen\n"));
        assert!(m.contains("lens=1,2\n") && m.contains("flag=true\n") && !m.contains("out="));
    }
}
