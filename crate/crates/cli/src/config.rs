//! `key = value` config files. Keys are long flag names of the subcommand
//! (`-` or `_` both accepted); a flag given on the command line wins over
//! the same key in the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

/// Ordered `(key, value)` pairs. `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if out.iter().any(|(seen, _)| *seen == key) {
            bail!("line {}: duplicate key {key}", i + 1);
        }
        out.push((key, v.trim().to_owned()));
    }
    Ok(out)
}

/// Rewrites `args` (without the program name) so that every key of the
/// file named by `--config` appears as a flag, unless already present.
pub fn merge_config_file(cmd: &Command, args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_owned(),
        None => args.get(pos + 1).cloned().context("--config needs a file")?,
    };
    let Some(sub_name) = args.first() else {
        return Ok(args);
    };
    let Some(sub) = cmd.find_subcommand(sub_name) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let entries = parse(&text).with_context(|| format!("config {path}"))?;

    let given = |long: &str| {
        args.iter().any(|a| a == &format!("--{long}") || a.starts_with(&format!("--{long}=")))
    };
    let mut extra = Vec::new();
    for (key, value) in entries {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("config {path}: unknown key {key} for {sub_name}");
        };
        if key == "config" {
            bail!("config {path}: nested config files are not supported");
        }
        if given(&key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}={value}"));
        } else {
            match value.as_str() {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                other => bail!("config {path}: {key} takes true or false, got {other}"),
            }
        }
    }
    let mut out = args;
    out.extend(extra);
    Ok(out)
}
