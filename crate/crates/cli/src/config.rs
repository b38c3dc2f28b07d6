//! Key-value config files.
//!
//! ```text
//! # shared by every subcommand that has the flag
//! seed = 7
//!
//! [fit]
//! gaussians = 64
//! pairs = before.png after.png
//! ```
//!
//! Keys are long flag names without the leading dashes. A key in a
//! `[subcommand]` section applies only to that subcommand; a top-level key
//! applies to every subcommand that accepts it. Boolean flags take `true`
//! or `false`. Values with several parts are separated by whitespace.
//! Flags on the command line take precedence over the file.

use clap::{ArgAction, Command};
use std::ffi::OsString;

#[derive(Debug, PartialEq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| format!("line {}: unterminated section header", i + 1))?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let key = k.trim().trim_start_matches("--").to_string();
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push(Entry {
            section: section.clone(),
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

fn is_flag(arg: &str, key: &str) -> bool {
    arg.strip_prefix("--")
        .is_some_and(|a| a == key || a.strip_prefix(key).is_some_and(|r| r.starts_with('=')))
}

/// Inserts config-file flags after the subcommand token in `argv`, skipping
/// any flag already present.
pub fn expand(argv: Vec<OsString>, text: &str, root: &Command) -> Result<Vec<OsString>, String> {
    let entries = parse(text)?;
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    // The subcommand is the first bare word that is not the value of --config.
    let mut pos = None;
    let mut i = 1;
    while i < strs.len() {
        let a = &strs[i];
        if a == "--config" {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            pos = Some(i);
            break;
        }
        i += 1;
    }
    let Some(pos) = pos else {
        return Ok(argv);
    };
    let name = &strs[pos];
    let Some(sub) = root.find_subcommand(name) else {
        return Ok(argv);
    };
    let known = |key: &str| sub.get_arguments().find(|a| a.get_long() == Some(key));
    let mut extra: Vec<OsString> = Vec::new();
    for e in &entries {
        match &e.section {
            Some(s) if s != sub.get_name() => {
                if root.find_subcommand(s).is_none() {
                    return Err(format!("line {}: unknown section [{s}]", e.line));
                }
                continue;
            }
            _ => {}
        }
        let Some(arg) = known(&e.key) else {
            if e.section.is_some() {
                return Err(format!("line {}: {} has no --{} flag", e.line, sub.get_name(), e.key));
            }
            if !root.get_subcommands().any(|c| c.get_arguments().any(|a| a.get_long() == Some(&e.key))) {
                return Err(format!("line {}: unknown key {:?}", e.line, e.key));
            }
            continue;
        };
        if strs.iter().any(|a| is_flag(a, &e.key)) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match e.value.as_str() {
                "true" => extra.push(format!("--{}", e.key).into()),
                "false" => {}
                v => return Err(format!("line {}: {} expects true or false, got {v:?}", e.line, e.key)),
            }
            continue;
        }
        extra.push(format!("--{}", e.key).into());
        extra.extend(e.value.split_whitespace().map(OsString::from));
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, extra);
    Ok(out)
}
