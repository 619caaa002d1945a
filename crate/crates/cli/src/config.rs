//! `--config FILE` support.
//!
//! The file is TOML with top-level `key = value` pairs named after the long
//! flags (`out-dir` or `out_dir`). Entries are turned into extra arguments
//! placed after the subcommand; a flag present on the command line wins.
//! Keys that only belong to other subcommands are ignored so one file can
//! serve a whole pipeline.

use std::collections::BTreeSet;
use std::ffi::OsString;

use clap::{ArgAction, Command};

use crate::CliError;

pub fn expand(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let tokens: Vec<String> = argv
        .iter()
        .map(|s| s.to_string_lossy().into_owned())
        .collect();
    let Some(path) = config_path(&tokens) else {
        return Ok(argv);
    };
    let Some(sub_pos) = subcommand_position(cmd, &tokens) else {
        return Ok(argv);
    };
    let sub = cmd
        .find_subcommand(&tokens[sub_pos])
        .expect("position found by name");

    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("config file {path}: {e}")))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::data(format!("config file {path}: {e}")))?;

    let given: BTreeSet<String> = tokens[1..]
        .iter()
        .filter_map(|t| t.strip_prefix("--"))
        .map(|t| t.split('=').next().unwrap_or(t).to_string())
        .collect();
    let known_anywhere: BTreeSet<String> = cmd
        .get_arguments()
        .chain(cmd.get_subcommands().flat_map(|s| s.get_arguments()))
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();

    let mut extra = Vec::new();
    for (key, value) in &table {
        let long = key.replace('_', "-");
        if long == "config" {
            continue;
        }
        if !known_anywhere.contains(&long) {
            return Err(CliError::usage(format!(
                "config file {path}: unknown key '{key}'"
            )));
        }
        let Some(arg) = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()))
        else {
            continue;
        };
        if given.contains(&long) {
            continue;
        }
        let flag = format!("--{long}");
        match (arg.get_action(), value) {
            (ArgAction::SetTrue, toml::Value::Boolean(b)) => {
                if *b {
                    extra.push(flag);
                }
            }
            (ArgAction::SetTrue, _) => {
                return Err(CliError::usage(format!(
                    "config file {path}: '{key}' must be true or false"
                )));
            }
            (ArgAction::Append, toml::Value::Array(items)) => {
                for item in items {
                    extra.push(flag.clone());
                    extra.push(scalar(item, key, &path)?);
                }
            }
            (_, toml::Value::Array(items)) => {
                let parts: Result<Vec<String>, CliError> =
                    items.iter().map(|v| scalar(v, key, &path)).collect();
                extra.push(flag);
                extra.push(parts?.join(","));
            }
            (_, v) => {
                extra.push(flag);
                extra.push(scalar(v, key, &path)?);
            }
        }
    }

    let mut out: Vec<OsString> = argv[..=sub_pos].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend(argv[sub_pos + 1..].iter().cloned());
    Ok(out)
}

fn scalar(v: &toml::Value, key: &str, path: &str) -> Result<String, CliError> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(CliError::usage(format!(
            "config file {path}: unsupported value for '{key}'"
        ))),
    }
}

fn config_path(tokens: &[String]) -> Option<String> {
    let mut it = tokens.iter().skip(1);
    let mut found = None;
    while let Some(t) = it.next() {
        if t == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = t.strip_prefix("--config=") {
            found = Some(v.to_string());
        }
    }
    found.filter(|p| !p.is_empty())
}

/// Index of the subcommand token, skipping the values of global flags.
fn subcommand_position(cmd: &Command, tokens: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < tokens.len() {
        let t = &tokens[i];
        if let Some(long) = t.strip_prefix("--") {
            if !long.contains('=') {
                let takes_value = cmd
                    .get_arguments()
                    .find(|a| a.get_long() == Some(long))
                    .is_some_and(|a| a.get_action().takes_values());
                if takes_value {
                    i += 1;
                }
            }
        } else if cmd.find_subcommand(t).is_some() {
            return Some(i);
        } else if !t.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}
