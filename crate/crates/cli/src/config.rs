//! `--config file.json`: a flat JSON object whose keys are flag names of the
//! invoked subcommand (or global flags). Values replace any flag given on the
//! command line.

use std::ffi::OsString;
use std::path::Path;

use clap::{Arg, Command};
use serde_json::Value;

use crate::CliError;

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn find_arg<'a>(cmd: &'a Command, sub: &'a Command, long: &str) -> Option<&'a Arg> {
    sub.get_arguments()
        .chain(cmd.get_arguments())
        .find(|a| a.get_long() == Some(long))
}

/// Removes every `--name value` / `--name=value` / `--name` occurrence.
fn strip_flag(argv: &mut Vec<OsString>, name: &str, takes_value: bool) {
    let flag = format!("--{name}");
    let prefix = format!("--{name}=");
    let mut out = Vec::with_capacity(argv.len());
    let mut i = 0;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == flag {
            i += if takes_value { 2 } else { 1 };
            continue;
        }
        if s.starts_with(&prefix) {
            i += 1;
            continue;
        }
        out.push(argv[i].clone());
        i += 1;
    }
    *argv = out;
}

fn scalar(key: &str, v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(CliError::Usage(format!("config key `{key}`: expected a string, number or boolean"))),
    }
}

/// Rewrites `argv` so that the values in the `--config` file take precedence.
pub fn apply(cmd: &Command, mut argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
    else {
        return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
    };
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()))
        .ok_or_else(|| CliError::Usage("--config needs a subcommand".into()))?;

    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in &map {
        let name = key.replace('_', "-");
        if name == "config" {
            return Err(CliError::Usage("config files cannot nest `config`".into()));
        }
        let arg = find_arg(cmd, sub, &name).ok_or_else(|| {
            CliError::Usage(format!("config key `{key}` is not a flag of `{}`", sub.get_name()))
        })?;
        let takes_value = arg.get_action().takes_values();
        strip_flag(&mut argv, &name, takes_value);
        let flag = OsString::from(format!("--{name}"));
        match (value, takes_value) {
            (Value::Null, _) => {}
            (Value::Bool(b), false) => {
                if *b {
                    extra.push(flag);
                }
            }
            (_, false) => {
                return Err(CliError::Usage(format!("config key `{key}` is a switch and needs true or false")));
            }
            (Value::Array(items), true) => {
                for item in items {
                    extra.push(flag.clone());
                    extra.push(scalar(key, item)?.into());
                }
            }
            (v, true) => {
                extra.push(flag);
                extra.push(scalar(key, v)?.into());
            }
        }
    }
    argv.extend(extra);
    Ok(argv)
}
