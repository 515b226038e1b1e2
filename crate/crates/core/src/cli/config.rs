//! Flat `key = value` run files merged beneath flags and environment.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

use super::CliError;

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Config(format!("config line {}: empty key", n + 1)));
        }
        out.push((key.replace('_', "-"), value.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Appends config entries to `args` for every option of the active
/// subcommand that was neither given on the command line nor set in the
/// environment.
pub fn merge_config(
    command: &Command,
    matches: &ArgMatches,
    mut args: Vec<OsString>,
    entries: &[(String, String)],
) -> Result<Vec<OsString>, CliError> {
    let Some((name, sub_matches)) = matches.subcommand() else {
        return Ok(args);
    };
    let sub = command
        .find_subcommand(name)
        .expect("matched subcommand exists");
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Config(format!("config key `{key}` is not an option of `{name}`")))?;
        let id = arg.get_id().as_str();
        match sub_matches.value_source(id) {
            Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable) => continue,
            _ => {}
        }
        if arg.get_action().takes_values() {
            args.push(format!("--{key}").into());
            args.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => args.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => return Err(CliError::Config(format!("config key `{key}`: expected a boolean, got {other:?}"))),
            }
        }
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let entries = parse_config("# run\nseed = 7\nmax_tokens=16  # cap\n\n").unwrap();
        assert_eq!(
            entries,
            vec![("seed".into(), "7".into()), ("max-tokens".into(), "16".into())]
        );
        assert!(matches!(parse_config("seed 7"), Err(CliError::Config(_))));
        assert!(matches!(parse_config(" = 7"), Err(CliError::Config(_))));
    }
}
