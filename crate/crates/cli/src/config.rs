//! Flat `key = value` configuration files. Keys are long flag names; values
//! are spliced in front of the command-line arguments so the command line wins.

use std::ffi::OsString;

use clap::CommandFactory;

use crate::Cli;

/// Parses `key = value` lines. `#` starts a comment; underscores in keys read as dashes.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", n + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Index of the subcommand in `args` (after the program name and global options).
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            i += 2;
        } else if a.starts_with("--config=") {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

/// Inserts the config entries that apply to the invoked subcommand right
/// after it. Keys unknown to every subcommand are rejected.
pub fn merge(args: Vec<OsString>, entries: &[(String, String)]) -> Result<Vec<OsString>, String> {
    let Some(at) = subcommand_index(&args) else {
        return Ok(args);
    };
    let mut cmd = Cli::command();
    cmd.build();
    let name = args[at].to_string_lossy().to_string();
    let Some(sub) = cmd.find_subcommand(&name) else {
        return Ok(args);
    };
    let known_anywhere = |key: &str| {
        cmd.get_subcommands().any(|s| s.get_arguments().any(|a| a.get_long() == Some(key)))
    };
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err("config files cannot include other config files".into());
        }
        match sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) {
            Some(arg) if arg.get_num_args().is_some_and(|n| n.takes_values()) => {
                extra.push(format!("--{key}").into());
                extra.push(value.into());
            }
            Some(_) => match value.as_str() {
                "true" | "yes" | "1" => extra.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                _ => return Err(format!("config key {key}: expected a boolean, got {value:?}")),
            },
            None if known_anywhere(key) => {}
            None => return Err(format!("unknown config key {key:?}")),
        }
    }
    let mut out = args[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse("# header\nbeta = 0.2\n\ngrad_check = true # inline\n").unwrap();
        assert_eq!(e, vec![("beta".into(), "0.2".into()), ("grad-check".into(), "true".into())]);
        assert!(parse("novalue").is_err());
    }

    #[test]
    fn entries_go_before_command_line() {
        let e = parse("beta = 0.2\nleads = 4\ngrad-check = true").unwrap();
        let merged = merge(os(&["voxflow", "--config", "c.txt", "estimate", "--beta", "0.3"]), &e).unwrap();
        assert_eq!(merged, os(&["voxflow", "--config", "c.txt", "estimate", "--beta", "0.2", "--grad-check", "--beta", "0.3"]));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = parse("bogus = 1").unwrap();
        assert!(merge(os(&["voxflow", "estimate"]), &e).is_err());
    }
}
