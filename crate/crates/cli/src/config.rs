//! Flat `key = value` config files.
//!
//! Keys are flag names without the leading dashes; `_` and `-` are
//! interchangeable. Entries are spliced into the argument list right after
//! the subcommand, so any flag given on the command line wins. Keys that no
//! subcommand accepts are rejected; keys another subcommand accepts are
//! skipped, so one file can serve a whole pipeline.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

pub const CONFIG_FLAG: &str = "config";

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if key == CONFIG_FLAG {
            return Err(format!(
                "line {}: config files cannot include other config files",
                i + 1
            ));
        }
        if !seen.insert(key.clone()) {
            return Err(format!("line {}: duplicate key `{key}`", i + 1));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.push((key, value.to_string()));
    }
    Ok(out)
}

fn find_config(args: &[OsString]) -> Result<Option<(usize, OsString)>, String> {
    let flag = format!("--{CONFIG_FLAG}");
    for (i, a) in args.iter().enumerate().skip(1) {
        let Some(s) = a.to_str() else { continue };
        if s == flag {
            let path = args.get(i + 1).ok_or("--config needs a path")?;
            return Ok(Some((i, path.clone())));
        }
        if let Some(p) = s.strip_prefix(&format!("{flag}=")) {
            return Ok(Some((i, p.into())));
        }
    }
    Ok(None)
}

/// Position of the subcommand name: the first bare word that is not the
/// value of `--config`.
fn find_subcommand(args: &[OsString], config_at: Option<usize>) -> Option<usize> {
    let mut skip_next = false;
    for (i, a) in args.iter().enumerate().skip(1) {
        if skip_next {
            skip_next = false;
            continue;
        }
        if Some(i) == config_at && a.to_str() == Some(&format!("--{CONFIG_FLAG}")) {
            skip_next = true;
            continue;
        }
        if !a.to_str().is_some_and(|s| s.starts_with('-')) {
            return Some(i);
        }
    }
    None
}

/// Returns `args` with the config file's entries for the chosen subcommand
/// inserted after the subcommand name.
pub fn splice(args: Vec<OsString>, cmd: &clap::Command) -> Result<Vec<OsString>, String> {
    let Some((at, path)) = find_config(&args)? else {
        return Ok(args);
    };
    let Some(sub_at) = find_subcommand(&args, Some(at)) else {
        return Ok(args);
    };
    let Some(sub) = args[sub_at]
        .to_str()
        .and_then(|name| cmd.find_subcommand(name))
    else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let entries = parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;

    let longs = |c: &clap::Command| -> BTreeSet<String> {
        c.get_arguments()
            .filter_map(|a| a.get_long())
            .map(str::to_string)
            .collect()
    };
    let here = longs(sub);
    let anywhere: BTreeSet<String> = cmd.get_subcommands().flat_map(longs).collect();
    let mut injected = Vec::new();
    for (key, value) in entries {
        if here.contains(&key) {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else if !anywhere.contains(&key) {
            return Err(format!("{}: unknown key `{key}`", path.display()));
        }
    }
    let mut out = args;
    out.splice(sub_at + 1..sub_at + 1, injected);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_files() {
        let got = parse("# run\nepochs = 3\n\nlabel_frac= 0.1\n--out = \"a b\"\n").unwrap();
        assert_eq!(
            got,
            vec![
                ("epochs".to_string(), "3".to_string()),
                ("label-frac".to_string(), "0.1".to_string()),
                ("out".to_string(), "a b".to_string()),
            ]
        );
        assert!(parse("epochs 3").is_err());
        assert!(parse("a = 1\na = 2").is_err());
        assert!(parse(" = 2").is_err());
        assert!(parse("config = x").is_err());
    }

    #[test]
    fn finds_the_subcommand_after_config() {
        let args: Vec<OsString> = ["bin", "--config", "f", "pretrain", "--epochs", "2"]
            .iter()
            .map(OsString::from)
            .collect();
        let (at, path) = find_config(&args).unwrap().unwrap();
        assert_eq!((at, path.to_str().unwrap()), (1, "f"));
        assert_eq!(find_subcommand(&args, Some(at)), Some(3));
        let args: Vec<OsString> = ["bin", "pretrain", "--config=f"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(find_config(&args).unwrap().unwrap().0, 2);
        assert_eq!(find_subcommand(&args, Some(2)), Some(1));
    }
}
