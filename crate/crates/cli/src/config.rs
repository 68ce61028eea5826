//! `key=value` config files, spliced into argv ahead of the real flags so
//! anything on the command line wins.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value, got {line:?}", origin.display(), i + 1));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("{}:{}: invalid key {:?}", origin.display(), i + 1, k.trim()));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Inserts the flags of the `--config` file right after the subcommand.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out: Vec<OsString> = argv[..2].to_vec();
    for (k, v) in parse(&text, path)? {
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}
