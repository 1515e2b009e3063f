//! Golden fixtures: each directory holds `args.txt` and an `expected/` tree.
//!
//! `args.txt` lists one CLI argument per line (blank lines and `#` comments
//! skipped). An argument starting with `@` is a path relative to the fixture
//! directory. `--out` is supplied by the runner. An optional `expected/exit_code`
//! file holds the expected exit status (default 0).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::cli::{execute, Cli, CliError, CliResult, EXIT_OK};

pub const DEFAULT_ROOT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

const EXIT_FILE: &str = "exit_code";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileDiff {
    Missing(String),
    Unexpected(String),
    /// First differing line (1-based).
    Changed { file: String, line: usize },
}

impl std::fmt::Display for FileDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FileDiff::Missing(p) => write!(f, "{p}: not produced"),
            FileDiff::Unexpected(p) => write!(f, "{p}: produced but not expected"),
            FileDiff::Changed { file, line } => write!(f, "{file}: differs at line {line}"),
        }
    }
}

#[derive(Debug)]
pub struct FixtureRun {
    pub name: String,
    pub exit_code: i32,
    pub diffs: Vec<FileDiff>,
}

pub fn list(root: &Path) -> Result<Vec<String>, CliError> {
    let entries = fs::read_dir(root).map_err(|e| CliError::input(format!("{}: {e}", root.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(Result::ok)
        .filter(|e| e.path().join("args.txt").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

pub fn parse_args(dir: &Path) -> Result<Vec<String>, CliError> {
    let path = dir.join("args.txt");
    let text = fs::read_to_string(&path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| match l.strip_prefix('@') {
            Some(rel) => dir.join(rel).to_string_lossy().into_owned(),
            None => l.to_string(),
        })
        .collect())
}

/// Runs the fixture's command writing into `out`, returning its exit code.
pub fn run_into(dir: &Path, out: &Path) -> Result<i32, CliError> {
    let mut argv = vec!["reidkit".to_string()];
    argv.extend(parse_args(dir)?);
    argv.push("--out".into());
    argv.push(out.to_string_lossy().into_owned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    Ok(match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}: {e}", dir.display());
            e.code
        }
    })
}

fn files_under(dir: &Path) -> BTreeSet<String> {
    fn walk(base: &Path, dir: &Path, acc: &mut BTreeSet<String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.filter_map(Result::ok) {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, acc);
            } else if let Ok(rel) = p.strip_prefix(base) {
                acc.insert(rel.to_string_lossy().into_owned());
            }
        }
    }
    let mut acc = BTreeSet::new();
    walk(dir, dir, &mut acc);
    acc
}

fn first_diff_line(a: &[u8], b: &[u8]) -> usize {
    let at = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
    1 + a[..at].iter().filter(|&&c| c == b'\n').count()
}

pub fn compare_trees(expected: &Path, actual: &Path) -> Vec<FileDiff> {
    let want = files_under(expected);
    let got = files_under(actual);
    let mut diffs = Vec::new();
    for f in want.union(&got) {
        match (want.contains(f), got.contains(f)) {
            (true, false) => diffs.push(FileDiff::Missing(f.clone())),
            (false, true) => diffs.push(FileDiff::Unexpected(f.clone())),
            _ => {
                let a = fs::read(expected.join(f)).unwrap_or_default();
                let b = fs::read(actual.join(f)).unwrap_or_default();
                if a != b {
                    diffs.push(FileDiff::Changed { file: f.clone(), line: first_diff_line(&a, &b) });
                }
            }
        }
    }
    diffs
}

fn scratch_dir(name: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("reidkit-fixture-{name}-{}-{nanos}", std::process::id()))
}

/// Runs one fixture into a scratch directory and diffs it against `expected/`.
pub fn check(root: &Path, name: &str) -> Result<FixtureRun, CliError> {
    let dir = root.join(name);
    let out = scratch_dir(name);
    fs::create_dir_all(&out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    let code = run_into(&dir, &out);
    let result = code.map(|code| {
        if code != EXIT_OK {
            let _ = fs::write(out.join(EXIT_FILE), format!("{code}\n"));
        }
        FixtureRun { name: name.to_string(), exit_code: code, diffs: compare_trees(&dir.join("expected"), &out) }
    });
    let _ = fs::remove_dir_all(&out);
    result
}

fn accept(root: &Path, name: &str) -> Result<FixtureRun, CliError> {
    let dir = root.join(name);
    let expected = dir.join("expected");
    if expected.exists() {
        fs::remove_dir_all(&expected).map_err(|e| CliError::input(format!("{}: {e}", expected.display())))?;
    }
    fs::create_dir_all(&expected).map_err(|e| CliError::input(format!("{}: {e}", expected.display())))?;
    let code = run_into(&dir, &expected)?;
    if code != EXIT_OK {
        let _ = fs::write(expected.join(EXIT_FILE), format!("{code}\n"));
    }
    Ok(FixtureRun { name: name.to_string(), exit_code: code, diffs: Vec::new() })
}

pub fn regenerate(root: &Path, name: &str, accept_changes: bool) -> CliResult {
    let names = if name == "all" { list(root)? } else { vec![name.to_string()] };
    if names.is_empty() {
        return Err(CliError::input(format!("no fixtures under {}", root.display())));
    }
    let mut failed = Vec::new();
    for n in &names {
        if !root.join(n).join("args.txt").is_file() {
            return Err(CliError::input(format!("unknown fixture {n}")));
        }
        let run = if accept_changes { accept(root, n)? } else { check(root, n)? };
        if run.diffs.is_empty() {
            println!("{n}: {}", if accept_changes { "written" } else { "ok" });
        } else {
            println!("{n}: {} difference(s)", run.diffs.len());
            for d in &run.diffs {
                println!("  {d}");
            }
            failed.push(n.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::domain(format!("fixtures differ: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_diff_line_counts_newlines() {
        assert_eq!(first_diff_line(b"a\nb\nc", b"a\nb\nx"), 3);
        assert_eq!(first_diff_line(b"a\n", b"a\nmore"), 2);
        assert_eq!(first_diff_line(b"x", b"y"), 1);
    }

    #[test]
    fn args_resolve_relative_paths() {
        let dir = std::env::temp_dir().join(format!("reidkit-args-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("args.txt"), "# comment\nloss\n\ncheck\n--input\n@in.json\n").unwrap();
        let args = parse_args(&dir).unwrap();
        assert_eq!(args[..3], ["loss", "check", "--input"]);
        assert_eq!(PathBuf::from(&args[3]), dir.join("in.json"));
        fs::remove_dir_all(&dir).unwrap();
    }
}
