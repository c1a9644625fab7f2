//! Report files and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::scenarios::ScenarioResult;

const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# skvarwave run manifest";

/// Run metadata recorded next to the reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub workers: usize,
    pub wall_seconds: f64,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every report, `summary.txt` and the manifest into `dir`.
/// Returns the manifest path.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, result: &ScenarioResult, info: &RunInfo) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();
    let mut put = |name: &str, content: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, content).map_err(|e| io_err(&p, e))?;
        files.push((name.to_string(), sha256_hex(content.as_bytes())));
        Ok(())
    };
    for r in &result.reports {
        put(&r.file, &r.content)?;
    }
    put("summary.txt", &format!("{}\n", result.summary))?;

    let mut m = String::new();
    let _ = writeln!(m, "{HEADER}");
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "scenario = {}", result.scenario);
    let _ = writeln!(m, "seed = {}", cfg.seed()?);
    let _ = writeln!(m, "workers = {}", info.workers);
    let _ = writeln!(m, "wall_seconds = {:.3}", info.wall_seconds);
    m.push_str("[config]\n");
    m.push_str(&cfg.effective());
    m.push_str("[source]\n");
    m.push_str(&cfg.source);
    if !cfg.source.is_empty() && !cfg.source.ends_with('\n') {
        m.push('\n');
    }
    m.push_str("[files]\n");
    for (name, hash) in &files {
        let _ = writeln!(m, "{hash}  {name}");
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, m).map_err(|e| io_err(&p, e))?;
    Ok(p)
}

/// Rebuilds the effective configuration recorded in a manifest.
pub fn config_from_manifest(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if !text.starts_with(HEADER) {
        return Err(Error::Config(format!("{} is not a run manifest", path.display())));
    }
    let mut section = "";
    let mut body = String::new();
    for line in text.lines() {
        if line.starts_with('[') && line.ends_with(']') {
            section = match line {
                "[config]" => "config",
                _ => "other",
            };
            continue;
        }
        if section == "config" {
            body.push_str(line);
            body.push('\n');
        }
    }
    let scenario = body
        .lines()
        .find_map(|l| l.strip_prefix("scenario = "))
        .map(str::to_string);
    let mut cfg = ExperimentConfig::parse_with_scenario(&body, scenario.as_deref())?;
    cfg.source = body;
    Ok(cfg)
}

/// Recorded `(sha256, file)` pairs of a manifest.
pub fn manifest_files(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut in_files = false;
    for line in text.lines() {
        if line.starts_with('[') && line.ends_with(']') {
            in_files = line == "[files]";
            continue;
        }
        if in_files {
            if let Some((h, f)) = line.split_once("  ") {
                out.push((h.to_string(), f.to_string()));
            }
        }
    }
    Ok(out)
}
