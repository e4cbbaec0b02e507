//! `run.json` records: what ran, with which seeds, on which inputs.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    subcommand: &'a str,
    argv: Vec<String>,
    seed: Option<u64>,
    workers: usize,
    deterministic: bool,
    started_at: String,
    finished_at: String,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

/// SHA-256 of a file, or of every file under a directory in path order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    for f in files {
        if path.is_dir() {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
        }
        let mut file = fs::File::open(&f).with_context(|| format!("opening {}", f.display()))?;
        let mut buf = [0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
            let p = entry?.path();
            // Provenance files change with every run.
            if p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("run.json")) {
                continue;
            }
            collect_files(&p, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub struct Run {
    subcommand: String,
    seed: Option<u64>,
    workers: usize,
    deterministic: bool,
    started_at: String,
    inputs: Vec<FileHash>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Run {
    pub fn start(subcommand: &str, seed: Option<u64>, workers: usize, deterministic: bool) -> Self {
        Run {
            subcommand: subcommand.to_owned(),
            seed,
            workers,
            deterministic,
            started_at: now(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: hash_path(path)?,
        });
        Ok(())
    }

    /// Writes the record to `record`, hashing `outputs`.
    pub fn finish(self, record: &Path, outputs: &[&Path]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.display().to_string(),
                    sha256: hash_path(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = RunRecord {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: fewshot_gmm::VERSION,
            subcommand: &self.subcommand,
            argv: std::env::args().collect(),
            seed: self.seed,
            workers: self.workers,
            deterministic: self.deterministic,
            started_at: self.started_at,
            finished_at: now(),
            inputs: self.inputs,
            outputs,
        };
        let json = serde_json::to_string_pretty(&rec)? + "\n";
        fs::write(record, json).with_context(|| format!("writing {}", record.display()))
    }
}

/// `run.json` inside a directory output, `<file>.run.json` beside a file.
pub fn record_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_owned();
        name.push(".run.json");
        out.with_file_name(name)
    }
}
