//! Error categories, output paths and the run.json manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

/// Exit code per failure category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal = 1,
    Config = 3,
    Input = 4,
    Numerical = 5,
    Audit = 6,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Config => "config",
            Category::Input => "input",
            Category::Numerical => "numerical",
            Category::Audit => "audit",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

pub fn fail(category: Category, msg: impl Into<String>) -> anyhow::Error {
    Failure { category, msg: msg.into() }.into()
}

fn of_core(e: &pflow::Error) -> Category {
    use pflow::Error as E;
    if e.is_numerical() {
        return Category::Numerical;
    }
    match e {
        E::Diverged { .. } | E::NoConvergence(_) => Category::Numerical,
        E::InvalidArgument(_) | E::Partition(_) | E::Unsupported(_) | E::Json(_) | E::Layer { .. } => Category::Config,
        E::Io(_) | E::Csv(_) | E::Format(_) | E::Shape(_) => Category::Input,
        _ => Category::Internal,
    }
}

pub fn categorize(e: &anyhow::Error) -> Category {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.category;
        }
        if let Some(c) = cause.downcast_ref::<pflow::Error>() {
            return of_core(c);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return Category::Config;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Category::Input;
        }
    }
    Category::Internal
}

/// Relative output paths live under `$PFLOW_OUT_DIR` when it is set.
pub fn resolve_out(p: &Path) -> PathBuf {
    match std::env::var_os("PFLOW_OUT_DIR") {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Serialize)]
struct Versions {
    pflow: &'static str,
    pflow_cli: &'static str,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: &'a [String],
    config_hash: String,
    seed: Option<u64>,
    versions: Versions,
    wall_time: f64,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

/// Collects outputs of one command and writes its manifest: `run.json`
/// inside a directory output, `<file>.run.json` next to a file output.
pub struct Run<'a> {
    command: &'a str,
    argv: &'a [String],
    config_hash: String,
    seed: Option<u64>,
    start: Instant,
    outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl<'a> Run<'a> {
    pub fn new(command: &'a str, argv: &'a [String], config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self { command, argv, config_hash: hash_json(config)?, seed, start: Instant::now(), outputs: Vec::new(), notes: Vec::new() })
    }

    pub fn with_hash(mut self, hash: String) -> Self {
        self.config_hash = hash;
        self
    }

    /// Writes `bytes` atomically and records the path.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        pflow::io::write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn finish(self, manifest: &Path) -> Result<()> {
        let rec = RunRecord {
            command: self.command,
            argv: self.argv,
            config_hash: self.config_hash,
            seed: self.seed,
            versions: Versions { pflow: pflow::VERSION, pflow_cli: env!("CARGO_PKG_VERSION") },
            wall_time: self.start.elapsed().as_secs_f64(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            notes: self.notes,
        };
        let mut bytes = serde_json::to_vec_pretty(&rec)?;
        bytes.push(b'\n');
        if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        pflow::io::write_atomic(manifest, &bytes)?;
        Ok(())
    }
}

pub fn file_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}

pub fn hash_json(v: &impl Serialize) -> Result<String> {
    Ok(pflow::io::sha256_hex(&serde_json::to_vec(v)?))
}
