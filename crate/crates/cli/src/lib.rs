//! Command implementations behind the `rltricks` binary.

use std::fmt;
use std::fs;
use std::path::Path;

pub mod ablate;
pub mod report;
pub mod run;

/// A failed command, carrying its exit-code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad input or configuration; exit code 1.
    Validation(anyhow::Error),
    /// Failure while doing the work; exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        Failure::Validation(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<rltricks::Error> for Failure {
    fn from(e: rltricks::Error) -> Self {
        use rltricks::Error::*;
        match e {
            Config(_) | Dataset(_) | NonBinaryReward(_) => Failure::Validation(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Refuses to reuse an existing output path unless `force` is set, in which
/// case the old contents are removed.
pub fn claim_output(path: &Path, force: bool) -> CmdResult {
    if path.exists() {
        if !force {
            return Err(Failure::validation(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        } else {
            fs::remove_file(path)?;
        }
    }
    Ok(())
}

/// Writes a seeded dataset as JSONL.
pub fn gen_data(tier: rltricks::env::DifficultyTier, n: usize, seed: u64, out: &Path, force: bool) -> CmdResult {
    let vocab = rltricks::vocab::Vocabulary::default();
    let tasks = rltricks::env::gen_dataset(tier, n, seed)?;
    claim_output(out, force)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(fs::File::create(out)?);
    rltricks::env::write_dataset(&tasks, &vocab, &mut file)?;
    std::io::Write::flush(&mut file)?;
    Ok(())
}
