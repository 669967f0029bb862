use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::report::{write_tables, Table};

/// Parses a JSON config; unknown keys and missing fields are usage errors.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

/// SHA-256 of the effective config's canonical JSON.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Where a command writes, and what its report footers record.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub quiet: bool,
}

impl RunContext {
    /// Stamps footers, writes CSV and markdown, and echoes markdown unless quiet.
    pub fn emit<T: Serialize>(&self, cfg: &T, seed: Option<u64>, mut tables: Vec<Table>) -> CliResult<Vec<Table>> {
        let hash = config_hash(cfg);
        let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        for t in &mut tables {
            t.footer.push(format!("config_sha256={hash}"));
            t.footer.push(format!("seed={seed}"));
        }
        write_tables(&self.out, &tables)?;
        if !self.quiet {
            for t in tables.iter().filter(|t| t.echo) {
                println!("{}", t.to_markdown());
            }
        }
        Ok(tables)
    }
}

/// Fails with exit code 1 when any table has a failing `pass` cell.
pub fn require_pass(tables: &[Table]) -> CliResult<()> {
    let failed: Vec<&str> = tables.iter().filter(|t| !t.all_pass()).map(|t| t.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failing rows in {}", failed.join(", "))))
    }
}
