pub mod eval;
pub mod gen;
pub mod opencon;
pub mod score;
pub mod spectral;
pub mod theory;

use std::path::Path;

use crate::error::{usage, CliResult};

pub(crate) fn require_config<'a>(cfg: Option<&'a Path>, command: &str) -> CliResult<&'a Path> {
    match cfg {
        Some(p) => Ok(p),
        None => usage(format!("{command} needs --config")),
    }
}

/// Input paths in a config are relative to the config file.
pub(crate) fn resolve(cfg: &Path, p: &str) -> std::path::PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    cfg.parent().unwrap_or(Path::new(".")).join(p)
}
