use std::path::Path;

use nalgebra::DMatrix;
use openworld::data_io::{gen_esn_samples, gen_sphere_mixture, gen_unit_contributions, write_embeddings, EmbeddingSet, SyntheticKind, SyntheticSpec};
use openworld::rng::sub_seed;
use serde::{Deserialize, Serialize};

use super::require_config;
use crate::config::{config_hash, load, RunContext};
use crate::error::{usage, CliResult};
use crate::report::{write_atomic, Table};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub datasets: Vec<Dataset>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Dataset {
    SphereMixture {
        name: String,
        centers: Vec<Vec<f64>>,
        sigma: f64,
        counts: Vec<usize>,
    },
    EsnSamples {
        name: String,
        mu: f64,
        sigma: f64,
        eps: f64,
        count: usize,
    },
    UnitContributions {
        name: String,
        means: Vec<f64>,
        sds: Vec<f64>,
        count: usize,
    },
}

impl Dataset {
    fn name(&self) -> &str {
        match self {
            Dataset::SphereMixture { name, .. } | Dataset::EsnSamples { name, .. } | Dataset::UnitContributions { name, .. } => name,
        }
    }

    fn kind_tag(&self) -> &'static str {
        match self {
            Dataset::SphereMixture { .. } => "sphere-mixture",
            Dataset::EsnSamples { .. } => "esn-samples",
            Dataset::UnitContributions { .. } => "unit-contributions",
        }
    }

    /// Each dataset draws from its own sub-stream of the run seed.
    fn generate(&self, seed: u64) -> CliResult<EmbeddingSet> {
        let kind = match self {
            Dataset::SphereMixture { centers, sigma, counts, .. } => SyntheticKind::SphereMixture {
                centers: centers.clone(),
                sigma: *sigma,
                counts: counts.clone(),
            },
            Dataset::EsnSamples { mu, sigma, eps, count, .. } => SyntheticKind::EsnSamples {
                mu: *mu,
                sigma: *sigma,
                eps: *eps,
                count: *count,
            },
            Dataset::UnitContributions { means, sds, count, .. } => SyntheticKind::UnitContributions {
                means: means.clone(),
                sds: sds.clone(),
                count: *count,
            },
        };
        let spec = SyntheticSpec { kind, seed };
        Ok(match self {
            Dataset::SphereMixture { .. } => gen_sphere_mixture(&spec)?,
            Dataset::EsnSamples { .. } => {
                let xs = gen_esn_samples(&spec)?;
                EmbeddingSet::new(DMatrix::from_column_slice(xs.len(), 1, &xs), None)?
            }
            Dataset::UnitContributions { .. } => EmbeddingSet::new(gen_unit_contributions(&spec)?, None)?,
        })
    }
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    name: &'a str,
    kind: &'a str,
    file: String,
    rows: usize,
    dim: usize,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seed: u64,
    files: Vec<ManifestEntry<'a>>,
}

pub fn run(ctx: &RunContext, cfg: Option<&Path>) -> CliResult<()> {
    let cfg: GenConfig = load(require_config(cfg, "gen")?)?;
    if cfg.datasets.is_empty() {
        return usage("datasets: at least one dataset required");
    }
    let mut names: Vec<&str> = cfg.datasets.iter().map(Dataset::name).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return usage("datasets: names must be unique");
    }
    if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\', '.'])) {
        return usage("datasets: names must be plain file stems");
    }
    let mut entries = Vec::new();
    let mut table = Table::new("gen_manifest", &["name", "kind", "file", "rows", "dim"]);
    for (i, d) in cfg.datasets.iter().enumerate() {
        let seed = sub_seed(cfg.seed, i as u64);
        let set = d.generate(seed).map_err(|e| match e {
            crate::error::CliError::Usage(m) => crate::error::CliError::Usage(format!("dataset {}: {m}", d.name())),
            other => other,
        })?;
        let file = format!("{}.emb", d.name());
        let mut bytes = Vec::new();
        write_embeddings(&set, &mut bytes)?;
        write_atomic(&ctx.out.join(&file), &bytes)?;
        table.push(vec![d.name().into(), d.kind_tag().into(), file.clone().into(), set.n().into(), set.d().into()]);
        entries.push(ManifestEntry {
            name: d.name(),
            kind: d.kind_tag(),
            file,
            rows: set.n(),
            dim: set.d(),
            seed,
        });
    }
    let manifest = Manifest {
        config_sha256: config_hash(&cfg),
        seed: cfg.seed,
        files: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&ctx.out.join("manifest.json"), json.as_bytes())?;
    ctx.emit(&cfg, Some(cfg.seed), vec![table])?;
    Ok(())
}
