use std::fs::File;
use std::path::Path;

use openworld::data_io::{read_embeddings, read_head, ClassifierHead, EmbeddingSet};
use openworld::metrics::{aupr, auroc, fpr_at_tpr};
use openworld::scoring::{
    dice_contribution_matrix, dice_logits, dice_mask, energy_score, knn_scores, logits, msp_score, react_apply,
    react_percentile_threshold, row_scores, DiceStrategy, KnnIndex,
};
use serde::{Deserialize, Serialize};

use super::{require_config, resolve};
use crate::config::{load, RunContext};
use crate::error::{usage, CliError, CliResult};
use crate::report::Table;

pub const METHODS: [&str; 6] = ["msp", "energy", "react+energy", "dice+energy", "dice+react+energy", "knn"];

fn default_methods() -> Vec<String> {
    METHODS.iter().map(|m| m.to_string()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// In-distribution test features; also the fitting set unless `id_fit` is given.
    pub id: String,
    pub ood: String,
    #[serde(default)]
    pub id_fit: Option<String>,
    #[serde(default)]
    pub head: Option<String>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_react_percentile")]
    pub react_percentile: f64,
    #[serde(default = "default_dice_sparsity")]
    pub dice_sparsity: f64,
    #[serde(default = "default_dice_strategy")]
    pub dice_strategy: String,
    #[serde(default = "default_k")]
    pub knn_k: usize,
    #[serde(default = "default_tpr")]
    pub tpr: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_react_percentile() -> f64 {
    90.0
}
fn default_dice_sparsity() -> f64 {
    0.9
}
fn default_dice_strategy() -> String {
    "top".into()
}
fn default_k() -> usize {
    1
}
fn default_tpr() -> f64 {
    0.95
}

pub(crate) fn read_set(base: &Path, p: &str) -> CliResult<EmbeddingSet> {
    let path = resolve(base, p);
    let f = File::open(&path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    read_embeddings(f).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn normalized(set: &EmbeddingSet) -> CliResult<EmbeddingSet> {
    let mut v = set.vectors.clone();
    for (i, mut r) in v.row_iter_mut().enumerate() {
        let n = r.norm();
        if n == 0.0 {
            return usage(format!("row {i} is zero and cannot be normalized for knn"));
        }
        r /= n;
    }
    Ok(EmbeddingSet::new_normalized(v, set.labels.clone())?)
}

struct Inputs<'a> {
    fit: &'a EmbeddingSet,
    head: Option<&'a ClassifierHead>,
    cfg: &'a ScoreConfig,
}

impl Inputs<'_> {
    fn head(&self, method: &str) -> CliResult<&ClassifierHead> {
        self.head.ok_or_else(|| CliError::Usage(format!("method {method} needs a head file")))
    }

    fn mask(&self, head: &ClassifierHead) -> CliResult<nalgebra::DMatrix<f64>> {
        let strategy: DiceStrategy = self.cfg.dice_strategy.parse()?;
        let seed = match (strategy, self.cfg.seed) {
            (DiceStrategy::Random, None) => return usage("seed: required by the random mask strategy"),
            (_, s) => s.unwrap_or(0),
        };
        let v = dice_contribution_matrix(head, self.fit)?;
        Ok(dice_mask(&v, self.cfg.dice_sparsity, strategy, seed)?)
    }

    fn scores(&self, method: &str, x: &EmbeddingSet) -> CliResult<Vec<f64>> {
        let clip = || react_percentile_threshold(self.fit, self.cfg.react_percentile);
        Ok(match method {
            "msp" => row_scores(&logits(self.head(method)?, x)?, msp_score)?,
            "energy" => row_scores(&logits(self.head(method)?, x)?, energy_score)?,
            "react+energy" => row_scores(&logits(self.head(method)?, &react_apply(x, clip()?)?)?, energy_score)?,
            "dice+energy" => {
                let head = self.head(method)?;
                row_scores(&dice_logits(head, &self.mask(head)?, x)?, energy_score)?
            }
            "dice+react+energy" => {
                let head = self.head(method)?;
                row_scores(&dice_logits(head, &self.mask(head)?, &react_apply(x, clip()?)?)?, energy_score)?
            }
            "knn" => {
                let index = KnnIndex::new(normalized(self.fit)?.vectors, self.cfg.knn_k)?;
                knn_scores(&index, &normalized(x)?)?
            }
            other => return usage(format!("methods: unknown method {other:?}")),
        })
    }
}

pub fn run(ctx: &RunContext, cfg_path: Option<&Path>) -> CliResult<()> {
    let path = require_config(cfg_path, "score")?;
    let cfg: ScoreConfig = load(path)?;
    if cfg.methods.is_empty() {
        return usage("methods: at least one method required");
    }
    for m in &cfg.methods {
        if !METHODS.contains(&m.as_str()) {
            return usage(format!("methods: unknown method {m:?}"));
        }
    }
    let id = read_set(path, &cfg.id)?;
    let ood = read_set(path, &cfg.ood)?;
    let fit = match &cfg.id_fit {
        Some(p) => read_set(path, p)?,
        None => id.clone(),
    };
    let head = match &cfg.head {
        Some(p) => {
            let hp = resolve(path, p);
            let f = File::open(&hp).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", hp.display())))?;
            Some(read_head(f).map_err(|e| CliError::Usage(format!("{}: {e}", hp.display())))?)
        }
        None => None,
    };
    let inputs = Inputs {
        fit: &fit,
        head: head.as_ref(),
        cfg: &cfg,
    };
    let mut report = Table::new("score_report", &["method", "fpr_at_tpr", "auroc", "aupr"]);
    let mut tables = Vec::new();
    for m in &cfg.methods {
        let s_id = inputs.scores(m, &id)?;
        let s_ood = inputs.scores(m, &ood)?;
        report.push(vec![
            m.as_str().into(),
            fpr_at_tpr(&s_id, &s_ood, cfg.tpr)?.into(),
            auroc(&s_id, &s_ood)?.into(),
            aupr(&s_id, &s_ood)?.into(),
        ]);
        let mut t = Table::new(&format!("scores_{}", m.replace('+', "_")), &["split", "index", "score"]);
        t.echo = false;
        for (split, s) in [("id", &s_id), ("ood", &s_ood)] {
            for (i, v) in s.iter().enumerate() {
                t.push(vec![split.into(), i.into(), (*v).into()]);
            }
        }
        tables.push(t);
    }
    tables.push(report);
    ctx.emit(&cfg, cfg.seed, tables)?;
    Ok(())
}
