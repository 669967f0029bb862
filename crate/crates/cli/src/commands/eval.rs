use std::fs;
use std::path::Path;

use openworld::metrics::{aupr, auroc, clustering_accuracy, fpr_at_tpr, kmeans};
use serde::{Deserialize, Serialize};

use super::score::read_set;
use super::{require_config, resolve};
use crate::config::{load, RunContext};
use crate::error::{usage, CliError, CliResult};
use crate::report::{Cell, Table};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Score tables with columns split (id/ood), index, score.
    #[serde(default)]
    pub scores: Vec<String>,
    #[serde(default = "default_tpr")]
    pub tpr: f64,
    #[serde(default)]
    pub clustering: Option<ClusteringConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Embeddings with a ground-truth label on every row.
    pub embeddings: String,
    pub k: usize,
    pub seed: u64,
}

fn default_tpr() -> f64 {
    0.95
}

fn split_scores(t: &Table) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let (Some(js), Some(jv)) = (t.column("split"), t.column("score")) else {
        return usage(format!("{}: needs split and score columns", t.name));
    };
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for r in &t.rows {
        let v = r[jv].as_f64().ok_or_else(|| CliError::Usage(format!("{}: non-numeric score", t.name)))?;
        match &r[js] {
            Cell::Text(s) if s == "id" => id.push(v),
            Cell::Text(s) if s == "ood" => ood.push(v),
            other => return usage(format!("{}: unknown split {other:?}", t.name)),
        }
    }
    Ok((id, ood))
}

pub fn run(ctx: &RunContext, cfg_path: Option<&Path>) -> CliResult<()> {
    let path = require_config(cfg_path, "eval")?;
    let cfg: EvalConfig = load(path)?;
    if cfg.scores.is_empty() && cfg.clustering.is_none() {
        return usage("nothing to evaluate: give scores or clustering");
    }
    let mut report = Table::new("eval_report", &["source", "metric", "value"]);
    for s in &cfg.scores {
        let p = resolve(path, s);
        let text = fs::read_to_string(&p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
        let name = p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (id, ood) = split_scores(&Table::from_csv(&name, &text)?)?;
        report.push(vec![name.clone().into(), format!("fpr_at_tpr_{}", cfg.tpr).into(), fpr_at_tpr(&id, &ood, cfg.tpr)?.into()]);
        report.push(vec![name.clone().into(), "auroc".into(), auroc(&id, &ood)?.into()]);
        report.push(vec![name.into(), "aupr".into(), aupr(&id, &ood)?.into()]);
    }
    let mut seed = None;
    if let Some(c) = &cfg.clustering {
        let set = read_set(path, &c.embeddings)?;
        let labels = set.labels.as_ref().ok_or_else(|| CliError::Usage("clustering: embeddings carry no labels".into()))?;
        if labels.iter().any(|&l| l < 0) {
            return usage("clustering: every row needs a ground-truth label");
        }
        let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let km = kmeans(&set.vectors, c.k, c.seed, None)?;
        report.push(vec![c.embeddings.as_str().into(), "kmeans_accuracy".into(), clustering_accuracy(&km.labels, &truth)?.into()]);
        report.push(vec![c.embeddings.as_str().into(), "kmeans_inertia".into(), km.inertia.into()]);
        seed = Some(c.seed);
    }
    ctx.emit(&cfg, seed, vec![report])?;
    Ok(())
}
