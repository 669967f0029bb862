use std::path::Path;

use openworld::opencon::{em_consistency_checks, em_train, evaluate, synthetic_benchmark, OpenWorldData, TrainConfig};
use serde::{Deserialize, Serialize};

use super::require_config;
use super::score::read_set;
use crate::config::{load, require_pass, RunContext};
use crate::error::{usage, CliResult};
use crate::report::Table;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenconConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Batches checked for the loss decomposition.
    #[serde(default = "default_batches")]
    pub consistency_batches: usize,
}

fn default_batches() -> usize {
    100
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Three classes on the 16-sphere, class 0 known, 600 points.
    #[default]
    Benchmark,
    /// Embeddings with a ground-truth label on every row; every `labeled_stride`-th
    /// row (in file order) of each known class is labeled.
    File { path: String, known: usize, labeled_stride: usize },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lambda_n: Option<f64>,
    pub lambda_l: Option<f64>,
    pub lambda_u: Option<f64>,
    pub tau_n: Option<f64>,
    pub tau_l: Option<f64>,
    pub tau_u: Option<f64>,
    pub percentile: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub gamma: Option<f64>,
    pub jitter: Option<f64>,
    pub d: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, seed: u64, d_in: usize) -> TrainConfig {
        let mut c = TrainConfig::standard(seed);
        c.d_in = d_in;
        c.d = self.d.unwrap_or(d_in);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(lambda_n, lambda_l, lambda_u, tau_n, tau_l, tau_u, percentile, epochs, batch_size, learning_rate, gamma, jitter);
        c
    }
}

fn load_data(cfg_path: &Path, cfg: &OpenconConfig) -> CliResult<OpenWorldData> {
    match &cfg.data {
        DataSource::Benchmark => Ok(synthetic_benchmark(cfg.seed)?),
        DataSource::File { path, known, labeled_stride } => {
            let set = read_set(cfg_path, path)?;
            let labels = match &set.labels {
                Some(l) if l.iter().all(|&v| v >= 0) => l.iter().map(|&v| v as usize).collect::<Vec<_>>(),
                _ => return usage("data: every row needs a ground-truth label"),
            };
            if *labeled_stride == 0 {
                return usage("data: labeled_stride must be positive");
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![0usize; classes];
            let mut labeled = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if l < *known {
                    if seen[l] % labeled_stride == 0 {
                        labeled.push(i);
                    }
                    seen[l] += 1;
                }
            }
            Ok(OpenWorldData::new(set.vectors, labels, labeled, *known, classes)?)
        }
    }
}

pub fn run(ctx: &RunContext, cfg_path: Option<&Path>, lambda_n: Option<f64>) -> CliResult<()> {
    let path = require_config(cfg_path, "opencon")?;
    let mut cfg: OpenconConfig = load(path)?;
    if lambda_n.is_some() {
        cfg.train.lambda_n = lambda_n;
    }
    let data = load_data(path, &cfg)?;
    let train = cfg.train.apply(cfg.seed, data.x.ncols());
    let state = em_train(&data, &train)?;
    let mut history = Table::new(
        "opencon_history",
        &["epoch", "L_n", "L_l", "L_u", "total", "lambda", "novel_count", "novel_acc", "known_acc", "all_acc"],
    );
    for r in &state.history {
        history.push(vec![
            r.epoch.into(),
            r.loss.l_n.into(),
            r.loss.l_l.into(),
            r.loss.l_u.into(),
            r.loss.total.into(),
            r.lambda.into(),
            r.novel_count.into(),
            r.novel_acc.into(),
            r.known_acc.into(),
            r.all_acc.into(),
        ]);
    }
    let ev = evaluate(&state, &data)?;
    let mut report = Table::new("opencon_report", &["quantity", "value", "expected", "pass"]);
    let benchmark = matches!(cfg.data, DataSource::Benchmark);
    let novel_expect = if benchmark && train.lambda_n > 0.0 { ">= 0.9" } else { "reported" };
    report.push(vec!["novel accuracy".into(), ev.novel_acc.into(), novel_expect.into(), (novel_expect == "reported" || ev.novel_acc >= 0.9).into()]);
    report.push(vec!["known accuracy".into(), ev.known_acc.into(), "reported".into(), true.into()]);
    report.push(vec!["all accuracy".into(), ev.all_acc.into(), "reported".into(), true.into()]);
    match em_consistency_checks(&state, &data, &train, cfg.consistency_batches) {
        Ok(c) => {
            report.push(vec!["prototype alignment, current".into(), c.alignment_current.into(), "reported".into(), true.into()]);
            report.push(vec![
                "prototype alignment, class means".into(),
                c.alignment_optimal.into(),
                ">= current".into(),
                c.prototype_optimal.into(),
            ]);
            report.push(vec![
                "loss decomposition error".into(),
                c.decomposition_error.into(),
                "<= 1e-10".into(),
                (c.decomposition_error <= 1e-10).into(),
            ]);
            report.push(vec!["same-class pair rate".into(), c.same_class_rate.into(), "reported".into(), true.into()]);
            report.push(vec!["mean-classifier bound margin".into(), c.bound_margin.into(), "reported".into(), true.into()]);
        }
        Err(e) => report.push(vec!["consistency checks".into(), e.to_string().into(), "reported".into(), true.into()]),
    }
    report.push(vec!["stagnation warnings".into(), state.warnings.len().into(), "reported".into(), true.into()]);
    for w in &state.warnings {
        eprintln!("warning: {w}");
    }
    let tables = ctx.emit(&cfg, Some(cfg.seed), vec![history, report])?;
    require_pass(&tables)
}
