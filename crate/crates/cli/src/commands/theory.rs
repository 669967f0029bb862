use std::path::Path;

use nalgebra::DMatrix;
use openworld::data_io::{gen_unit_contributions, SyntheticKind, SyntheticSpec};
use openworld::rng::{seeded, sub_seed};
use openworld::theory::{
    correlated_samples, dice_var_reduction, dice_var_reduction_correlated, empirical_var_reduction, esn_rect_clip_mean, esn_rect_mean,
    id_reduction, ood_reduction, rect_gauss_mean, rectification_mc, EsnParams,
};
use serde::{Deserialize, Serialize};

use super::require_config;
use crate::config::{load, require_pass, RunContext};
use crate::error::{usage, CliResult};
use crate::report::Table;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_shards")]
    pub shards: usize,
    /// Allowed |analytic - MC| in standard errors.
    #[serde(default = "default_se_multiple")]
    pub se_multiple: f64,
    #[serde(default = "default_mu")]
    pub mu: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: Vec<f64>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_c")]
    pub c: Vec<f64>,
    #[serde(default = "default_dice")]
    pub dice: Option<DiceVariance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceVariance {
    pub units: usize,
    pub samples: usize,
    pub sd_min: f64,
    pub sd_max: f64,
    /// Correlated case uses `cov_ij = sd_i sd_j rho^|i-j|`.
    pub rho: f64,
    pub max_rel_err: f64,
}

fn default_samples() -> usize {
    1_000_000
}
fn default_shards() -> usize {
    8
}
fn default_se_multiple() -> f64 {
    4.0
}
fn default_mu() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}
fn default_sigma() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_eps() -> Vec<f64> {
    vec![0.0, -0.1, -0.25, -0.4]
}
fn default_c() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_dice() -> Option<DiceVariance> {
    Some(DiceVariance {
        units: 10,
        samples: 1_000_000,
        sd_min: 0.1,
        sd_max: 2.0,
        rho: 0.5,
        max_rel_err: 0.05,
    })
}

pub const ESN_COLUMNS: [&str; 16] = [
    "mu",
    "sigma",
    "eps",
    "c",
    "rect_analytic",
    "rect_mc",
    "rect_se",
    "clip_analytic",
    "clip_mc",
    "clip_se",
    "reduction_analytic",
    "reduction_mc",
    "reduction_se",
    "id_formula",
    "max_se_multiple",
    "pass",
];

fn esn_grid(cfg: &TheoryConfig) -> CliResult<(Table, Table)> {
    let mut t = Table::new("theory_rectification", &ESN_COLUMNS);
    let mut idx = 0u64;
    for &mu in &cfg.mu {
        for &sigma in &cfg.sigma {
            for &eps in &cfg.eps {
                let p = EsnParams::new(mu, sigma, eps)?;
                let mc = rectification_mc(&p, &cfg.c, cfg.samples, sub_seed(cfg.seed, idx), cfg.shards);
                idx += 1;
                let rect = esn_rect_mean(&p);
                for (j, &c) in cfg.c.iter().enumerate() {
                    let clip = esn_rect_clip_mean(&p, c)?;
                    let red = ood_reduction(&p, c)?;
                    let idf = id_reduction(mu, sigma, c);
                    let z = mc.rect_mean.z_score(rect).max(mc.clip_mean[j].z_score(clip)).max(mc.reduction[j].z_score(red));
                    let mut pass = z <= cfg.se_multiple;
                    if eps == 0.0 {
                        pass &= (red - idf).abs() <= 1e-12 && (rect - rect_gauss_mean(mu, sigma)).abs() <= 1e-12;
                    }
                    t.push(vec![
                        mu.into(),
                        sigma.into(),
                        eps.into(),
                        c.into(),
                        rect.into(),
                        mc.rect_mean.mean.into(),
                        mc.rect_mean.se.into(),
                        clip.into(),
                        mc.clip_mean[j].mean.into(),
                        mc.clip_mean[j].se.into(),
                        red.into(),
                        mc.reduction[j].mean.into(),
                        mc.reduction[j].se.into(),
                        idf.into(),
                        z.into(),
                        pass.into(),
                    ]);
                }
            }
        }
    }
    let mut checks = Table::new("theory_monotonicity", &["check", "violations", "pass"]);
    let (mut by_eps, mut by_sigma) = (0usize, 0usize);
    for &mu in &cfg.mu {
        for &c in &cfg.c {
            for &sigma in &cfg.sigma {
                let mut eps = cfg.eps.clone();
                eps.sort_by(|a, b| b.total_cmp(a));
                let vals: Vec<f64> = eps.iter().map(|&e| ood_reduction(&EsnParams::new(mu, sigma, e).unwrap(), c).unwrap()).collect();
                by_eps += vals.windows(2).filter(|w| w[1] < w[0] - 1e-12).count();
            }
            for &e in &cfg.eps {
                let mut sig = cfg.sigma.clone();
                sig.sort_by(f64::total_cmp);
                let vals: Vec<f64> = sig.iter().map(|&s| ood_reduction(&EsnParams::new(mu, s, e).unwrap(), c).unwrap()).collect();
                by_sigma += vals.windows(2).filter(|w| w[1] < w[0] - 1e-12).count();
            }
        }
    }
    checks.push(vec!["reduction non-decreasing in -eps".into(), by_eps.into(), (by_eps == 0).into()]);
    checks.push(vec!["reduction non-decreasing in sigma".into(), by_sigma.into(), (by_sigma == 0).into()]);
    Ok((t, checks))
}

/// Seeded unit standard deviations, uniform in `[sd_min, sd_max]`.
pub fn unit_sds(units: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seeded(seed);
    (0..units).map(|_| rng.random_range(lo..=hi)).collect()
}

pub fn dice_table(d: &DiceVariance, seed: u64) -> CliResult<Table> {
    if d.units < 2 || d.samples < 2 || !(d.sd_min > 0.0 && d.sd_max >= d.sd_min) || !(-1.0 < d.rho && d.rho < 1.0) {
        return usage("dice: need units >= 2, samples >= 2, 0 < sd_min <= sd_max, |rho| < 1");
    }
    let sds = unit_sds(d.units, d.sd_min, d.sd_max, sub_seed(seed, 100));
    let means = vec![0.5; d.units];
    let spec = SyntheticSpec {
        kind: SyntheticKind::UnitContributions {
            means: means.clone(),
            sds: sds.clone(),
            count: d.samples,
        },
        seed: sub_seed(seed, 101),
    };
    let indep = gen_unit_contributions(&spec)?;
    let vars: Vec<f64> = sds.iter().map(|s| s * s).collect();
    let cov = DMatrix::from_fn(d.units, d.units, |i, j| sds[i] * sds[j] * d.rho.powi((i as i32 - j as i32).abs()));
    let corr = correlated_samples(&means, &cov, d.samples, sub_seed(seed, 102))?;
    let mut t = Table::new("theory_dice_variance", &["case", "t", "analytic", "empirical", "rel_err", "pass"]);
    for cut in 1..d.units {
        let (a, e) = dice_var_reduction(&vars, cut, &indep)?;
        let rel = (e - a).abs() / a;
        t.push(vec!["independent".into(), cut.into(), a.into(), e.into(), rel.into(), (rel < d.max_rel_err).into()]);
    }
    for cut in 1..d.units {
        let a = dice_var_reduction_correlated(&cov, cut)?;
        let e = empirical_var_reduction(&corr, cut);
        let rel = (e - a).abs() / a.abs();
        t.push(vec!["correlated".into(), cut.into(), a.into(), e.into(), rel.into(), (rel < d.max_rel_err).into()]);
    }
    Ok(t)
}

pub fn run(ctx: &RunContext, cfg_path: Option<&Path>) -> CliResult<()> {
    let cfg: TheoryConfig = load(require_config(cfg_path, "theory")?)?;
    if cfg.samples < 2 || cfg.shards == 0 {
        return usage("samples must be at least 2 and shards positive");
    }
    if cfg.mu.is_empty() || cfg.sigma.is_empty() || cfg.eps.is_empty() || cfg.c.is_empty() {
        return usage("mu, sigma, eps and c grids must be non-empty");
    }
    if cfg.c.iter().any(|c| !(*c > 0.0)) {
        return usage("c: clip levels must be positive");
    }
    let (grid, mono) = esn_grid(&cfg)?;
    let mut tables = vec![grid, mono];
    if let Some(d) = &cfg.dice {
        tables.push(dice_table(d, cfg.seed)?);
    }
    let tables = ctx.emit(&cfg, Some(cfg.seed), tables)?;
    require_pass(&tables)
}
