use std::path::Path;

use nalgebra::DVector;
use openworld::spectral::{
    build_adjacency, build_toy_graph, delta_kms, ignorance_and_coverage, kms_derivative, residual, residual_bound, sorl_toy_eigen_check,
    spectral_split, toy_residual, toy_residual_theorems, AugmentationGraph, Mixing, Node, Partition, TauParams, ToyCase,
};
use serde::{Deserialize, Serialize};

use crate::config::{load, require_pass, RunContext};
use crate::error::{usage, CliResult};
use crate::report::Table;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    #[serde(default)]
    pub case: Option<String>,
    #[serde(default)]
    pub tau1: Option<f64>,
    #[serde(default)]
    pub tau_c: Option<f64>,
    #[serde(default)]
    pub tau_s: Option<f64>,
    /// Color-dominant setting paired with a shape-dominant run, as [tau_c, tau_s].
    #[serde(default)]
    pub stronger_color: Option<[f64; 2]>,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub delta_grid: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    /// Adds eigenstructure checks at this tau_c / tau1 ratio (and at half of it).
    #[serde(default)]
    pub eigen_ratio: Option<f64>,
    #[serde(default)]
    pub shape_frac: Option<f64>,
    #[serde(default)]
    pub graph: Option<GraphSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// Labeled nodes first.
    pub nodes: Vec<NodeSpec>,
    pub tau: TauSpec,
    pub mixing: MixingSpec,
    pub k: usize,
    /// Unlabeled positions (0-based within the unlabeled block) of the target class.
    pub target: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub shape: String,
    pub color: String,
    #[serde(default)]
    pub class: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSpec {
    pub tau1: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    #[serde(default)]
    pub tau0: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixingSpec {
    Nscl { alpha: f64, beta: f64 },
    Sorl { eta_u: f64, eta_l: f64 },
}

pub struct Flags {
    pub case: Option<String>,
    pub tau_s: Option<f64>,
    pub tau_c: Option<f64>,
    pub delta_grid: Option<String>,
}

/// `start:end:count`, evenly spaced and inclusive.
pub fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("delta grid {s:?} must be start:end:count"));
    if parts.len() != 3 {
        return bad();
    }
    let (Ok(a), Ok(b), Ok(n)) = (parts[0].parse::<f64>(), parts[1].parse::<f64>(), parts[2].parse::<usize>()) else {
        return bad();
    };
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return bad();
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect())
}

fn check_table(name: &str) -> Table {
    Table::new(name, &["check", "value", "expected", "pass"])
}

fn nscl_residual(case: ToyCase, tau_c: f64, tau_s: f64) -> CliResult<f64> {
    let g = build_toy_graph(case, TauParams::new(1.0, tau_c, tau_s, 0.0))?;
    let y = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
    Ok(toy_residual(&g.t, 1, 2, &y)?)
}

fn nscl(cfg: &SpectralConfig) -> CliResult<Vec<Table>> {
    let tc = cfg.tau_c.unwrap_or(0.2);
    let ts = cfg.tau_s.unwrap_or(0.25);
    let tol = cfg.tol.unwrap_or(1e-8);
    let mut t = check_table("spectral_nscl");
    let near = |v: f64, target: f64| (v - target).abs() <= tol;
    if tc < ts && ts < 1.5 * tc {
        let [sc, ss] = cfg.stronger_color.unwrap_or([0.2, 0.15]);
        let report = toy_residual_theorems((tc, ts), (sc, ss), cfg.grid.unwrap_or(20), tol)?;
        t.push(vec!["t_bar".into(), report.t_bar.into(), "reported".into(), true.into()]);
        for c in report.checks {
            t.push(vec![c.name.into(), c.value.into(), c.expected.into(), c.pass.into()]);
        }
    } else if ts < tc {
        let r1 = nscl_residual(ToyCase::Nscl1, tc, ts)?;
        let r2 = nscl_residual(ToyCase::Nscl2, tc, ts)?;
        let r3 = nscl_residual(ToyCase::Nscl3, tc, ts)?;
        t.push(vec!["correlated label".into(), r1.into(), "0".into(), near(r1, 0.0).into()]);
        t.push(vec!["unrelated label".into(), r2.into(), "0".into(), near(r2, 0.0).into()]);
        if tc < 1.5 * ts {
            t.push(vec!["spurious-shape label minus unrelated label".into(), (r3 - r2).into(), "1".into(), near(r3 - r2, 1.0).into()]);
        } else {
            t.push(vec!["spurious-shape label minus unrelated label".into(), (r3 - r2).into(), "reported".into(), true.into()]);
        }
    } else {
        t.push(vec![
            "regime".into(),
            (ts / tc).into(),
            "tau_s < tau_c, or tau_c < tau_s < 1.5 tau_c".into(),
            false.into(),
        ]);
    }
    Ok(vec![t])
}

fn sorl(cfg: &SpectralConfig) -> CliResult<Vec<Table>> {
    let tau = TauParams::new(cfg.tau1.unwrap_or(0.45), cfg.tau_c.unwrap_or(0.3), cfg.tau_s.unwrap_or(0.25), 0.0);
    let k = cfg.k.unwrap_or(4);
    let grid = parse_grid(cfg.delta_grid.as_deref().unwrap_or("0:0.5:11"))?;
    if grid.iter().any(|d| *d < 0.0) {
        return usage("delta grid must be non-negative");
    }
    let bundle = build_adjacency(&build_toy_graph(ToyCase::Sorl, tau)?, None)?;
    let partition = Partition::new(vec![vec![0, 1], vec![2, 3], vec![4, 5]], 6)?;
    let mut sweep = Table::new("spectral_kms_sweep", &["delta", "delta_kms"]);
    for &d in &grid {
        sweep.push(vec![d.into(), delta_kms(&bundle, &partition, k, d)?.into()]);
    }
    let mut checks = check_table("spectral_sorl_checks");
    let at_zero = delta_kms(&bundle, &partition, k, 0.0)?;
    checks.push(vec!["delta_kms at 0".into(), at_zero.into(), "0".into(), (at_zero == 0.0).into()]);
    let der = kms_derivative(&bundle, &partition, k)?;
    checks.push(vec!["spectral gap".into(), der.gap.into(), "> 10".into(), (der.gap > 10.0).into()]);
    checks.push(vec!["derivative, analytic".into(), der.analytic.into(), "reported".into(), true.into()]);
    checks.push(vec!["derivative, central difference".into(), der.finite_difference.into(), "reported".into(), true.into()]);
    checks.push(vec!["derivative sign agreement".into(), (der.analytic * der.finite_difference).into(), "> 0".into(), der.signs_agree().into()]);
    let rel = der.relative_error();
    checks.push(vec!["derivative relative error".into(), rel.into(), "<= 0.2".into(), (rel <= 0.2).into()]);
    for (i, c) in der.classes.iter().enumerate() {
        checks.push(vec![format!("class {i} improvement term").into(), c.delta.into(), "reported".into(), true.into()]);
    }
    checks.push(vec!["simplified rate".into(), der.simplified_rate.into(), "reported".into(), true.into()]);
    if let Some(r) = cfg.eigen_ratio {
        let frac = cfg.shape_frac.unwrap_or(0.8);
        let e = sorl_toy_eigen_check(r, frac)?;
        let h = sorl_toy_eigen_check(r / 2.0, frac)?;
        checks.push(vec!["labeled principal angle".into(), e.labeled_angle.into(), "< 0.2".into(), (e.labeled_angle < 0.2).into()]);
        checks.push(vec!["unlabeled principal angle".into(), e.unlabeled_angle.into(), "< 0.2".into(), (e.unlabeled_angle < 0.2).into()]);
        checks.push(vec![
            "third eigenvalue error".into(),
            e.third_error.into(),
            format!("<= {}", e.eigen_limit).into(),
            e.eigen_ok().into(),
        ]);
        let halved = h.labeled_angle <= e.labeled_angle / 2.0 + 1e-12;
        checks.push(vec!["labeled angle at half ratio".into(), h.labeled_angle.into(), "<= half".into(), halved.into()]);
    }
    Ok(vec![sweep, checks])
}

fn graph(spec: &GraphSpec) -> CliResult<Vec<Table>> {
    let nodes: Vec<Node> = spec.nodes.iter().map(|n| Node::new(&n.shape, &n.color, n.class)).collect();
    let n_l = nodes.iter().take_while(|n| n.class.is_some()).count();
    if nodes[n_l..].iter().any(|n| n.class.is_some()) {
        return usage("graph: labeled nodes must come first");
    }
    let tau = TauParams::new(spec.tau.tau1, spec.tau.tau_c, spec.tau.tau_s, spec.tau.tau0);
    let mixing = match spec.mixing {
        MixingSpec::Nscl { alpha, beta } => Mixing::Nscl { alpha, beta },
        MixingSpec::Sorl { eta_u, eta_l } => Mixing::Sorl { eta_u, eta_l },
    };
    let g = AugmentationGraph::new(nodes, tau, mixing)?;
    let n_u = g.n() - n_l;
    if spec.k == 0 || spec.k > g.n() {
        return usage(format!("graph: need 1 <= k <= {}", g.n()));
    }
    if spec.target.iter().any(|&i| i >= n_u) || spec.target.is_empty() {
        return usage("graph: target positions must be non-empty and within the unlabeled block");
    }
    let bundle = build_adjacency(&g, None)?;
    let split = spectral_split(&bundle, spec.k, n_l)?;
    let mut y = DVector::zeros(n_u);
    for &i in &spec.target {
        y[i] = 1.0;
    }
    let mut spectrum = Table::new("spectral_graph_spectrum", &["index", "value"]);
    for (i, v) in split.values.iter().enumerate() {
        spectrum.push(vec![i.into(), (*v).into()]);
    }
    let r = residual(&split.u_star(), &y)?;
    let b = residual_bound(&split, &y)?;
    let mut t = check_table("spectral_graph_checks");
    t.push(vec!["residual".into(), r.into(), "reported".into(), true.into()]);
    t.push(vec!["residual bound".into(), b.into(), ">= residual - 1e-8".into(), (r <= b + 1e-8).into()]);
    if n_l > 0 {
        let d = ignorance_and_coverage(&split, &y)?;
        t.push(vec!["ignorance degree".into(), d.ignorance.into(), "reported".into(), true.into()]);
        match d.coverage {
            Some(c) => t.push(vec!["coverage".into(), c.into(), "reported".into(), true.into()]),
            None => t.push(vec!["coverage".into(), "undefined".into(), "reported".into(), true.into()]),
        }
    }
    Ok(vec![spectrum, t])
}

pub fn run(ctx: &RunContext, cfg_path: Option<&Path>, flags: Flags) -> CliResult<()> {
    let mut cfg: SpectralConfig = match cfg_path {
        Some(p) => load(p)?,
        None => SpectralConfig::default(),
    };
    cfg.case = flags.case.or(cfg.case);
    cfg.tau_s = flags.tau_s.or(cfg.tau_s);
    cfg.tau_c = flags.tau_c.or(cfg.tau_c);
    cfg.delta_grid = flags.delta_grid.or(cfg.delta_grid);
    let tables = match cfg.case.as_deref() {
        Some("nscl") => nscl(&cfg)?,
        Some("sorl") => sorl(&cfg)?,
        Some("graph") => match &cfg.graph {
            Some(g) => graph(g)?,
            None => return usage("graph: case graph needs a graph object"),
        },
        Some(other) => return usage(format!("case: unknown case {other:?} (nscl, sorl, graph)")),
        None => return usage("case: required (nscl, sorl, graph)"),
    };
    let tables = ctx.emit(&cfg, None, tables)?;
    require_pass(&tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:0.5:11").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 0.5);
        assert!((g[1] - 0.05).abs() < 1e-15);
        assert_eq!(parse_grid("1:2:1").unwrap(), vec![1.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }
}
