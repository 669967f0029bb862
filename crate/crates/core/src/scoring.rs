//! Post-hoc OOD scores: MSP, energy, ReAct rectification, DICE
//! sparsification, k-th nearest neighbour distance, and the threshold rule.

use nalgebra::DMatrix;
use rand::seq::index::sample;

use crate::data_io::{ClassifierHead, EmbeddingSet};
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::stats::{ceil_count, nearest_rank};

/// Row i is `W^T h_i + b`, accumulated in f64.
pub fn logits(head: &ClassifierHead, features: &EmbeddingSet) -> Result<DMatrix<f64>> {
    weighted_logits(&head.w, head, features)
}

fn weighted_logits(w: &DMatrix<f64>, head: &ClassifierHead, features: &EmbeddingSet) -> Result<DMatrix<f64>> {
    if features.d() != w.nrows() {
        return Err(Error::Shape(format!(
            "features have dimension {} but W has {} rows",
            features.d(),
            w.nrows()
        )));
    }
    let mut out = &features.vectors * w;
    for mut row in out.row_iter_mut() {
        row += head.b.transpose();
    }
    Ok(out)
}

fn check_row(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return invalid("empty logit row");
    }
    if row.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite logit");
    }
    Ok(row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Maximum softmax probability.
pub fn msp_score(row: &[f64]) -> Result<f64> {
    if row.len() < 2 {
        return invalid("msp needs at least two logits");
    }
    let max = check_row(row)?;
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    Ok(1.0 / denom)
}

/// `log sum_c exp(f_c)`; higher means more in-distribution.
pub fn energy_score(row: &[f64]) -> Result<f64> {
    let max = check_row(row)?;
    Ok(max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

pub fn row_scores(m: &DMatrix<f64>, f: fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    m.row_iter()
        .map(|r| f(&r.iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Clip level from the nearest-rank percentile of all ID activations.
pub fn react_percentile_threshold(id_features: &EmbeddingSet, p: f64) -> Result<f64> {
    if id_features.n() == 0 {
        return invalid("no ID activations");
    }
    nearest_rank(id_features.vectors.as_slice(), p)
}

/// Elementwise `min(x, c)`.
pub fn react_apply(features: &EmbeddingSet, c: f64) -> Result<EmbeddingSet> {
    if !(c > 0.0) {
        return invalid(format!("clip level must be positive, got {c}"));
    }
    let mut out = features.clone();
    out.vectors.apply(|x| *x = x.min(c));
    out.normalized = false;
    Ok(out)
}

/// `V[i, c] = W[i, c] * mean_i` with the mean taken over ID rows.
pub fn dice_contribution_matrix(head: &ClassifierHead, id_features: &EmbeddingSet) -> Result<DMatrix<f64>> {
    if id_features.n() == 0 {
        return invalid("no ID features");
    }
    if id_features.d() != head.dim() {
        return Err(Error::Shape("feature dimension differs from head".into()));
    }
    let means: Vec<f64> = id_features.vectors.column_iter().map(|c| c.mean()).collect();
    Ok(DMatrix::from_fn(head.dim(), head.classes(), |i, c| head.w[(i, c)] * means[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceStrategy {
    Top,
    Bottom,
    Random,
    TopBottom,
}

impl std::str::FromStr for DiceStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(DiceStrategy::Top),
            "bottom" => Ok(DiceStrategy::Bottom),
            "random" => Ok(DiceStrategy::Random),
            "top+bottom" => Ok(DiceStrategy::TopBottom),
            other => invalid(format!("unknown mask strategy {other:?}")),
        }
    }
}

/// Number of kept entries for sparsity `p` over `cells` weights.
pub fn dice_keep_count(p: f64, cells: usize) -> usize {
    ((1.0 - p) * cells as f64).round() as usize
}

/// 0/1 mask keeping `round((1-p) d C)` entries of V. Ties go to the lower
/// row-major flat index.
pub fn dice_mask(v: &DMatrix<f64>, p: f64, strategy: DiceStrategy, seed: u64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&p) {
        return invalid(format!("sparsity {p} outside [0, 1)"));
    }
    let (d, c) = v.shape();
    let cells = d * c;
    let k = dice_keep_count(p, cells);
    let flat = |idx: usize| v[(idx / c, idx % c)];
    let mut desc: Vec<usize> = (0..cells).collect();
    desc.sort_by(|&a, &b| flat(b).total_cmp(&flat(a)).then(a.cmp(&b)));
    let mut asc: Vec<usize> = (0..cells).collect();
    asc.sort_by(|&a, &b| flat(a).total_cmp(&flat(b)).then(a.cmp(&b)));

    let mut keep = vec![false; cells];
    match strategy {
        DiceStrategy::Top => desc[..k].iter().for_each(|&i| keep[i] = true),
        DiceStrategy::Bottom => asc[..k].iter().for_each(|&i| keep[i] = true),
        DiceStrategy::Random => {
            let mut rng = seeded(seed);
            sample(&mut rng, cells, k).into_iter().for_each(|i| keep[i] = true);
        }
        DiceStrategy::TopBottom => {
            let top = k - k / 2;
            desc[..top].iter().for_each(|&i| keep[i] = true);
            let mut placed = 0;
            for &i in &asc {
                if placed == k / 2 {
                    break;
                }
                if !keep[i] {
                    keep[i] = true;
                    placed += 1;
                }
            }
        }
    }
    Ok(DMatrix::from_fn(d, c, |i, j| if keep[i * c + j] { 1.0 } else { 0.0 }))
}

/// `(M . W)^T h + b`.
pub fn dice_logits(head: &ClassifierHead, mask: &DMatrix<f64>, features: &EmbeddingSet) -> Result<DMatrix<f64>> {
    if mask.shape() != head.w.shape() {
        return Err(Error::Shape("mask shape differs from W".into()));
    }
    weighted_logits(&head.w.component_mul(mask), head, features)
}

/// Exact brute-force k-NN index over unit-norm rows.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    z: DMatrix<f64>,
    k: usize,
}

impl KnnIndex {
    pub fn new(z: DMatrix<f64>, k: usize) -> Result<Self> {
        if z.nrows() == 0 {
            return invalid("empty k-NN index");
        }
        if k == 0 || k > z.nrows() {
            return invalid(format!("k = {k} must lie in [1, {}]", z.nrows()));
        }
        for (i, row) in z.row_iter().enumerate() {
            if (row.norm() - 1.0).abs() > 1e-9 {
                return invalid(format!("index row {i} is not unit norm"));
            }
        }
        Ok(KnnIndex { z, k })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Distance from `query` to its k-th nearest index row.
    pub fn kth_distance(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.z.ncols() {
            return Err(Error::Shape("query dimension differs from index".into()));
        }
        let mut dists: Vec<f64> = self
            .z
            .row_iter()
            .map(|r| r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let (_, kth, _) = dists.select_nth_unstable_by(self.k - 1, f64::total_cmp);
        Ok(*kth)
    }
}

/// Negated k-th nearest neighbour distance.
pub fn knn_score(index: &KnnIndex, query: &[f64]) -> Result<f64> {
    Ok(-index.kth_distance(query)?)
}

pub fn knn_scores(index: &KnnIndex, queries: &EmbeddingSet) -> Result<Vec<f64>> {
    (0..queries.n()).map(|i| knn_score(index, &queries.row(i))).collect()
}

/// Largest λ with at least `q * n` scores at or above it.
pub fn threshold_at_tpr(id_scores: &[f64], q: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return invalid("no ID scores");
    }
    if !(q > 0.0 && q <= 1.0) {
        return invalid(format!("tpr {q} outside (0, 1]"));
    }
    let mut desc = id_scores.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let m = ceil_count(q, desc.len()).clamp(1, desc.len());
    Ok(desc[m - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    Id,
    Ood,
}

/// ID iff `score >= lambda`.
pub fn detect(score: f64, lambda: f64) -> Detection {
    if score >= lambda {
        Detection::Id
    } else {
        Detection::Ood
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnTheoryParams {
    pub beta: f64,
    pub eps: f64,
    pub c0: f64,
    pub cb: f64,
    pub m: u32,
    pub n: usize,
}

impl KnnTheoryParams {
    pub fn new(beta: f64, eps: f64, m: u32, n: usize) -> Self {
        KnnTheoryParams {
            beta,
            eps,
            c0: 1.0,
            cb: 1.0,
            m,
            n,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return invalid("beta must lie in (0, 1)");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return invalid("eps must lie in (0, 1)");
        }
        if !(self.c0 > 0.0 && self.cb > 0.0) {
            return invalid("c0 and cb must be positive");
        }
        if self.m < 2 {
            return invalid("dimension m must be at least 2");
        }
        if self.n == 0 {
            return invalid("n must be positive");
        }
        Ok(())
    }

    /// Density cutoff above which the Bayes posterior reaches beta.
    pub fn density_cutoff(&self) -> f64 {
        self.beta * self.eps * self.c0 / ((1.0 - self.beta) * (1.0 - self.eps))
    }

    pub fn density_estimate(&self, k: usize, r_k: f64) -> f64 {
        k as f64 / (self.cb * self.n as f64 * r_k.powi(self.m as i32 - 1))
    }
}

/// `-((1-β)(1-ε)k / (β ε c_b n ĉ0))^(1/(m-1))`.
pub fn knn_bayes_lambda(params: &KnnTheoryParams, k: usize) -> Result<f64> {
    params.validate()?;
    if k == 0 {
        return invalid("k must be positive");
    }
    let p = params;
    let ratio = (1.0 - p.beta) * (1.0 - p.eps) * k as f64 / (p.beta * p.eps * p.cb * p.n as f64 * p.c0);
    Ok(-ratio.powf(1.0 / (p.m as f64 - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equivalence {
    Agree { id: bool },
    Disagree { knn: bool, bayes: bool },
    ZeroDistance,
}

/// Compares `1{-r_k >= λ}` with the plug-in Bayes rule `1{p̂(g=1|z) >= β}`.
pub fn knn_bayes_equivalence(index: &KnnIndex, queries: &EmbeddingSet, params: &KnnTheoryParams) -> Result<Vec<Equivalence>> {
    params.validate()?;
    if params.n != index.n() {
        return invalid(format!("params.n = {} but index holds {}", params.n, index.n()));
    }
    let k = index.k();
    let lambda = knn_bayes_lambda(params, k)?;
    let cutoff = params.density_cutoff();
    (0..queries.n())
        .map(|i| {
            let r = index.kth_distance(&queries.row(i))?;
            if r == 0.0 {
                return Ok(Equivalence::ZeroDistance);
            }
            let knn = -r >= lambda;
            let p_in = params.density_estimate(k, r);
            let p_out = if p_in < cutoff { params.c0 } else { 0.0 };
            let post = (1.0 - params.eps) * p_in / ((1.0 - params.eps) * p_in + params.eps * p_out);
            let bayes = post >= params.beta;
            Ok(if knn == bayes {
                Equivalence::Agree { id: knn }
            } else {
                Equivalence::Disagree { knn, bayes }
            })
        })
        .collect()
}
