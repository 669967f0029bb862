use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::graph::AdjacencyBundle;
use super::split::sorted_eigen;

/// `||A_norm - F F^T||_F^2`.
pub fn lmf_loss(f: &DMatrix<f64>, normalized: &DMatrix<f64>) -> Result<f64> {
    if f.nrows() != normalized.nrows() || normalized.nrows() != normalized.ncols() {
        return Err(Error::Shape("factor rows must match the square adjacency".into()));
    }
    Ok((normalized - f * f.transpose()).norm_squared())
}

/// Rank-k factor `V_k sqrt(lambda_k)` of the top eigenpairs (negative values clamp to 0).
pub fn optimal_factor(normalized: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = normalized.nrows();
    if k == 0 || k > n {
        return Err(Error::Validation(format!("need 1 <= k <= {n}")));
    }
    let (values, vectors) = sorted_eigen(normalized);
    let mut f = vectors.columns(0, k).into_owned();
    for j in 0..k {
        let s = values[j].max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok((f, values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expansion {
    /// `-2 sum w_u(x,x') f(x).f(x')`
    pub unlabeled_pull: f64,
    /// `-2 sum w_l(x,x') f(x).f(x')`
    pub labeled_pull: f64,
    /// `sum w_x w_x' (f(x).f(x'))^2`
    pub repulsion: f64,
}

impl Expansion {
    pub fn total(&self) -> f64 {
        self.unlabeled_pull + self.labeled_pull + self.repulsion
    }
}

fn features(f: &DMatrix<f64>, bundle: &AdjacencyBundle) -> Result<DMatrix<f64>> {
    if f.nrows() != bundle.n() {
        return Err(Error::Shape("factor rows must match node count".into()));
    }
    let mut out = f.clone();
    for i in 0..f.nrows() {
        let w = bundle.degrees[i];
        if w <= 0.0 {
            return Err(Error::Degenerate(format!("node {i} has zero degree")));
        }
        out.row_mut(i).scale_mut(1.0 / w.sqrt());
    }
    Ok(out)
}

/// Population contrastive loss up to an F-independent constant, written over
/// per-sample features `f(x) = F_x / sqrt(w_x)`.
pub fn contrastive_expansion(f: &DMatrix<f64>, bundle: &AdjacencyBundle) -> Result<Expansion> {
    let g = features(f, bundle)?;
    let n = g.nrows();
    let mut e = Expansion {
        unlabeled_pull: 0.0,
        labeled_pull: 0.0,
        repulsion: 0.0,
    };
    for x in 0..n {
        for y in 0..n {
            let dot = g.row(x).dot(&g.row(y));
            e.unlabeled_pull -= 2.0 * bundle.unlabeled_part[(x, y)] * dot;
            e.labeled_pull -= 2.0 * bundle.labeled_part[(x, y)] * dot;
            e.repulsion += bundle.degrees[x] * bundle.degrees[y] * dot * dot;
        }
    }
    Ok(e)
}

/// Gradient of the expansion total with respect to `F`.
pub fn contrastive_expansion_grad(f: &DMatrix<f64>, bundle: &AdjacencyBundle) -> Result<DMatrix<f64>> {
    let g = features(f, bundle)?;
    let n = g.nrows();
    let gram = &g * g.transpose();
    let mut dg = DMatrix::zeros(n, g.ncols());
    for x in 0..n {
        for y in 0..n {
            let coef = -2.0 * bundle.a[(x, y)] + 2.0 * bundle.degrees[x] * bundle.degrees[y] * gram[(x, y)];
            // d(dot)/d g_x = g_y, counted once per ordered pair on each side
            for j in 0..g.ncols() {
                dg[(x, j)] += coef * g[(y, j)];
                dg[(y, j)] += coef * g[(x, j)];
            }
        }
    }
    for i in 0..n {
        dg.row_mut(i).scale_mut(1.0 / bundle.degrees[i].sqrt());
    }
    Ok(dg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::spectral::graph::{build_adjacency, build_toy_graph, TauParams, ToyCase};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn orthogonal(k: usize, seed: u64) -> DMatrix<f64> {
        random(k, k, seed).qr().q()
    }

    #[test]
    fn eckart_young_on_toys() {
        let g = build_toy_graph(ToyCase::Sorl, TauParams::new(0.8, 0.12, 0.08, 0.0)).unwrap();
        let b = build_adjacency(&g, None).unwrap();
        for k in 1..6 {
            let (f, values) = optimal_factor(&b.normalized, k).unwrap();
            let tail: f64 = values[k..].iter().map(|v| v * v).sum();
            assert!((lmf_loss(&f, &b.normalized).unwrap() - tail).abs() < 1e-10);
        }
        let zero = DMatrix::zeros(6, 2);
        assert!((lmf_loss(&zero, &b.normalized).unwrap() - b.normalized.norm_squared()).abs() < 1e-15);
        let f = random(6, 3, 4);
        let q = orthogonal(3, 5);
        let l1 = lmf_loss(&f, &b.normalized).unwrap();
        let l2 = lmf_loss(&(&f * q), &b.normalized).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
    }

    #[test]
    fn expansion_difference_identity() {
        let g = build_toy_graph(ToyCase::Nscl1, TauParams::new(1.0, 0.2, 0.25, 0.0)).unwrap();
        let b = build_adjacency(&g, None).unwrap();
        let f0 = DMatrix::zeros(5, 2);
        assert_eq!(contrastive_expansion(&f0, &b).unwrap().total(), 0.0);
        for s in 0..10 {
            let f1 = random(5, 2, 2 * s);
            let f2 = random(5, 2, 2 * s + 1);
            let dm = lmf_loss(&f1, &b.normalized).unwrap() - lmf_loss(&f2, &b.normalized).unwrap();
            let de = contrastive_expansion(&f1, &b).unwrap().total() - contrastive_expansion(&f2, &b).unwrap().total();
            assert!((dm - de).abs() < 1e-8);
            let d0 = lmf_loss(&f1, &b.normalized).unwrap() - lmf_loss(&f0, &b.normalized).unwrap();
            assert!((d0 - contrastive_expansion(&f1, &b).unwrap().total()).abs() < 1e-8);
        }
    }

    #[test]
    fn expansion_gradient_matches_central_difference() {
        let g = build_toy_graph(ToyCase::Sorl, TauParams::new(0.8, 0.12, 0.08, 0.0)).unwrap();
        let b = build_adjacency(&g, None).unwrap();
        let f = random(6, 3, 9);
        let grad = contrastive_expansion_grad(&f, &b).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            for j in 0..3 {
                let mut p = f.clone();
                p[(i, j)] += h;
                let mut m = f.clone();
                m[(i, j)] -= h;
                let fd = (contrastive_expansion(&p, &b).unwrap().total() - contrastive_expansion(&m, &b).unwrap().total()) / (2.0 * h);
                let rel = (fd - grad[(i, j)]).abs() / grad[(i, j)].abs().max(1e-3);
                assert!(rel < 1e-5, "({i},{j}): {fd} vs {}", grad[(i, j)]);
            }
        }
    }
}
