use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

use super::graph::{build_toy_graph, AdjacencyBundle, TauParams, ToyCase};

/// Relative singular-value cutoff for pseudo-inverses and projections.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Eigendecomposition sorted by eigenvalue (descending), split at `k` and at
/// the labeled/unlabeled row boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSplit {
    pub k: usize,
    pub n_labeled: usize,
    pub values: Vec<f64>,
    /// N x N, column i pairs with `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SpectralSplit {
    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn v_star(&self) -> DMatrix<f64> {
        self.vectors.columns(0, self.k).into_owned()
    }

    pub fn v_flat(&self) -> DMatrix<f64> {
        self.vectors.columns(self.k, self.n() - self.k).into_owned()
    }

    pub fn l_star(&self) -> DMatrix<f64> {
        self.vectors.view((0, 0), (self.n_labeled, self.k)).into_owned()
    }

    pub fn u_star(&self) -> DMatrix<f64> {
        let nu = self.n() - self.n_labeled;
        self.vectors.view((self.n_labeled, 0), (nu, self.k)).into_owned()
    }

    pub fn l_flat(&self) -> DMatrix<f64> {
        self.vectors.view((0, self.k), (self.n_labeled, self.n() - self.k)).into_owned()
    }

    pub fn u_flat(&self) -> DMatrix<f64> {
        let nu = self.n() - self.n_labeled;
        self.vectors.view((self.n_labeled, self.k), (nu, self.n() - self.k)).into_owned()
    }

    /// `values[k-1] / |values[k]|`, infinite when the next value is zero.
    pub fn gap(&self) -> f64 {
        let next = self.values[self.k].abs();
        if next == 0.0 {
            f64::INFINITY
        } else {
            self.values[self.k - 1] / next
        }
    }
}

/// Sorted eigenpairs of a symmetric matrix with the sign of each vector fixed
/// so that its largest-magnitude entry (lowest index on ties) is positive.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Split of an arbitrary symmetric matrix.
pub fn split_symmetric(m: &DMatrix<f64>, k: usize, n_labeled: usize) -> Result<SpectralSplit> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape("matrix must be square".into()));
    }
    if k == 0 || k >= n {
        return invalid(format!("need 1 <= k < {n}, got k={k}"));
    }
    if n_labeled > n {
        return invalid("labeled count exceeds node count");
    }
    let (values, vectors) = sorted_eigen(m);
    Ok(SpectralSplit {
        k,
        n_labeled,
        values,
        vectors,
    })
}

/// Split of the normalized adjacency.
pub fn spectral_split(bundle: &AdjacencyBundle, k: usize, n_labeled: usize) -> Result<SpectralSplit> {
    split_symmetric(&bundle.normalized, k, n_labeled)
}

/// Orthonormal basis of the column space, dropping directions below the cutoff.
pub fn column_basis(u: &DMatrix<f64>) -> DMatrix<f64> {
    if u.ncols() == 0 || u.nrows() == 0 {
        return DMatrix::zeros(u.nrows(), 0);
    }
    let svd = u.clone().svd(true, false);
    let left = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] >= SVD_CUTOFF * smax)
        .collect();
    DMatrix::from_fn(u.nrows(), keep.len(), |i, j| left[(i, keep[j])])
}

/// `P_U y` via an orthonormal basis of span(U).
pub fn project(u: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let q = column_basis(u);
    &q * (q.transpose() * y)
}

/// `min_mu ||y - U mu||^2`.
pub fn residual(u: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if u.nrows() != y.len() {
        return Err(Error::Shape(format!("U has {} rows but y has length {}", u.nrows(), y.len())));
    }
    Ok((y - project(u, y)).norm_squared())
}

/// `||(I - P_{Lb}) Ub^T y||^2`, with `P_{Lb}` the projector onto the row space of `Lb`.
pub fn residual_bound(split: &SpectralSplit, y: &DVector<f64>) -> Result<f64> {
    let ub = split.u_flat();
    if ub.nrows() != y.len() {
        return Err(Error::Shape("label vector length differs from unlabeled count".into()));
    }
    let w = ub.transpose() * y;
    let lb = split.l_flat();
    let projected = project(&lb.transpose(), &w);
    Ok((w - projected).norm_squared())
}

/// Normalized adjacency with labeled rows and columns replaced by their means.
pub fn averaged_adjacency(normalized: &DMatrix<f64>, n_labeled: usize) -> Result<DMatrix<f64>> {
    let n = normalized.nrows();
    if n_labeled == 0 || n_labeled >= n {
        return invalid("need at least one labeled and one unlabeled node");
    }
    let mut p = DMatrix::identity(n, n);
    for i in 0..n_labeled {
        for j in 0..n_labeled {
            p[(i, j)] = 1.0 / n_labeled as f64;
        }
    }
    Ok(&p * normalized * p.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// `||Ub^T y|| / ||y||`, in [0, 1].
    pub ignorance: f64,
    /// Cosine between the ignorance vector and the labeled-knowledge vector;
    /// `None` when either vector vanishes.
    pub coverage: Option<f64>,
}

pub fn ignorance_and_coverage(split: &SpectralSplit, y: &DVector<f64>) -> Result<Diagnostics> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return invalid("label vector must be binary");
    }
    let yn = y.norm();
    if yn == 0.0 {
        return invalid("label vector is zero");
    }
    let ub = split.u_flat();
    if ub.nrows() != y.len() {
        return Err(Error::Shape("label vector length differs from unlabeled count".into()));
    }
    let ign = ub.transpose() * y;
    let lb = split.l_flat();
    let knowledge = lb.transpose() * DVector::from_element(lb.nrows(), 1.0);
    let denom = ign.norm() * knowledge.norm();
    let coverage = if denom < 1e-14 { None } else { Some(ign.dot(&knowledge) / denom) };
    Ok(Diagnostics {
        ignorance: ign.norm() / yn,
        coverage,
    })
}

/// Connection strength above which the target class becomes linearly recoverable.
pub fn t_bar(tau_s: f64, tau_c: f64) -> Result<f64> {
    if !(tau_s > tau_c && 1.5 * tau_c > tau_s && tau_c > 0.0) {
        return invalid("need tau_c < tau_s < 1.5 tau_c");
    }
    Ok((2.0 * (tau_s - tau_c).powi(2) * tau_c / (2.0 * tau_c - tau_s)).sqrt())
}

/// Residual of `y` on the top-k eigenvectors of `T` restricted to unlabeled rows.
pub fn toy_residual(t: &DMatrix<f64>, n_labeled: usize, k: usize, y: &DVector<f64>) -> Result<f64> {
    let split = split_symmetric(t, k, n_labeled)?;
    residual(&split.u_star(), y)
}

fn toy_t(case: ToyCase, tau: TauParams, t: Option<f64>) -> Result<DMatrix<f64>> {
    let g = build_toy_graph(case, tau)?;
    match t {
        None => Ok(g.t),
        Some(v) => {
            if g.link_pairs.is_empty() || !(v >= 0.0) {
                return invalid("connection override needs link pairs and a non-negative strength");
            }
            let mut m = g.t.clone();
            for &(i, j) in &g.link_pairs {
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            Ok(m)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCheck {
    pub name: String,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub t_bar: f64,
    pub checks: Vec<ToyCheck>,
}

impl ToyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Residuals of the 5-node toy graphs with `y = [1,1,0,0]` on the unlabeled
/// rows and k = 2, using eigenvectors of the unnormalized `T`.
///
/// `weaker_color` must satisfy `tau_c < tau_s < 1.5 tau_c`; `stronger_color`
/// must satisfy `tau_s < tau_c < 1.5 tau_s`. Both use `tau1 = 1`, `tau0 = 0`.
pub fn toy_residual_theorems(weaker_color: (f64, f64), stronger_color: (f64, f64), grid: usize, tol: f64) -> Result<ToyReport> {
    let y = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
    let (tc_w, ts_w) = weaker_color;
    let (tc_s, ts_s) = stronger_color;
    if !(tc_s > ts_s && tc_s < 1.5 * ts_s) {
        return invalid("stronger-color setting needs tau_s < tau_c < 1.5 tau_s");
    }
    let tbar = t_bar(ts_w, tc_w)?;
    let weak = TauParams::new(1.0, tc_w, ts_w, 0.0);
    let strong = TauParams::new(1.0, tc_s, ts_s, 0.0);
    let r = |case, tau, t| -> Result<f64> { toy_residual(&toy_t(case, tau, t)?, 1, 2, &y) };
    let mut checks = Vec::new();
    let mut push = |name: String, value: f64, expected: &str, pass: bool| {
        checks.push(ToyCheck {
            name,
            value,
            expected: expected.to_string(),
            pass,
        });
    };
    let near = |v: f64, target: f64| (v - target).abs() <= tol;

    for (label, tau) in [("weaker color", weak), ("stronger color", strong)] {
        let v = r(ToyCase::Nscl1, tau, None)?;
        push(format!("correlated label, {label}"), v, "0", near(v, 0.0));
    }
    let v = r(ToyCase::Nscl2, strong, None)?;
    push("unrelated label, stronger color".into(), v, "0", near(v, 0.0));
    let v = r(ToyCase::Nscl2, weak, None)?;
    push("unrelated label, weaker color".into(), v, "1", near(v, 1.0));
    let v3 = r(ToyCase::Nscl3, strong, None)?;
    let v2 = r(ToyCase::Nscl2, strong, None)?;
    push("spurious-shape label minus unrelated label".into(), v3 - v2, "1", near(v3 - v2, 1.0));

    for j in 0..grid {
        let t = ts_w * j as f64 / grid as f64;
        let v = r(ToyCase::Nscl1, weak, Some(t))?;
        let (expected, pass) = if j == 0 {
            ("1", near(v, 1.0))
        } else if t > tbar {
            ("0", near(v, 0.0))
        } else {
            ("(0,1)", v > tol && v < 1.0 - tol)
        };
        push(format!("connection t={t:.6}"), v, expected, pass);
    }
    Ok(ToyReport { t_bar: tbar, checks })
}

/// Least misclassification count of the bias-free linear probe
/// `argmax_c (u_x m_c)` on one-dimensional features, by enumerating the
/// predictions it can realise: one class for `u > 0`, another for `u < 0`,
/// ties (including `u = 0` and `m = 0`) resolving to class 0.
pub fn linear_probe_error_1d(u: &[f64], labels: &[usize], classes: usize) -> Result<usize> {
    if u.len() != labels.len() {
        return Err(Error::Shape("feature and label lengths differ".into()));
    }
    if classes == 0 || labels.iter().any(|&l| l >= classes) {
        return invalid("label out of range");
    }
    let errors = |pos: usize, neg: usize| {
        u.iter()
            .zip(labels)
            .filter(|(&x, &l)| {
                let pred = if x > 0.0 {
                    pos
                } else if x < 0.0 {
                    neg
                } else {
                    0
                };
                pred != l
            })
            .count()
    };
    let mut best = errors(0, 0);
    for p in 0..classes {
        for q in 0..classes {
            if p != q {
                best = best.min(errors(p, q));
            }
        }
    }
    Ok(best)
}

/// `min_M ||Y - U M||_F^2` for one-hot `Y`.
pub fn multiclass_residual(u: &DMatrix<f64>, labels: &[usize], classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..classes {
        let y = DVector::from_iterator(labels.len(), labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }));
        total += residual(u, &y)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::graph::build_adjacency;

    #[test]
    fn residual_examples() {
        let u = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(residual(&u, &DVector::from_vec(vec![1.0, 0.0])).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = DMatrix::from_row_slice(2, 1, &[h, h]);
        assert!((residual(&u, &DVector::from_vec(vec![1.0, 0.0])).unwrap() - 0.5).abs() < 1e-15);
        assert!(residual(&u, &DVector::from_vec(vec![1.0])).is_err());
        let zero = DMatrix::zeros(3, 2);
        assert_eq!(residual(&zero, &DVector::from_vec(vec![1.0, 1.0, 0.0])).unwrap(), 2.0);
    }

    #[test]
    fn unnormalized_toy_eigenpairs() {
        let g = build_toy_graph(ToyCase::Nscl2, TauParams::new(1.0, 0.2, 0.1, 0.0)).unwrap();
        let s = split_symmetric(&g.t, 2, 1).unwrap();
        let expect = [1.3, 1.1, 1.0, 0.9, 0.7];
        for (v, e) in s.values.iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        let templates: [[f64; 5]; 5] = [
            [0.0, 1.0, 1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0, -1.0, -1.0],
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 1.0, -1.0, 1.0],
            [0.0, 1.0, -1.0, -1.0, 1.0],
        ];
        for (i, t) in templates.iter().enumerate() {
            let t = DVector::from_row_slice(t).normalize();
            let c = s.vectors.column(i).dot(&t).abs();
            assert!((c - 1.0).abs() < 1e-12, "vector {i}");
        }
    }

    #[test]
    fn t_bar_values() {
        assert!((t_bar(0.25, 0.2).unwrap() - 0.081_649_658).abs() < 1e-8);
        assert!(t_bar(0.2 + 1e-9, 0.2).unwrap() < 1e-8);
        assert!(t_bar(0.1, 0.2).is_err());
        for i in 1..50 {
            let tc = 0.2;
            let ts = tc * (1.0 + 0.5 * i as f64 / 50.0);
            assert!(t_bar(ts, tc).unwrap() < ts);
        }
    }

    #[test]
    fn toy_theorems_hold() {
        let report = toy_residual_theorems((0.2, 0.25), (0.2, 0.15), 20, 1e-8).unwrap();
        for c in &report.checks {
            assert!(c.pass, "{}: {} (expected {})", c.name, c.value, c.expected);
        }
        assert_eq!(report.checks.len(), 25);
    }

    #[test]
    fn bound_without_labeled_rows() {
        let g = build_toy_graph(ToyCase::Sorl, TauParams::new(0.8, 0.12, 0.08, 0.0)).unwrap();
        let b = build_adjacency(&g, None).unwrap();
        let s = spectral_split(&b, 3, 0).unwrap();
        let y = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let plain = (s.u_flat().transpose() * &y).norm_squared();
        assert!((residual_bound(&s, &y).unwrap() - plain).abs() < 1e-14);
    }

    #[test]
    fn probe_error_counts() {
        assert_eq!(linear_probe_error_1d(&[1.0, 2.0, -1.0], &[1, 1, 0], 2).unwrap(), 0);
        assert_eq!(linear_probe_error_1d(&[1.0, -2.0, -1.0], &[1, 1, 0], 2).unwrap(), 1);
        assert_eq!(linear_probe_error_1d(&[1.0, 2.0, 3.0], &[1, 2, 0], 3).unwrap(), 2);
    }
}
