use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

use super::graph::{normalize, AdjacencyBundle};
use super::split::sorted_eigen;

/// Disjoint cover of `0..n` by class index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    classes: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    pub fn new(classes: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for c in &classes {
            if c.is_empty() {
                return invalid("empty class in partition");
            }
            for &i in c {
                if i >= n || seen[i] {
                    return invalid(format!("index {i} out of range or repeated"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return invalid("partition does not cover every row");
        }
        Ok(Partition { classes, n })
    }

    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let c = labels.iter().max().map_or(0, |m| m + 1);
        let mut classes = vec![Vec::new(); c];
        for (i, &l) in labels.iter().enumerate() {
            classes[l].push(i);
        }
        classes.retain(|v| !v.is_empty());
        Partition::new(classes, labels.len())
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn indicator(&self, c: usize) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for &i in &self.classes[c] {
            y[i] = 1.0;
        }
        y
    }

    /// Block-averaging matrix `H` with `H[i,j] = 1/|pi|` inside each class.
    pub fn averaging_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for c in &self.classes {
            let w = 1.0 / c.len() as f64;
            for &i in c {
                for &j in c {
                    h[(i, j)] = w;
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmsMeasure {
    pub intra: f64,
    pub inter: f64,
    pub trace_intra: f64,
    pub trace_inter: f64,
    /// `intra / inter`, `None` when the classes share one center.
    pub kms: Option<f64>,
}

fn class_mean(z: &DMatrix<f64>, idx: &[usize]) -> DVector<f64> {
    let mut m = DVector::zeros(z.ncols());
    for &i in idx {
        m += z.row(i).transpose();
    }
    m / idx.len() as f64
}

/// Intra- and inter-class scatter of the rows of `z`, as direct sums and traces.
pub fn kmeans_measure(partition: &Partition, z: &DMatrix<f64>) -> Result<KmsMeasure> {
    if z.nrows() != partition.n() {
        return Err(Error::Shape("partition size differs from row count".into()));
    }
    let n = z.nrows();
    let all: Vec<usize> = (0..n).collect();
    let mu = class_mean(z, &all);
    let mut intra = 0.0;
    let mut inter = 0.0;
    for c in partition.classes() {
        let mc = class_mean(z, c);
        for &i in c {
            intra += (z.row(i).transpose() - &mc).norm_squared();
        }
        inter += c.len() as f64 * (&mc - &mu).norm_squared();
    }
    let gram = z * z.transpose();
    let h = partition.averaging_matrix();
    let trace_intra = ((DMatrix::identity(n, n) - &h) * &gram).trace();
    let trace_inter = ((h - DMatrix::from_element(n, n, 1.0 / n as f64)) * &gram).trace();
    let kms = if inter > 1e-300 { Some(intra / inter) } else { None };
    Ok(KmsMeasure {
        intra,
        inter,
        trace_intra,
        trace_inter,
        kms,
    })
}

/// `D^{-1/2} V_k sqrt(Lambda_k)` for the normalized version of `a`.
pub fn spectral_features(a: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = a.nrows();
    if k == 0 || k >= n {
        return invalid(format!("need 1 <= k < {n}"));
    }
    let degrees = DVector::from_iterator(n, a.row_iter().map(|r| r.sum()));
    if let Some(i) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::Degenerate(format!("node {i} has zero degree")));
    }
    let (values, vectors) = sorted_eigen(&normalize(a, &degrees));
    let z = DMatrix::from_fn(n, k, |i, j| vectors[(i, j)] * values[j].max(0.0).sqrt() / degrees[i].sqrt());
    Ok((z, values))
}

fn perturbation_parts(bundle: &AdjacencyBundle) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let l = bundle
        .l
        .clone()
        .ok_or_else(|| Error::Validation("graph has no labeled class".into()))?;
    Ok((bundle.unlabeled_normalized()?, l))
}

fn kms_at(base: &DMatrix<f64>, l: &DVector<f64>, partition: &Partition, k: usize, delta: f64) -> Result<f64> {
    let a = base + (l * l.transpose()) * delta;
    let (z, _) = spectral_features(&a, k)?;
    kmeans_measure(partition, &z)?
        .kms
        .ok_or_else(|| Error::Degenerate("inter-class scatter vanishes".into()))
}

/// `M(0) - M(delta)`, where `M(delta)` is the K-means measure of the features
/// of the degree-normalized unlabeled graph plus `delta l l^T`.
pub fn delta_kms(bundle: &AdjacencyBundle, partition: &Partition, k: usize, delta: f64) -> Result<f64> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return invalid("delta must be non-negative");
    }
    let (base, l) = perturbation_parts(bundle)?;
    if delta == 0.0 {
        return Ok(0.0);
    }
    Ok(kms_at(&base, &l, partition, k, 0.0)? - kms_at(&base, &l, partition, k, delta)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTerm {
    /// Mean label connection over the class.
    pub connection: f64,
    pub intra_similarity: f64,
    pub inter_similarity: f64,
    /// `(connection - 1/N) - 2(1 - |pi|/N)(intra - inter)`
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmsDerivative {
    pub analytic: f64,
    pub finite_difference: f64,
    pub gap: f64,
    pub classes: Vec<ClassTerm>,
    /// `eta1 eta2 sum |pi| l_pi delta_pi`, the simplified rate of improvement.
    pub simplified_rate: f64,
}

impl KmsDerivative {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.finite_difference).abs() / self.finite_difference.abs()
    }

    pub fn signs_agree(&self) -> bool {
        self.analytic.signum() == self.finite_difference.signum() && self.finite_difference != 0.0
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Leading-order derivative of the K-means measure at `delta = 0` against
/// a central difference.
pub fn kms_derivative(bundle: &AdjacencyBundle, partition: &Partition, k: usize) -> Result<KmsDerivative> {
    let (base, l) = perturbation_parts(bundle)?;
    let n = base.nrows();
    if partition.n() != n {
        return Err(Error::Shape("partition size differs from node count".into()));
    }
    if k == 0 || k >= n {
        return invalid(format!("need 1 <= k < {n}"));
    }
    let (values, vectors) = sorted_eigen(&base);
    let next = values[k].abs();
    let gap = if next == 0.0 { f64::INFINITY } else { values[k - 1] / next };
    if gap <= 1.0 + 1e-6 {
        return Err(Error::Degenerate(format!("spectral gap {gap} too small")));
    }
    let vk = vectors.columns(0, k).into_owned();
    let lam = DMatrix::from_diagonal(&DVector::from_iterator(k, values[..k].iter().copied()));
    let z = &vk * lam.map(|v| v.max(0.0).sqrt());
    let m = kmeans_measure(partition, &z)?;
    if m.inter <= 1e-300 {
        return Err(Error::Degenerate("inter-class scatter vanishes".into()));
    }
    let eta1 = 1.0 / m.inter;
    let eta2 = m.intra / m.inter;
    let h = partition.averaging_matrix();
    let eye = DMatrix::<f64>::identity(n, n);
    let upsilon = &h * (1.0 + eta2) - &eye - DMatrix::from_element(n, n, eta2 / n as f64);
    let pk = &vk * vk.transpose();
    let ak = &vk * &lam * vk.transpose();
    let ll = &l * l.transpose();
    let dl = DMatrix::from_diagonal(&(&l * l.sum()));
    let inner = &pk * &ll - (&ak * &dl) * 2.0 + &pk * &ll * (&eye - &pk);
    let analytic = -eta1 * (&upsilon * inner).trace();

    let plus = kms_at(&base, &l, partition, k, FD_STEP)?;
    let minus = kms_at(&base, &l, partition, k, -FD_STEP)?;
    let finite_difference = (plus - minus) / (2.0 * FD_STEP);

    let gram = &z * z.transpose();
    let mut classes = Vec::new();
    let mut rate = 0.0;
    for c in partition.classes() {
        let others: Vec<usize> = (0..n).filter(|i| !c.contains(i)).collect();
        let connection = c.iter().map(|&i| l[i]).sum::<f64>() / c.len() as f64;
        let mut intra = 0.0;
        for &i in c {
            for &j in c {
                intra += gram[(i, j)];
            }
        }
        intra /= (c.len() * c.len()) as f64;
        let mut inter = 0.0;
        for &i in c {
            for &j in &others {
                inter += gram[(i, j)];
            }
        }
        if !others.is_empty() {
            inter /= (c.len() * others.len()) as f64;
        }
        let frac = c.len() as f64 / n as f64;
        let delta = (connection - 1.0 / n as f64) - 2.0 * (1.0 - frac) * (intra - inter);
        rate += c.len() as f64 * connection * delta;
        classes.push(ClassTerm {
            connection,
            intra_similarity: intra,
            inter_similarity: inter,
            delta,
        });
    }
    Ok(KmsDerivative {
        analytic,
        finite_difference,
        gap,
        classes,
        simplified_rate: eta1 * eta2 * rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterErrors {
    /// `(from, to, |xi| / (|from| + |to|))` for every ordered class pair.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Harmonic mean of the pair ratios; 0 when any pair has no errors.
    pub harmonic: f64,
}

/// Points of each class at least as close to another class's center as to their own.
pub fn cluster_error_ratio(partition: &Partition, z: &DMatrix<f64>) -> Result<ClusterErrors> {
    let cs = partition.classes();
    if cs.len() < 2 {
        return invalid("need at least two clusters");
    }
    if z.nrows() != partition.n() {
        return Err(Error::Shape("partition size differs from row count".into()));
    }
    let centers: Vec<DVector<f64>> = cs.iter().map(|c| class_mean(z, c)).collect();
    let mut pairs = Vec::new();
    let mut recip = 0.0;
    let mut any_empty = false;
    for (a, ca) in cs.iter().enumerate() {
        for (b, cb) in cs.iter().enumerate() {
            if a == b {
                continue;
            }
            let count = ca
                .iter()
                .filter(|&&i| {
                    let zi = z.row(i).transpose();
                    (&zi - &centers[a]).norm() >= (&zi - &centers[b]).norm()
                })
                .count();
            let ratio = count as f64 / (ca.len() + cb.len()) as f64;
            if count == 0 {
                any_empty = true;
            } else {
                recip += 1.0 / ratio;
            }
            pairs.push((a, b, ratio));
        }
    }
    let c = cs.len() as f64;
    let harmonic = if any_empty { 0.0 } else { c * (c - 1.0) / recip };
    Ok(ClusterErrors { pairs, harmonic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::spectral::graph::{build_adjacency, build_toy_graph, TauParams, ToyCase};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn measure_examples() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
        let p = Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let m = kmeans_measure(&p, &z).unwrap();
        assert_eq!(m.intra, 0.0);
        assert_eq!(m.inter, 4.0);
        assert_eq!(m.kms, Some(0.0));
        let one = Partition::new(vec![vec![0, 1, 2, 3]], 4).unwrap();
        assert_eq!(kmeans_measure(&one, &z).unwrap().kms, None);
        assert!(Partition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(Partition::new(vec![vec![0]], 2).is_err());
    }

    #[test]
    fn trace_form_matches_direct_form() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let n = rng.random_range(4..20);
            let d = rng.random_range(1..5);
            let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let labels: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..3) }).collect();
            let p = Partition::from_labels(&labels).unwrap();
            let m = kmeans_measure(&p, &z).unwrap();
            assert!((m.intra - m.trace_intra).abs() < 1e-10);
            assert!((m.inter - m.trace_inter).abs() < 1e-10);
        }
    }

    fn toy() -> AdjacencyBundle {
        let g = build_toy_graph(ToyCase::Sorl, TauParams::new(0.45, 0.3, 0.25, 0.0)).unwrap();
        build_adjacency(&g, None).unwrap()
    }

    fn shapes() -> Partition {
        Partition::new(vec![vec![0, 1], vec![2, 3], vec![4, 5]], 6).unwrap()
    }

    #[test]
    fn delta_is_zero_then_positive_and_continuous() {
        let b = toy();
        let p = shapes();
        assert_eq!(delta_kms(&b, &p, 4, 0.0).unwrap(), 0.0);
        assert!(delta_kms(&b, &p, 4, 0.05).unwrap() > 0.0);
        let base = delta_kms(&b, &p, 4, 0.1).unwrap();
        let mut prev = f64::INFINITY;
        for e in 1..6 {
            let h = 10f64.powi(-e);
            let diff = (delta_kms(&b, &p, 4, 0.1 + h).unwrap() - base).abs();
            assert!(diff < prev);
            prev = diff;
        }
        assert!(prev < 1e-4);
        assert!(delta_kms(&b, &p, 4, -0.1).is_err());
    }

    #[test]
    fn derivative_agrees_with_difference() {
        let d = kms_derivative(&toy(), &shapes(), 4).unwrap();
        assert!(d.gap > 10.0);
        assert!(d.signs_agree());
        assert!(d.relative_error() < 0.2, "{d:?}");
        assert_eq!(d.classes.len(), 3);
    }

    #[test]
    fn cluster_ratio_examples() {
        let z = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 5.0, 5.1]);
        let p = Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        assert_eq!(cluster_error_ratio(&p, &z).unwrap().harmonic, 0.0);
        // point 2 belongs to the second class but sits next to the first center
        let z = DMatrix::from_row_slice(5, 1, &[0.0, 0.1, 0.3, 5.0, 5.1]);
        let p = Partition::new(vec![vec![0, 1], vec![2, 3, 4]], 5).unwrap();
        let r = cluster_error_ratio(&p, &z).unwrap();
        assert!(r.pairs.contains(&(1, 0, 1.0 / 5.0)));
        assert!(r.pairs.contains(&(0, 1, 0.0)));
        assert_eq!(r.harmonic, 0.0);
    }

    #[test]
    fn ratio_and_measure_grow_with_spread() {
        let mut rng = seeded(11);
        let g: Vec<f64> = (0..300).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let labels: Vec<usize> = (0..300).map(|i| i % 2).collect();
        let p = Partition::from_labels(&labels).unwrap();
        let centers = [-1.0, 1.0];
        let mut prev = (0.0, 0.0);
        for s in [0.5, 0.8, 1.2, 1.8] {
            let z = DMatrix::from_fn(300, 1, |i, _| centers[labels[i]] + s * g[i]);
            let kms = kmeans_measure(&p, &z).unwrap().kms.unwrap();
            let ratio = cluster_error_ratio(&p, &z).unwrap().harmonic;
            assert!(kms > prev.0 && ratio > prev.1);
            prev = (kms, ratio);
        }
    }
}
