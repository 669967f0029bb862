//! Detection metrics (FPR at a TPR, AUROC, AUPR), the Hungarian
//! assignment, clustering accuracy, and (semi-supervised) k-means.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng::seeded;
use crate::scoring::threshold_at_tpr;

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return invalid("both score lists must be non-empty");
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return invalid("non-finite score");
    }
    Ok(())
}

/// Fraction of OOD scores at or above the ID threshold for `tpr`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<f64> {
    check_scores(id, ood)?;
    let lambda = threshold_at_tpr(id, tpr)?;
    Ok(ood.iter().filter(|&&s| s >= lambda).count() as f64 / ood.len() as f64)
}

/// Mann-Whitney AUROC with half credit for ties, via mid-ranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Area under precision-recall with ID as the positive class: step
/// interpolation `sum (R_i - R_{i-1}) P_i` over descending unique thresholds.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `mapping[row]` is the assigned column, `None` when the row is unmatched.
    pub mapping: Vec<Option<usize>>,
    pub cost: f64,
}

/// Minimum-cost assignment; rectangular inputs are zero-padded to square.
pub fn hungarian_assign(cost: &DMatrix<f64>) -> Result<AssignmentResult> {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return invalid("empty cost matrix");
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite cost");
    }
    let n = r.max(c);
    let a = |i: usize, j: usize| if i < r && j < c { cost[(i, j)] } else { 0.0 };
    // potentials formulation, 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![None; r];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j] - 1;
        if i < r && j - 1 < c {
            mapping[i] = Some(j - 1);
            total += cost[(i, j - 1)];
        }
    }
    Ok(AssignmentResult { mapping, cost: total })
}

/// Best matched fraction over cluster-to-class assignments.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return invalid(format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return invalid("no labels");
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut counts = DMatrix::zeros(kp, kt);
    for (&p, &t) in pred.iter().zip(truth) {
        counts[(p, t)] -= 1.0;
    }
    let res = hungarian_assign(&counts)?;
    Ok(-res.cost / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    points.row(i).iter().zip(centers.row(c).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centers.nrows() {
        let d = sq_dist(points, i, centers, c);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd k-means with seeded k-means++ starts. Rows with `fixed[i] =
/// Some(c)` stay in cluster c and always contribute to its center.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, fixed: Option<&[Option<usize>]>) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if k > n {
        return invalid(format!("k = {k} exceeds {n} points"));
    }
    let fixed: Vec<Option<usize>> = match fixed {
        Some(f) if f.len() != n => return invalid("fixed assignments length differs from point count"),
        Some(f) => f.to_vec(),
        None => vec![None; n],
    };
    if fixed.iter().flatten().any(|&c| c >= k) {
        return invalid("fixed label outside [0, k)");
    }
    let d = points.ncols();
    let mut rng = seeded(seed);
    let mut centers = DMatrix::zeros(k, d);
    let mut placed = vec![false; k];
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| fixed[i] == Some(c)).collect();
        if !members.is_empty() {
            for j in 0..d {
                centers[(c, j)] = members.iter().map(|&i| points[(i, j)]).sum::<f64>() / members.len() as f64;
            }
            placed[c] = true;
        }
    }
    for c in 0..k {
        if placed[c] {
            continue;
        }
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                (0..k)
                    .filter(|&o| placed[o])
                    .map(|o| sq_dist(points, i, &centers, o))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().filter(|w| w.is_finite()).sum();
        let pick = if !weights[0].is_finite() || total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        for j in 0..d {
            centers[(c, j)] = points[(pick, j)];
        }
        placed[c] = true;
    }

    let mut labels: Vec<usize> = (0..n).map(|i| fixed[i].unwrap_or_else(|| nearest(points, i, &centers))).collect();
    let mut iterations = 0;
    for it in 1..=KMEANS_MAX_ITER {
        iterations = it;
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[(labels[i], j)] += points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            } else {
                // farthest free point from its current center
                let far = (0..n)
                    .filter(|&i| fixed[i].is_none())
                    .max_by(|&a, &b| {
                        sq_dist(points, a, &centers, labels[a])
                            .total_cmp(&sq_dist(points, b, &centers, labels[b]))
                            .then(b.cmp(&a))
                    });
                if let Some(f) = far {
                    for j in 0..d {
                        centers[(c, j)] = points[(f, j)];
                    }
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| fixed[i].unwrap_or_else(|| nearest(points, i, &centers))).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    Ok(KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
    })
}
