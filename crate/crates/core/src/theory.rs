//! Closed-form activation statistics under rectification (rectified
//! Gaussian and epsilon-skew-normal inputs), variance reduction under weight
//! sparsification, and the Monte-Carlo estimators used to check them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data_io::esn_stream;
use crate::error::{invalid, Result};
use crate::rng::{seeded, sub_seed};
use crate::stats::{big_phi, mean_se, phi, sample_var, INV_SQRT_2PI};

/// `E[max(X, 0)]` for `X ~ N(mu, sigma^2)`.
pub fn rect_gauss_mean(mu: f64, sigma: f64) -> f64 {
    (1.0 - big_phi(-mu / sigma)) * mu + phi(-mu / sigma) * sigma
}

/// `E[z - min(z, c)]` with `z = max(X, 0)`, `X ~ N(mu, sigma^2)`, `c > 0`.
pub fn id_reduction(mu: f64, sigma: f64, c: f64) -> f64 {
    let a = (c - mu) / sigma;
    phi(a) * sigma - (1.0 - big_phi(a)) * (c - mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsnParams {
    pub mu: f64,
    pub sigma: f64,
    pub eps: f64,
}

impl EsnParams {
    pub fn new(mu: f64, sigma: f64, eps: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return invalid("sigma must be positive");
        }
        if !(-1.0..=1.0).contains(&eps) {
            return invalid("eps must lie in [-1, 1]");
        }
        if !mu.is_finite() {
            return invalid("mu must be finite");
        }
        Ok(EsnParams { mu, sigma, eps })
    }

    fn left_scale(&self) -> f64 {
        (1.0 + self.eps) * self.sigma
    }

    fn right_scale(&self) -> f64 {
        (1.0 - self.eps) * self.sigma
    }
}

/// Split-normal density: scale `sigma(1+eps)` left of the mode, `sigma(1-eps)` right.
pub fn esn_pdf(x: f64, p: &EsnParams) -> f64 {
    let scale = if x < p.mu { p.left_scale() } else { p.right_scale() };
    if scale == 0.0 {
        return 0.0;
    }
    phi((x - p.mu) / scale) / p.sigma
}

/// `E[(s|G| - a)+]` for standard normal G.
fn half_normal_excess(s: f64, a: f64) -> f64 {
    if s == 0.0 {
        return (-a).max(0.0);
    }
    if a <= 0.0 {
        -a + s * 2.0 * INV_SQRT_2PI
    } else {
        2.0 * (s * phi(a / s) - a * (1.0 - big_phi(a / s)))
    }
}

/// `E[(b - s|G|)+]` for standard normal G.
fn half_normal_shortfall(s: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    if s == 0.0 {
        return b;
    }
    2.0 * (b * (big_phi(b / s) - 0.5) - s * (INV_SQRT_2PI - phi(b / s)))
}

/// `E[(X - c)+]` for `X ~ ESN(mu, sigma^2, eps)`, exact on both branches.
pub fn esn_excess_mean(p: &EsnParams, c: f64) -> f64 {
    let left = half_normal_shortfall(p.left_scale(), p.mu - c);
    let right = half_normal_excess(p.right_scale(), c - p.mu);
    (1.0 + p.eps) / 2.0 * left + (1.0 - p.eps) / 2.0 * right
}

/// `E[max(X, 0)]` under the ESN law.
pub fn esn_rect_mean(p: &EsnParams) -> f64 {
    esn_excess_mean(p, 0.0)
}

/// `E[min(max(X, 0), c)]` under the ESN law.
pub fn esn_rect_clip_mean(p: &EsnParams, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return invalid("clip level must be positive");
    }
    Ok(esn_excess_mean(p, 0.0) - esn_excess_mean(p, c))
}

/// Mean activation removed by clipping at `c`, under the ESN law.
pub fn ood_reduction(p: &EsnParams, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return invalid("clip level must be positive");
    }
    Ok(esn_excess_mean(p, c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    pub fn z_score(&self, value: f64) -> f64 {
        if self.se == 0.0 {
            if self.mean == value {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - value).abs() / self.se
        }
    }
}

/// Monte-Carlo estimates of the rectified mean, clipped mean and reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct RectificationMc {
    pub rect_mean: McEstimate,
    pub clip_mean: Vec<McEstimate>,
    pub reduction: Vec<McEstimate>,
}

#[derive(Default, Clone)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn estimate(&self) -> McEstimate {
        let mean = self.sum / self.n;
        let var = ((self.sum_sq - self.n * mean * mean) / (self.n - 1.0)).max(0.0);
        McEstimate {
            mean,
            se: (var / self.n).sqrt(),
        }
    }
}

/// Samples the ESN law (eps = 0 gives the Gaussian) and estimates the
/// rectification statistics for each clip level. Work is split into
/// `shards` independent streams; results depend only on (seed, shards).
pub fn rectification_mc(p: &EsnParams, clips: &[f64], samples: usize, seed: u64, shards: usize) -> RectificationMc {
    let shards = shards.max(1);
    let per = samples / shards;
    let run_shard = |s: usize| {
        let count = if s + 1 == shards { samples - per * (shards - 1) } else { per };
        let mut rng = seeded(sub_seed(seed, s as u64));
        let mut rect = Moments::default();
        let mut clip = vec![Moments::default(); clips.len()];
        let mut red = vec![Moments::default(); clips.len()];
        const CHUNK: usize = 1 << 16;
        let mut left = count;
        while left > 0 {
            let m = left.min(CHUNK);
            for x in esn_stream(&mut rng, p.mu, p.sigma, p.eps, m) {
                let z = x.max(0.0);
                rect.push(z);
                for (j, &c) in clips.iter().enumerate() {
                    let zc = z.min(c);
                    clip[j].push(zc);
                    red[j].push(z - zc);
                }
            }
            left -= m;
        }
        (rect, clip, red)
    };
    let parts: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..shards).map(|s| scope.spawn(move || run_shard(s))).collect();
        handles.into_iter().map(|h| h.join().expect("mc shard panicked")).collect()
    });
    let mut rect = Moments::default();
    let mut clip = vec![Moments::default(); clips.len()];
    let mut red = vec![Moments::default(); clips.len()];
    for (r, c, d) in &parts {
        rect.merge(r);
        for j in 0..clips.len() {
            clip[j].merge(&c[j]);
            red[j].merge(&d[j]);
        }
    }
    RectificationMc {
        rect_mean: rect.estimate(),
        clip_mean: clip.iter().map(Moments::estimate).collect(),
        reduction: red.iter().map(Moments::estimate).collect(),
    }
}

/// Per-class expected logit reduction `W^T E[z - min(z, c)]` estimated by
/// sampling `d` independent units per draw, for Gaussian (ID) and ESN (OOD)
/// activations. Returns `(id, ood)` per class.
pub fn logit_reduction_mc(
    w: &DMatrix<f64>,
    id: (f64, f64),
    ood: &EsnParams,
    c: f64,
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(c > 0.0) {
        return invalid("clip level must be positive");
    }
    let id = EsnParams::new(id.0, id.1, 0.0)?;
    let d = w.nrows();
    let estimate = |p: &EsnParams, s: u64| {
        let mut rng = seeded(s);
        let mut acc = DVector::zeros(d);
        for _ in 0..samples {
            let xs = esn_stream(&mut rng, p.mu, p.sigma, p.eps, d);
            for (i, x) in xs.into_iter().enumerate() {
                let z = x.max(0.0);
                acc[i] += z - z.min(c);
            }
        }
        let unit = acc / samples as f64;
        (w.transpose() * unit).iter().copied().collect::<Vec<f64>>()
    };
    Ok((estimate(&id, sub_seed(seed, 0)), estimate(ood, sub_seed(seed, 1))))
}

/// Lemma-style variance reduction for independent units: dropping the first
/// `t` columns removes `sum_{i<t} var_i`. Returns `(analytic, empirical)`.
pub fn dice_var_reduction(variances: &[f64], t: usize, samples: &DMatrix<f64>) -> Result<(f64, f64)> {
    let m = variances.len();
    if t > m {
        return invalid(format!("cut {t} exceeds {m} units"));
    }
    if samples.ncols() != m {
        return invalid("sample columns differ from unit count");
    }
    if samples.nrows() < 2 {
        return invalid("need at least two samples");
    }
    let analytic = variances[..t].iter().sum();
    Ok((analytic, empirical_var_reduction(samples, t)))
}

/// `sampleVar(sum of all units) - sampleVar(sum of units t..m)`.
pub fn empirical_var_reduction(samples: &DMatrix<f64>, t: usize) -> f64 {
    let full: Vec<f64> = samples.row_iter().map(|r| r.sum()).collect();
    let kept: Vec<f64> = samples.row_iter().map(|r| r.iter().skip(t).sum()).collect();
    sample_var(&full) - sample_var(&kept)
}

/// Variance reduction with correlated units:
/// `sum_{i<t} S_ii + 2 sum_{i<j} S_ij - 2 sum_{t<=i<j} S_ij`.
pub fn dice_var_reduction_correlated(cov: &DMatrix<f64>, t: usize) -> Result<f64> {
    let m = cov.nrows();
    if cov.ncols() != m {
        return invalid("covariance must be square");
    }
    if t > m {
        return invalid(format!("cut {t} exceeds {m} units"));
    }
    for i in 0..m {
        for j in 0..i {
            let scale = cov[(i, j)].abs().max(cov[(j, i)].abs()).max(1.0);
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return invalid("covariance is not symmetric");
            }
        }
    }
    let mut total: f64 = (0..t).map(|i| cov[(i, i)]).sum();
    for i in 0..m {
        for j in (i + 1)..m {
            total += 2.0 * cov[(i, j)];
            if i >= t {
                total -= 2.0 * cov[(i, j)];
            }
        }
    }
    Ok(total)
}

/// `count x m` Gaussian samples with the given mean and covariance.
pub fn correlated_samples(means: &[f64], cov: &DMatrix<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let m = means.len();
    if cov.shape() != (m, m) {
        return invalid("covariance shape differs from mean length");
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| crate::Error::Validation("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = seeded(seed);
    let mut out = DMatrix::zeros(count, m);
    let mut g = DVector::zeros(m);
    for t in 0..count {
        for i in 0..m {
            g[i] = rng.sample::<f64, _>(StandardNormal);
        }
        let x = &l * &g;
        for i in 0..m {
            out[(t, i)] = means[i] + x[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarSumReport {
    pub var_a: f64,
    pub var_b: f64,
    pub var_sum: f64,
    pub se: f64,
    pub pass: bool,
}

/// For independent streams, `Var[a + b]` should match `Var[a] + Var[b]`
/// within five standard errors of a sample variance.
pub fn var_sum_check(a: &[f64], b: &[f64]) -> Result<VarSumReport> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid("need two equal-length streams of at least two samples");
    }
    let var_a = sample_var(a);
    let var_b = sample_var(b);
    let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let var_sum = sample_var(&sum);
    let expected = var_a + var_b;
    let se = expected * (2.0 / (a.len() as f64 - 1.0)).sqrt();
    let pass = (var_sum - expected).abs() <= 5.0 * se;
    Ok(VarSumReport {
        var_a,
        var_b,
        var_sum,
        se,
        pass,
    })
}

/// Standard error helper for callers holding raw samples.
pub fn sample_mean_se(xs: &[f64]) -> McEstimate {
    let (mean, se) = mean_se(xs);
    McEstimate { mean, se }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{gen_esn_samples, SyntheticKind, SyntheticSpec};

    // formulas exactly as printed for the regime 0 <= mu <= c
    fn printed_rect_mean(p: &EsnParams) -> f64 {
        let (mu, s, e) = (p.mu, p.sigma, p.eps);
        let a = -mu / ((1.0 + e) * s);
        mu - (1.0 + e) * big_phi(a) * mu + (1.0 + e).powi(2) * phi(a) * s - 4.0 * e * s * INV_SQRT_2PI
    }

    fn printed_reduction(p: &EsnParams, c: f64) -> f64 {
        let (mu, s, e) = (p.mu, p.sigma, p.eps);
        let a = (c - mu) / ((1.0 - e) * s);
        (1.0 - e).powi(2) * phi(a) * s - (1.0 - e) * (1.0 - big_phi(a)) * (c - mu)
    }

    #[test]
    fn rect_gauss_examples() {
        assert!((rect_gauss_mean(0.0, 2.0) - 2.0 * INV_SQRT_2PI).abs() < 1e-15);
        assert!((rect_gauss_mean(10.0, 1.0) - 10.0).abs() / 10.0 < 1e-10);
        assert!(id_reduction(0.5, 1.0, 0.5 + 40.0).abs() < 1e-12);
        assert!((id_reduction(0.7, 1.3, 0.7) - 1.3 * INV_SQRT_2PI).abs() < 1e-15);
    }

    #[test]
    fn matches_printed_formulas_in_their_regime() {
        for &mu in &[0.0, 0.25, 0.5, 1.0] {
            for &s in &[0.5, 1.0, 2.0] {
                for &e in &[0.0, -0.1, -0.25, -0.4, 0.3] {
                    let p = EsnParams::new(mu, s, e).unwrap();
                    assert!((esn_rect_mean(&p) - printed_rect_mean(&p)).abs() < 1e-12);
                    for &c in &[1.0, 2.0] {
                        if c >= mu {
                            assert!((ood_reduction(&p, c).unwrap() - printed_reduction(&p, c)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_case_recovers_gaussian() {
        for &mu in &[-0.5, 0.25, 0.5, 1.0] {
            for &s in &[0.5, 1.0, 2.0] {
                let p = EsnParams::new(mu, s, 0.0).unwrap();
                assert!((esn_rect_mean(&p) - rect_gauss_mean(mu, s)).abs() < 1e-12);
                for &c in &[0.5, 1.0, 2.0] {
                    assert!((ood_reduction(&p, c).unwrap() - id_reduction(mu, s, c)).abs() < 1e-12);
                }
                let x = mu + 0.3 * s;
                let normal = phi((x - mu) / s) / s;
                assert!((esn_pdf(x, &p) - normal).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn internal_identity_and_ranges() {
        for i in 0..100 {
            let mu = -1.0 + 0.03 * i as f64;
            let s = 0.3 + 0.02 * i as f64;
            let e = -0.9 + 0.018 * i as f64;
            let c = 0.05 + 0.04 * i as f64;
            let p = EsnParams::new(mu, s, e).unwrap();
            let lhs = ood_reduction(&p, c).unwrap();
            let rhs = esn_rect_mean(&p) - esn_rect_clip_mean(&p, c).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
            assert!(lhs >= 0.0);
            let clip = esn_rect_clip_mean(&p, c).unwrap();
            assert!((-1e-15..=c + 1e-15).contains(&clip));
        }
        let p = EsnParams::new(0.5, 1.0, -0.3).unwrap();
        assert!((esn_rect_clip_mean(&p, 60.0).unwrap() - esn_rect_mean(&p)).abs() < 1e-10);
    }

    #[test]
    fn reductions_non_increasing_in_clip() {
        let p = EsnParams::new(0.5, 1.0, -0.25).unwrap();
        let mut prev_o = f64::INFINITY;
        let mut prev_i = f64::INFINITY;
        for j in 1..60 {
            let c = 0.05 * j as f64;
            let o = ood_reduction(&p, c).unwrap();
            let i = id_reduction(0.5, 1.0, c);
            assert!(o <= prev_o && i <= prev_i);
            prev_o = o;
            prev_i = i;
        }
    }

    #[test]
    fn remark_regime_monotone() {
        for &s in &[0.5, 1.0, 1.5, 2.0] {
            let mut prev = -1.0;
            for k in 0..=5 {
                let p = EsnParams::new(0.5, s, -0.1 * k as f64).unwrap();
                let r = ood_reduction(&p, 1.0).unwrap();
                assert!(r > prev);
                prev = r;
            }
        }
        for k in 0..=5 {
            let mut prev = -1.0;
            for &s in &[0.5, 1.0, 1.5, 2.0] {
                let r = ood_reduction(&EsnParams::new(0.5, s, -0.1 * k as f64).unwrap(), 1.0).unwrap();
                assert!(r > prev);
                prev = r;
            }
        }
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let left = (m - a) / 6.0 * (f(a) + 4.0 * f(lm) + f(m));
        let right = (b - m) / 6.0 * (f(m) + 4.0 * f(rm) + f(b));
        if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            simpson(f, a, m, tol / 2.0, depth - 1) + simpson(f, m, b, tol / 2.0, depth - 1)
        }
    }

    #[test]
    fn pdf_integrates_to_one_and_is_continuous() {
        for &e in &[0.0, -0.4, 0.3, 0.9] {
            let p = EsnParams::new(0.5, 1.3, e).unwrap();
            let f = |x: f64| esn_pdf(x, &p);
            // split at the mode, where the density has a kink
            let total = simpson(&f, p.mu - 12.0 * p.sigma, p.mu, 1e-13, 40) + simpson(&f, p.mu, p.mu + 12.0 * p.sigma, 1e-13, 40);
            assert!((total - 1.0).abs() < 1e-9, "eps {e}: {total}");
            let below = esn_pdf(p.mu - 1e-12, &p);
            assert!((below - esn_pdf(p.mu, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_histogram_matches_pdf() {
        let p = EsnParams::new(0.2, 1.0, -0.4).unwrap();
        let n = 1_000_000;
        let spec = SyntheticSpec {
            kind: SyntheticKind::EsnSamples {
                mu: p.mu,
                sigma: p.sigma,
                eps: p.eps,
                count: n,
            },
            seed: 17,
        };
        let xs = gen_esn_samples(&spec).unwrap();
        let (lo, hi) = (-3.0, 5.0);
        let bins = 50;
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for x in xs {
            if x >= lo && x < hi {
                counts[((x - lo) / width) as usize] += 1;
            }
        }
        for (b, &cnt) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            let prob = simpson(&|x| esn_pdf(x, &p), a, a + width, 1e-12, 30);
            let expected = prob * n as f64;
            let sd = (expected * (1.0 - prob)).sqrt().max(1.0);
            assert!((cnt as f64 - expected).abs() < 5.0 * sd, "bin {b}: {cnt} vs {expected}");
        }
    }

    #[test]
    fn esn_mc_agreement_small() {
        let p = EsnParams::new(0.5, 1.0, -0.4).unwrap();
        let mc = rectification_mc(&p, &[1.0], 400_000, 5, 4);
        assert!(mc.rect_mean.z_score(esn_rect_mean(&p)) < 4.0);
        assert!(mc.clip_mean[0].z_score(esn_rect_clip_mean(&p, 1.0).unwrap()) < 4.0);
        assert!(mc.reduction[0].z_score(ood_reduction(&p, 1.0).unwrap()) < 4.0);
        let sym = EsnParams::new(0.5, 1.0, 0.0).unwrap();
        assert!(esn_rect_mean(&p) > esn_rect_mean(&sym));
    }

    #[test]
    fn mc_is_deterministic() {
        let p = EsnParams::new(0.25, 2.0, -0.1).unwrap();
        assert_eq!(rectification_mc(&p, &[0.5], 10_000, 1, 3), rectification_mc(&p, &[0.5], 10_000, 1, 3));
    }

    #[test]
    fn correlated_formula_cases() {
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0]));
        assert_eq!(dice_var_reduction_correlated(&diag, 2).unwrap(), 5.0);
        let rho = 0.3;
        let mut cov = diag.clone();
        cov[(0, 2)] = rho;
        cov[(2, 0)] = rho;
        // unit 0 dropped, unit 2 kept: 1 + 2 rho
        assert!((dice_var_reduction_correlated(&cov, 1).unwrap() - (1.0 + 2.0 * rho)).abs() < 1e-15);
        let mut bad = cov.clone();
        bad[(0, 2)] = 0.0;
        assert!(dice_var_reduction_correlated(&bad, 1).is_err());
    }

    #[test]
    fn var_reduction_edges() {
        let samples = correlated_samples(&[0.0, 1.0], &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])), 50_000, 3).unwrap();
        let (a, e) = dice_var_reduction(&[1.0, 2.0], 0, &samples).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(e, 0.0);
        let (a, e) = dice_var_reduction(&[1.0, 2.0], 2, &samples).unwrap();
        assert_eq!(a, 3.0);
        assert!((e - 3.0).abs() < 0.1);
        assert!(dice_var_reduction(&[1.0, 2.0], 1, &samples.rows(0, 1).into_owned()).is_err());
    }

    #[test]
    fn var_sum_examples() {
        let r = var_sum_check(&[2.0; 100], &[3.0; 100]).unwrap();
        assert!(r.pass && r.var_sum == 0.0);
        let mut rng = seeded(8);
        let n = 200_000;
        let a: Vec<f64> = (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let r = var_sum_check(&a, &b).unwrap();
        assert!(r.pass);
        assert!((r.var_sum - 4.25).abs() < 0.1);
    }

    #[test]
    fn positive_class_sums_transfer_reduction() {
        let w = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.2, -0.1, 0.4, 0.3]);
        let ood = EsnParams::new(0.5, 1.0, -0.4).unwrap();
        let (id, od) = logit_reduction_mc(&w, (0.5, 1.0), &ood, 1.0, 200_000, 2).unwrap();
        for c in 0..2 {
            assert!(od[c] > id[c]);
        }
    }
}
