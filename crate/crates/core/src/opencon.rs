//! Prototype-based open-world contrastive training with a linear-then-normalize
//! encoder: OOD split of unlabeled data, pseudo-labels, three contrastive
//! losses with analytic gradients, momentum prototypes, and EM-view checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data_io::{gen_sphere_mixture, EmbeddingSet, SyntheticKind, SyntheticSpec};
use crate::error::{invalid, Error, Result};
use crate::metrics::clustering_accuracy;
use crate::rng::{seeded, sub_seed, SeededRng};
use crate::stats::nearest_rank;

const UNIT_TOL: f64 = 1e-9;

/// One unit-norm prototype per class, known classes first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    m: DMatrix<f64>,
    gamma: f64,
    known: usize,
}

impl PrototypeStore {
    pub fn new(m: DMatrix<f64>, gamma: f64, known: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return invalid("momentum must lie in [0, 1]");
        }
        if known == 0 || known >= m.nrows() {
            return invalid("need 1 <= known classes < total classes");
        }
        for (i, r) in m.row_iter().enumerate() {
            if (r.norm() - 1.0).abs() > UNIT_TOL {
                return invalid(format!("prototype {i} is not unit norm"));
            }
        }
        Ok(PrototypeStore { m, gamma, known })
    }

    /// Random unit prototypes.
    pub fn random(classes: usize, d: usize, known: usize, gamma: f64, rng: &mut SeededRng) -> Result<Self> {
        let mut m = DMatrix::from_fn(classes, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut r in m.row_iter_mut() {
            let n = r.norm();
            r /= n;
        }
        PrototypeStore::new(m, gamma, known)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn classes(&self) -> usize {
        self.m.nrows()
    }

    pub fn known(&self) -> usize {
        self.known
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `mu_c := normalize(gamma mu_c + (1 - gamma) z)`.
    pub fn update(&mut self, z: &[f64], c: usize) -> Result<()> {
        if c >= self.classes() {
            return invalid(format!("class {c} out of range"));
        }
        if z.len() != self.m.ncols() {
            return Err(Error::Shape("embedding dimension differs from prototypes".into()));
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return invalid("embedding is not unit norm");
        }
        let mut row: Vec<f64> = (0..z.len()).map(|j| self.gamma * self.m[(c, j)] + (1.0 - self.gamma) * z[j]).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::Degenerate("prototype update cancelled to zero".into()));
        }
        for v in &mut row {
            *v /= n;
        }
        for (j, v) in row.into_iter().enumerate() {
            self.m[(c, j)] = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_n: f64,
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub tau_n: f64,
    pub tau_l: f64,
    pub tau_u: f64,
    /// Percentile of labeled known-class scores used as the novelty level.
    pub percentile: f64,
    pub epochs: usize,
    /// Unlabeled samples per step; labeled samples are spread evenly over the steps.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Standard deviation of the Gaussian jitter that forms each view.
    pub jitter: f64,
    pub seed: u64,
    pub d_in: usize,
    pub d: usize,
}

impl TrainConfig {
    pub fn standard(seed: u64) -> Self {
        TrainConfig {
            lambda_n: 1.0,
            lambda_l: 1.0,
            lambda_u: 1.0,
            tau_n: 0.2,
            tau_l: 0.2,
            tau_u: 0.2,
            percentile: 10.0,
            epochs: 30,
            batch_size: 100,
            learning_rate: 0.5,
            gamma: 0.9,
            jitter: 0.1,
            seed,
            d_in: 16,
            d: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_n", self.lambda_n), ("lambda_l", self.lambda_l), ("lambda_u", self.lambda_u)] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be non-negative"));
            }
        }
        for (name, v) in [("tau_n", self.tau_n), ("tau_l", self.tau_l), ("tau_u", self.tau_u), ("learning_rate", self.learning_rate)] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be positive"));
            }
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return invalid("percentile must lie in [0, 100]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid("gamma must lie in [0, 1]");
        }
        if !(self.jitter >= 0.0) {
            return invalid("jitter must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.d_in == 0 || self.d == 0 {
            return invalid("epochs, batch_size and dimensions must be positive");
        }
        Ok(())
    }
}

/// Raw features with ground truth, split into labeled and unlabeled index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldData {
    pub x: DMatrix<f64>,
    pub truth: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub known: usize,
    pub classes: usize,
}

impl OpenWorldData {
    pub fn new(x: DMatrix<f64>, truth: Vec<usize>, labeled: Vec<usize>, known: usize, classes: usize) -> Result<Self> {
        let n = x.nrows();
        if truth.len() != n {
            return Err(Error::Shape("one label per row required".into()));
        }
        if truth.iter().any(|&t| t >= classes) {
            return invalid("label out of range");
        }
        let mut is_labeled = vec![false; n];
        for &i in &labeled {
            if i >= n || is_labeled[i] {
                return invalid("labeled indices out of range or repeated");
            }
            if truth[i] >= known {
                return invalid("labeled sample from a novel class");
            }
            is_labeled[i] = true;
        }
        for c in 0..known {
            if !labeled.iter().any(|&i| truth[i] == c) {
                return invalid(format!("known class {c} has no labeled sample"));
            }
        }
        let unlabeled = (0..n).filter(|&i| !is_labeled[i]).collect();
        let mut labeled = labeled;
        labeled.sort_unstable();
        Ok(OpenWorldData {
            x,
            truth,
            labeled,
            unlabeled,
            known,
            classes,
        })
    }
}

/// Unit centers with pairwise cosine at most `max_cos`, by rejection.
pub fn separated_centers(classes: usize, d: usize, max_cos: f64, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..10_000 {
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let ok = (0..classes).all(|i| (i + 1..classes).all(|j| centers[i].iter().zip(&centers[j]).map(|(a, b)| a * b).sum::<f64>() <= max_cos));
        if ok {
            return Ok(centers);
        }
    }
    Err(Error::Degenerate("could not place separated centers".into()))
}

/// Three classes on the 16-sphere (class 0 known), 200 points each with noise
/// 0.15 and centers at least 60 degrees apart; every other class-0 point is labeled.
pub fn synthetic_benchmark(seed: u64) -> Result<OpenWorldData> {
    let (classes, d, per) = (3, 16, 200);
    let mut rng = seeded(sub_seed(seed, 0));
    let centers = separated_centers(classes, d, 0.5, &mut rng)?;
    let spec = SyntheticSpec {
        kind: SyntheticKind::SphereMixture {
            centers,
            sigma: 0.15,
            counts: vec![per; classes],
        },
        seed: sub_seed(seed, 1),
    };
    let set = gen_sphere_mixture(&spec)?;
    let truth: Vec<usize> = set.labels.as_ref().expect("mixture is labeled").iter().map(|&l| l as usize).collect();
    let labeled = (0..per).step_by(2).collect();
    OpenWorldData::new(set.vectors, truth, labeled, 1, classes)
}

/// Rows `normalize(x W)`.
pub fn embed_rows(w: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != w.nrows() {
        return Err(Error::Shape(format!("raw dimension {} differs from encoder input {}", x.ncols(), w.nrows())));
    }
    let mut u = x * w;
    for (i, mut r) in u.row_iter_mut().enumerate() {
        let n = r.norm();
        if n < 1e-12 {
            return Err(Error::Degenerate(format!("row {i} embeds to zero")));
        }
        r /= n;
    }
    Ok(u)
}

pub fn embed(w: &DMatrix<f64>, raw: &EmbeddingSet) -> Result<EmbeddingSet> {
    EmbeddingSet::new_normalized(embed_rows(w, &raw.vectors)?, raw.labels.clone())
}

/// Known-class score `max_{j known} mu_j . z` per row.
pub fn known_scores(z: &DMatrix<f64>, store: &PrototypeStore) -> Vec<f64> {
    let sims = z * store.m.transpose();
    sims.row_iter()
        .map(|r| r.iter().take(store.known).copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Rows whose known-class score is strictly below the `p`-percentile of the
/// labeled scores, and that level.
pub fn split_ood(z: &DMatrix<f64>, store: &PrototypeStore, labeled_scores: &[f64], p: f64) -> Result<(Vec<usize>, f64)> {
    if labeled_scores.is_empty() {
        return invalid("no labeled scores");
    }
    let lambda = nearest_rank(labeled_scores, p)?;
    let novel = known_scores(z, store)
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s < lambda)
        .map(|(i, _)| i)
        .collect();
    Ok((novel, lambda))
}

fn argmax_from(row: &[f64], start: usize) -> usize {
    let mut best = start;
    for j in start + 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// `argmax_j mu_j . z` over all prototypes; ties go to the lower index.
pub fn pseudo_label(z: &DMatrix<f64>, store: &PrototypeStore) -> Vec<usize> {
    let sims = z * store.m.transpose();
    sims.row_iter()
        .map(|r| argmax_from(&r.iter().copied().collect::<Vec<_>>(), 0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to each embedding row.
    pub grad: DMatrix<f64>,
    /// Alignment part `-(1/|P|) sum_p z.z_p / tau`, averaged like the loss.
    pub alignment: f64,
    /// Uniformity part `log sum_{a != i} exp(z.z_a / tau)`, averaged like the loss.
    pub uniformity: f64,
    pub anchors: usize,
    pub skipped: usize,
}

/// Mean per-anchor contrastive loss where the positives of anchor `i` are the
/// other rows sharing `groups[i]` and the contrast set is every other row.
pub fn contrastive_loss(z: &DMatrix<f64>, groups: &[usize], tau: f64) -> Result<ContrastiveOutput> {
    if !(tau > 0.0) {
        return invalid("temperature must be positive");
    }
    let n = z.nrows();
    if groups.len() != n {
        return Err(Error::Shape("one group id per row required".into()));
    }
    let sims = z * z.transpose() / tau;
    let mut grad = DMatrix::zeros(n, z.ncols());
    let (mut loss, mut align, mut unif) = (0.0, 0.0, 0.0);
    let mut anchors = 0;
    let mut skipped = 0;
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && groups[j] == groups[i]).collect();
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        anchors += 1;
        let max = (0..n).filter(|&a| a != i).map(|a| sims[(i, a)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for a in 0..n {
            weights[a] = if a == i { 0.0 } else { (sims[(i, a)] - max).exp() };
            total += weights[a];
        }
        let lse = max + total.ln();
        let a_part = -pos.iter().map(|&p| sims[(i, p)]).sum::<f64>() / pos.len() as f64;
        align += a_part;
        unif += lse;
        loss += a_part + lse;
        // gradient of this anchor's term, unscaled by the anchor count
        let inv_p = 1.0 / (tau * pos.len() as f64);
        for &p in &pos {
            for j in 0..z.ncols() {
                grad[(i, j)] -= inv_p * z[(p, j)];
                grad[(p, j)] -= inv_p * z[(i, j)];
            }
        }
        for a in 0..n {
            if a == i {
                continue;
            }
            let w = weights[a] / total / tau;
            for j in 0..z.ncols() {
                grad[(i, j)] += w * z[(a, j)];
                grad[(a, j)] += w * z[(i, j)];
            }
        }
    }
    if anchors > 0 {
        let s = 1.0 / anchors as f64;
        loss *= s;
        align *= s;
        unif *= s;
        grad *= s;
    }
    Ok(ContrastiveOutput {
        loss,
        grad,
        alignment: align,
        uniformity: unif,
        anchors,
        skipped,
    })
}

/// How the positives of a batch of two stacked view blocks are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum PositiveRule<'a> {
    /// Rows with the same class (true or predicted) are positives.
    SameClass(&'a [usize]),
    /// Only the other view of the same sample is a positive.
    SameSample,
}

impl PositiveRule<'_> {
    /// Group ids for `2 * samples` rows laid out as `[view 1 block; view 2 block]`.
    pub fn groups(&self, samples: usize) -> Result<Vec<usize>> {
        match self {
            PositiveRule::SameClass(labels) => {
                if labels.len() != samples {
                    return Err(Error::Shape("one label per sample required".into()));
                }
                Ok(labels.iter().chain(labels.iter()).copied().collect())
            }
            PositiveRule::SameSample => Ok((0..samples).chain(0..samples).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_n: f64,
    pub l_l: f64,
    pub l_u: f64,
    pub total: f64,
}

/// `lambda_n L_n + lambda_l L_l + lambda_u L_u`.
pub fn opencon_loss(l_n: f64, l_l: f64, l_u: f64, cfg: &TrainConfig) -> LossParts {
    LossParts {
        l_n,
        l_l,
        l_u,
        total: cfg.lambda_n * l_n + cfg.lambda_l * l_l + cfg.lambda_u * l_u,
    }
}

/// Backpropagates `dL/dz` through `z = normalize(v W)` to `dL/dW`.
pub fn encoder_grad(w: &DMatrix<f64>, v: &DMatrix<f64>, gz: &DMatrix<f64>) -> DMatrix<f64> {
    let u = v * w;
    let mut gu = DMatrix::zeros(u.nrows(), u.ncols());
    for i in 0..u.nrows() {
        let norm = u.row(i).norm();
        let z = u.row(i) / norm;
        let g = gz.row(i);
        let dot = g.dot(&z);
        for j in 0..u.ncols() {
            gu[(i, j)] = (g[j] - dot * z[j]) / norm;
        }
    }
    v.transpose() * gu
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    /// Novelty level averaged over the epoch's steps.
    pub lambda: f64,
    /// Novel-set size summed over the epoch's steps.
    pub novel_count: usize,
    pub novel_acc: f64,
    pub known_acc: f64,
    pub all_acc: f64,
    pub stagnant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub w: DMatrix<f64>,
    pub store: PrototypeStore,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, classes: usize, known: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(sub_seed(cfg.seed, 3));
        let store = PrototypeStore::random(classes, cfg.d, known, cfg.gamma, &mut rng)?;
        let w = DMatrix::from_fn(cfg.d_in, cfg.d, |i, j| if i == j { 1.0 } else { 0.0 });
        Ok(TrainState {
            w,
            store,
            epoch: 0,
            history: Vec::new(),
            warnings: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub novel_acc: f64,
    pub known_acc: f64,
    pub all_acc: f64,
}

/// Prototype-argmax accuracy on the unlabeled data: Hungarian-matched on the
/// novel-class subset and overall, exact on the known-class subset.
pub fn evaluate(state: &TrainState, data: &OpenWorldData) -> Result<Evaluation> {
    let x = select_rows(&data.x, &data.unlabeled);
    let pred = pseudo_label(&embed_rows(&state.w, &x)?, &state.store);
    let truth: Vec<usize> = data.unlabeled.iter().map(|&i| data.truth[i]).collect();
    let (mut np, mut nt, mut known_hits, mut known_total) = (Vec::new(), Vec::new(), 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(&truth) {
        if t >= data.known {
            np.push(p);
            nt.push(t);
        } else {
            known_total += 1;
            known_hits += usize::from(p == t);
        }
    }
    let novel_acc = if np.is_empty() { 0.0 } else { clustering_accuracy(&np, &nt)? };
    let known_acc = if known_total == 0 { 0.0 } else { known_hits as f64 / known_total as f64 };
    Ok(Evaluation {
        novel_acc,
        known_acc,
        all_acc: clustering_accuracy(&pred, &truth)?,
    })
}

pub(crate) fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

/// Two jittered, re-normalized copies of the rows, stacked `[view 1; view 2]`.
pub fn make_views(x: &DMatrix<f64>, jitter: f64, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(2 * n, d);
    for block in 0..2 {
        for i in 0..n {
            for j in 0..d {
                out[(block * n + i, j)] = x[(i, j)] + jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    for (i, mut r) in out.row_iter_mut().enumerate() {
        let norm = r.norm();
        if norm < 1e-12 {
            return Err(Error::Degenerate(format!("view {i} is zero")));
        }
        r /= norm;
    }
    Ok(out)
}

struct StepOutput {
    loss: LossParts,
    lambda: f64,
    novel: usize,
    grad_norm: f64,
}

fn train_step(state: &mut TrainState, data: &OpenWorldData, cfg: &TrainConfig, bl: &[usize], bu: &[usize], rng: &mut SeededRng) -> Result<StepOutput> {
    let xl = select_rows(&data.x, bl);
    let xu = select_rows(&data.x, bu);
    let zl = embed_rows(&state.w, &xl)?;
    let zu = embed_rows(&state.w, &xu)?;
    let (novel, lambda) = split_ood(&zu, &state.store, &known_scores(&zl, &state.store), cfg.percentile)?;
    let yhat = pseudo_label(&zu, &state.store);

    let mut dw = DMatrix::zeros(state.w.nrows(), state.w.ncols());
    let yl: Vec<usize> = bl.iter().map(|&i| data.truth[i]).collect();
    let vl = make_views(&xl, cfg.jitter, rng)?;
    let ol = contrastive_loss(&embed_rows(&state.w, &vl)?, &PositiveRule::SameClass(&yl).groups(bl.len())?, cfg.tau_l)?;
    dw += encoder_grad(&state.w, &vl, &ol.grad) * cfg.lambda_l;

    let vu = make_views(&xu, cfg.jitter, rng)?;
    let ou = contrastive_loss(&embed_rows(&state.w, &vu)?, &PositiveRule::SameSample.groups(bu.len())?, cfg.tau_u)?;
    dw += encoder_grad(&state.w, &vu, &ou.grad) * cfg.lambda_u;

    let mut l_n = 0.0;
    if novel.len() > 1 {
        let xn = select_rows(&xu, &novel);
        let yn: Vec<usize> = novel.iter().map(|&i| yhat[i]).collect();
        let vn = make_views(&xn, cfg.jitter, rng)?;
        let on = contrastive_loss(&embed_rows(&state.w, &vn)?, &PositiveRule::SameClass(&yn).groups(novel.len())?, cfg.tau_n)?;
        dw += encoder_grad(&state.w, &vn, &on.grad) * cfg.lambda_n;
        l_n = on.loss;
    }
    let grad_norm = dw.norm();
    state.w -= dw * cfg.learning_rate;

    // prototypes follow the updated encoder, in dataset index order
    let zl = embed_rows(&state.w, &xl)?;
    let zu = embed_rows(&state.w, &xu)?;
    let mut order: Vec<usize> = (0..bl.len()).collect();
    order.sort_by_key(|&i| bl[i]);
    for i in order {
        let z: Vec<f64> = zl.row(i).iter().copied().collect();
        state.store.update(&z, data.truth[bl[i]])?;
    }
    let mut order = novel.clone();
    order.sort_by_key(|&i| bu[i]);
    for i in order {
        let z: Vec<f64> = zu.row(i).iter().copied().collect();
        let sims: Vec<f64> = (0..state.store.classes()).map(|c| state.store.m.row(c).dot(&zu.row(i))).collect();
        let c = argmax_from(&sims, state.store.known);
        state.store.update(&z, c)?;
    }
    Ok(StepOutput {
        loss: opencon_loss(l_n, ol.loss, ou.loss, cfg),
        lambda,
        novel: novel.len(),
        grad_norm,
    })
}

/// Runs `cfg.epochs` epochs of shuffled steps; deterministic given the seed.
pub fn em_train(data: &OpenWorldData, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if data.x.ncols() != cfg.d_in {
        return Err(Error::Shape("raw dimension differs from d_in".into()));
    }
    let mut state = TrainState::init(cfg, data.classes, data.known)?;
    let mut rng = seeded(sub_seed(cfg.seed, 2));
    let steps = (data.unlabeled.len() / cfg.batch_size).max(1);
    let mut flat_epochs = 0;
    for epoch in 0..cfg.epochs {
        let mut pl = data.labeled.clone();
        pl.shuffle(&mut rng);
        let mut pu = data.unlabeled.clone();
        pu.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut lambda = 0.0;
        let mut novel_count = 0;
        let mut moved = false;
        for b in 0..steps {
            let bl = &pl[b * pl.len() / steps..(b + 1) * pl.len() / steps];
            let bu = &pu[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(pu.len())];
            let out = train_step(&mut state, data, cfg, bl, bu, &mut rng)?;
            sum.l_n += out.loss.l_n;
            sum.l_l += out.loss.l_l;
            sum.l_u += out.loss.l_u;
            sum.total += out.loss.total;
            lambda += out.lambda;
            novel_count += out.novel;
            moved |= out.grad_norm > 0.0;
        }
        let s = 1.0 / steps as f64;
        let loss = LossParts {
            l_n: sum.l_n * s,
            l_l: sum.l_l * s,
            l_u: sum.l_u * s,
            total: sum.total * s,
        };
        flat_epochs = if moved { 0 } else { flat_epochs + 1 };
        let stagnant = flat_epochs >= 3;
        if stagnant {
            state.warnings.push(format!("epoch {epoch}: encoder gradient zero for {flat_epochs} consecutive epochs"));
        }
        let ev = evaluate(&state, data)?;
        state.epoch = epoch + 1;
        state.history.push(EpochRecord {
            epoch,
            loss,
            lambda: lambda * s,
            novel_count,
            novel_acc: ev.novel_acc,
            known_acc: ev.known_acc,
            all_acc: ev.all_acc,
            stagnant,
        });
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    /// Alignment sum with the current prototypes and with normalized class means.
    pub alignment_current: f64,
    pub alignment_optimal: f64,
    pub prototype_optimal: bool,
    /// Largest `|L_n - (L_a + L_b)|` over the checked batches.
    pub decomposition_error: f64,
    pub batches: usize,
    pub mean_novel_loss: f64,
    pub same_class_rate: f64,
    pub mean_classifier_loss: f64,
    /// `mean_novel_loss - (1 - rate) / tau * mean_classifier_loss`, reported only.
    pub bound_margin: f64,
}

/// EM-view checks on the current state's novel set: M-step optimality of
/// class-mean prototypes, the loss decomposition, and the lower bound.
pub fn em_consistency_checks(state: &TrainState, data: &OpenWorldData, cfg: &TrainConfig, batches: usize) -> Result<ConsistencyReport> {
    let xl = select_rows(&data.x, &data.labeled);
    let xu = select_rows(&data.x, &data.unlabeled);
    let zl = embed_rows(&state.w, &xl)?;
    let zu = embed_rows(&state.w, &xu)?;
    let (novel, _) = split_ood(&zu, &state.store, &known_scores(&zl, &state.store), cfg.percentile)?;
    if novel.len() < 2 {
        return Err(Error::Degenerate("novel set has fewer than two samples".into()));
    }
    let zn = select_rows(&zu, &novel);
    let labels = pseudo_label(&zn, &state.store);
    let classes = state.store.classes();
    let d = zn.ncols();

    let mut means = vec![DVector::<f64>::zeros(d); classes];
    let mut counts = vec![0usize; classes];
    for (i, &c) in labels.iter().enumerate() {
        means[c] += zn.row(i).transpose();
        counts[c] += 1;
    }
    let mut current = 0.0;
    let mut optimal = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        current += zn.row(i).dot(&state.store.m.row(c));
        optimal += zn.row(i).transpose().dot(&means[c].normalize());
    }

    let mut worst: f64 = 0.0;
    let mut rng = seeded(sub_seed(cfg.seed, 4));
    let take = cfg.batch_size.min(zn.nrows());
    let mut idx: Vec<usize> = (0..zn.nrows()).collect();
    for _ in 0..batches {
        idx.shuffle(&mut rng);
        let pick = &idx[..take];
        let z = select_rows(&zn, pick);
        let g: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
        let o = contrastive_loss(&z, &g, cfg.tau_n)?;
        worst = worst.max((o.loss - (o.alignment + o.uniformity)).abs());
    }

    let full = contrastive_loss(&zn, &labels, cfg.tau_n)?;
    let n = zn.nrows() as f64;
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let rate: f64 = probs.iter().map(|p| p * p).sum();
    let mut sup = 0.0;
    let mut weight = 0.0;
    for cp in 0..classes {
        for cm in 0..classes {
            if cp == cm || counts[cp] == 0 || counts[cm] == 0 {
                continue;
            }
            let mu_p = &means[cp] / counts[cp] as f64;
            let mu_m = &means[cm] / counts[cm] as f64;
            let diff = mu_p - mu_m;
            let avg: f64 = labels
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == cp)
                .map(|(i, _)| zn.row(i).transpose().dot(&diff))
                .sum::<f64>()
                / counts[cp] as f64;
            let w = probs[cp] * probs[cm];
            sup -= w * avg;
            weight += w;
        }
    }
    let mean_classifier_loss = if weight > 0.0 { sup / weight } else { 0.0 };
    Ok(ConsistencyReport {
        alignment_current: current,
        alignment_optimal: optimal,
        prototype_optimal: optimal >= current - 1e-10 * current.abs().max(1.0),
        decomposition_error: worst,
        batches,
        mean_novel_loss: full.loss,
        same_class_rate: rate,
        mean_classifier_loss,
        bound_margin: full.loss - (1.0 - rate) / cfg.tau_n * mean_classifier_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(m: DMatrix<f64>) -> DMatrix<f64> {
        let mut m = m;
        for mut r in m.row_iter_mut() {
            let n = r.norm();
            r /= n;
        }
        m
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        unit_rows(DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
    }

    #[test]
    fn update_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let mut s = PrototypeStore::new(m.clone(), 0.9, 1).unwrap();
        s.update(&[0.0, 1.0], 0).unwrap();
        assert!((s.m[(0, 0)] - 0.993_883_7).abs() < 1e-6);
        assert!((s.m[(0, 1)] - 0.110_431_5).abs() < 1e-6);
        assert_eq!(s.m.row(1), m.row(1));
        let mut frozen = PrototypeStore::new(m.clone(), 1.0, 1).unwrap();
        frozen.update(&[0.6, 0.8], 0).unwrap();
        assert_eq!(frozen.m, m);
        let mut copy = PrototypeStore::new(m.clone(), 0.0, 1).unwrap();
        copy.update(&[0.6, 0.8], 1).unwrap();
        assert!((copy.m[(1, 0)] - 0.6).abs() < 1e-15);
        assert!(copy.update(&[0.6, 0.8], 2).is_err());
        assert!(PrototypeStore::new(m, 0.5, 2).is_err());
    }

    #[test]
    fn split_examples() {
        let store = PrototypeStore::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), 0.9, 1).unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (novel, lambda) = split_ood(&z, &store, &[1.0; 10], 90.0).unwrap();
        assert_eq!(lambda, 1.0);
        assert_eq!(novel, vec![1]);
        // a row scoring exactly the level is not novel
        let (novel, lambda) = split_ood(&z, &store, &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(lambda, 0.0);
        assert!(novel.is_empty());
        assert!(split_ood(&z, &store, &[], 50.0).is_err());
    }

    #[test]
    fn pseudo_label_rules() {
        let m = random_unit(4, 5, 1);
        let store = PrototypeStore::new(m.clone(), 0.9, 1).unwrap();
        assert_eq!(pseudo_label(&m.rows(3, 1).into_owned(), &store), vec![3]);
        let mut twin = m.clone();
        let r0 = twin.row(0).into_owned();
        twin.set_row(2, &r0);
        let store2 = PrototypeStore::new(twin.clone(), 0.9, 1).unwrap();
        assert_eq!(pseudo_label(&twin.rows(2, 1).into_owned(), &store2), vec![0]);
    }

    #[test]
    fn two_view_loss_by_hand() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
        let o = contrastive_loss(&z, &PositiveRule::SameSample.groups(1).unwrap(), 0.5).unwrap();
        // each anchor's only contrast row is its positive: -s + log(exp(s)) = 0
        assert!(o.loss.abs() < 1e-15);
        assert_eq!(o.anchors, 2);
        let z3 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.6, 0.8, 0.0, 1.0]);
        let o3 = contrastive_loss(&z3, &[0, 0, 1], 1.0).unwrap();
        let s: f64 = 0.6;
        let per = -s + (s.exp() + 0.0f64.exp()).ln();
        let per2 = -s + (s.exp() + 0.8f64.exp()).ln();
        assert!((o3.loss - (per + per2) / 2.0).abs() < 1e-12);
        assert_eq!(o3.skipped, 1);
        assert!(contrastive_loss(&z3, &[0, 0, 1], 0.0).is_err());
    }

    #[test]
    fn clustered_labels_beat_shuffled() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let good = contrastive_loss(&z, &[0, 0, 1, 1], 1.0).unwrap().loss;
        let bad = contrastive_loss(&z, &[0, 1, 0, 1], 1.0).unwrap().loss;
        assert!(good < bad);
    }

    fn fd_check(z: &DMatrix<f64>, groups: &[usize], tau: f64) {
        let o = contrastive_loss(z, groups, tau).unwrap();
        let h = 1e-6;
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                let mut p = z.clone();
                p[(i, j)] += h;
                let mut m = z.clone();
                m[(i, j)] -= h;
                let fd = (contrastive_loss(&p, groups, tau).unwrap().loss - contrastive_loss(&m, groups, tau).unwrap().loss) / (2.0 * h);
                let rel = (fd - o.grad[(i, j)]).abs() / o.grad[(i, j)].abs().max(1e-4);
                assert!(rel < 1e-5, "({i},{j}) {fd} vs {}", o.grad[(i, j)]);
            }
        }
    }

    #[test]
    fn loss_gradients_match_differences() {
        let z = random_unit(8, 4, 7);
        fd_check(&z, &PositiveRule::SameSample.groups(4).unwrap(), 0.5);
        fd_check(&z, &PositiveRule::SameClass(&[0, 1, 0, 2]).groups(4).unwrap(), 0.2);
    }

    #[test]
    fn encoder_gradient_matches_difference() {
        let v = random_unit(6, 5, 2);
        let mut rng = seeded(9);
        let w = DMatrix::from_fn(5, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let groups = [0, 1, 2, 0, 1, 2];
        let f = |w: &DMatrix<f64>| contrastive_loss(&embed_rows(w, &v).unwrap(), &groups, 0.3).unwrap();
        let g = encoder_grad(&w, &v, &f(&w).grad);
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..3 {
                let mut p = w.clone();
                p[(i, j)] += h;
                let mut m = w.clone();
                m[(i, j)] -= h;
                let fd = (f(&p).loss - f(&m).loss) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1e-4) < 1e-5);
            }
        }
    }

    #[test]
    fn embed_contract() {
        let x = random_unit(5, 4, 3);
        let eye = DMatrix::identity(4, 4);
        assert!((embed_rows(&eye, &x).unwrap() - &x).abs().max() < 1e-15);
        let scaled = embed_rows(&eye, &(&x * 5.0)).unwrap();
        assert!((scaled - &x).abs().max() < 1e-15);
        assert!(embed_rows(&DMatrix::zeros(4, 2), &x).is_err());
    }

    #[test]
    fn loss_weights() {
        let mut cfg = TrainConfig::standard(0);
        cfg.lambda_n = 0.0;
        cfg.lambda_u = 0.0;
        cfg.lambda_l = 2.0;
        assert_eq!(opencon_loss(3.0, 1.5, 7.0, &cfg).total, 3.0);
    }
}
