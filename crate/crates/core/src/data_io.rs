//! Embedding and head containers, the EMB1 interchange format, and the
//! seeded synthetic generators used by every other module.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::rng::seeded;

const MAGIC: &[u8; 4] = b"EMB1";
const FLAG_LABELS: u8 = 0b01;
const FLAG_NORMALIZED: u8 = 0b10;

/// `n` row vectors of dimension `d`, optional labels (-1 = unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: DMatrix<f64>,
    pub labels: Option<Vec<i32>>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn new(vectors: DMatrix<f64>, labels: Option<Vec<i32>>) -> Result<Self> {
        let set = EmbeddingSet {
            vectors,
            labels,
            normalized: false,
        };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set and marks it normalized; fails if any row is not unit norm.
    pub fn new_normalized(vectors: DMatrix<f64>, labels: Option<Vec<i32>>) -> Result<Self> {
        let mut set = Self::new(vectors, labels)?;
        set.normalized = true;
        set.validate()?;
        Ok(set)
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<i32>>) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(m, labels)
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn d(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() == 0 {
            return invalid("embedding dimension must be at least 1");
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n() {
                return invalid(format!("{} labels for {} rows", l.len(), self.n()));
            }
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite embedding value");
        }
        if self.normalized {
            for i in 0..self.n() {
                let norm = self.vectors.row(i).norm();
                if (norm - 1.0).abs() > 1e-9 {
                    return invalid(format!("row {i} has norm {norm}, expected 1"));
                }
            }
        }
        Ok(())
    }
}

/// Final-layer weights `w` (d x C) and bias `b` (C).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ClassifierHead {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if w.ncols() < 2 {
            return invalid("a head needs at least two classes");
        }
        if w.ncols() != b.len() {
            return Err(Error::Shape(format!(
                "W has {} columns but b has length {}",
                w.ncols(),
                b.len()
            )));
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return invalid("non-finite head parameter");
        }
        Ok(ClassifierHead { w, b })
    }

    pub fn classes(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Writes the EMB1 binary layout. Values are stored as f32.
pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut sink: W) -> Result<usize> {
    set.validate()?;
    let n = u32::try_from(set.n()).map_err(|_| Error::Validation("too many rows".into()))?;
    let d = u32::try_from(set.d()).map_err(|_| Error::Validation("dimension too large".into()))?;
    let mut buf = Vec::with_capacity(16 + 4 * set.n() * (set.d() + 1));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    let mut flags = 0u8;
    if set.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if set.normalized {
        flags |= FLAG_NORMALIZED;
    }
    buf.extend_from_slice(&[flags, 0, 0, 0]);
    for i in 0..set.n() {
        for j in 0..set.d() {
            buf.extend_from_slice(&(set.vectors[(i, j)] as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &set.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

/// Parses EMB1, falling back to CSV when the magic is absent and the input
/// is text. The result always has `normalized = false`.
pub fn read_embeddings<R: Read>(mut source: R) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        return parse_emb1(&bytes);
    }
    match std::str::from_utf8(&bytes) {
        Ok(text) => parse_csv(text),
        Err(_) => Err(Error::Format("missing EMB1 magic".into())),
    }
}

fn parse_emb1(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("header shorter than 16 bytes".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let n = u32_at(4) as usize;
    let d = u32_at(8) as usize;
    let flags = bytes[12];
    let cells = n
        .checked_mul(d)
        .ok_or_else(|| Error::Truncated("n*d overflows".into()))?;
    let mut need = cells
        .checked_mul(4)
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::Truncated("payload size overflows".into()))?;
    if flags & FLAG_LABELS != 0 {
        need = need
            .checked_add(4 * n)
            .ok_or_else(|| Error::Truncated("payload size overflows".into()))?;
    }
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "declared {n}x{d} needs {need} bytes, got {}",
            bytes.len()
        )));
    }
    let f32_at = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            m[(i, j)] = f32_at(16 + 4 * (i * d + j)) as f64;
        }
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let base = 16 + 4 * cells;
        Some(
            (0..n)
                .map(|i| {
                    let o = base + 4 * i;
                    i32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
                })
                .collect(),
        )
    } else {
        None
    };
    EmbeddingSet::new(m, labels)
}

fn parse_csv(text: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let labeled = match lines.peek() {
        Some(first) if first.trim() == "#labeled" => {
            lines.next();
            true
        }
        _ => false,
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if labeled {
            let last = fields
                .pop()
                .ok_or_else(|| Error::Format(format!("line {ln}: empty")))?;
            labels.push(
                last.parse::<i32>()
                    .map_err(|_| Error::Format(format!("line {ln}: bad label {last:?}")))?,
            );
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {ln}: bad number {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    EmbeddingSet::from_rows(&rows, labeled.then_some(labels))
}

/// CSV form of a head: `#head` line, `d` rows of W, then b.
pub fn write_head<W: Write>(head: &ClassifierHead, mut sink: W) -> Result<()> {
    let mut out = String::from("#head\n");
    let fmt_row = |vals: Vec<f64>| {
        vals.iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    for i in 0..head.dim() {
        out.push_str(&fmt_row(head.w.row(i).iter().copied().collect()));
        out.push('\n');
    }
    out.push_str(&fmt_row(head.b.iter().copied().collect()));
    out.push('\n');
    sink.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_head<R: Read>(mut source: R) -> Result<ClassifierHead> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("#head") {
        return Err(Error::Format("head file must start with #head".into()));
    }
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad number {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() < 2 {
        return Err(Error::Format("head needs weight rows and a bias row".into()));
    }
    let (b, w) = rows.split_last().unwrap();
    let c = b.len();
    if w.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("weight rows and bias differ in length".into()));
    }
    ClassifierHead::new(
        DMatrix::from_fn(w.len(), c, |i, j| w[i][j]),
        DVector::from_column_slice(b),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    SphereMixture {
        centers: Vec<Vec<f64>>,
        sigma: f64,
        counts: Vec<usize>,
    },
    EsnSamples {
        mu: f64,
        sigma: f64,
        eps: f64,
        count: usize,
    },
    UnitContributions {
        means: Vec<f64>,
        sds: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            SyntheticKind::SphereMixture {
                centers,
                sigma,
                counts,
            } => {
                if centers.is_empty() || centers.len() != counts.len() {
                    return invalid("need one count per center");
                }
                let d = centers[0].len();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    return invalid("centers must share a non-zero dimension");
                }
                for (i, c) in centers.iter().enumerate() {
                    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > 1e-9 {
                        return invalid(format!("center {i} is not unit norm"));
                    }
                }
                // sigma = 0 is accepted as the noiseless degenerate case
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return invalid("sigma must be non-negative");
                }
                if counts.iter().any(|&c| c == 0) {
                    return invalid("counts must be at least 1");
                }
            }
            SyntheticKind::EsnSamples {
                sigma, eps, count, ..
            } => {
                if !(*sigma > 0.0) {
                    return invalid("sigma must be positive");
                }
                if !(-1.0..=1.0).contains(eps) {
                    return invalid("eps must lie in [-1, 1]");
                }
                if *count == 0 {
                    return invalid("count must be at least 1");
                }
            }
            SyntheticKind::UnitContributions { means, sds, count } => {
                if means.is_empty() || means.len() != sds.len() {
                    return invalid("means and sds must have equal non-zero length");
                }
                if sds.iter().any(|s| !(*s > 0.0)) {
                    return invalid("standard deviations must be positive");
                }
                if *count == 0 {
                    return invalid("count must be at least 1");
                }
            }
        }
        Ok(())
    }
}

/// Rows are `normalize(center_c + sigma * g)`, class by class in order.
pub fn gen_sphere_mixture(spec: &SyntheticSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let SyntheticKind::SphereMixture {
        centers,
        sigma,
        counts,
    } = &spec.kind
    else {
        return invalid("spec is not a sphere mixture");
    };
    let d = centers[0].len();
    let n: usize = counts.iter().sum();
    let mut rng = seeded(spec.seed);
    let mut m = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, (center, &count)) in centers.iter().zip(counts).enumerate() {
        for _ in 0..count {
            if *sigma == 0.0 {
                for j in 0..d {
                    m[(row, j)] = center[j];
                }
            } else {
                let v = perturbed_unit(&mut rng, center, *sigma)?;
                for j in 0..d {
                    m[(row, j)] = v[j];
                }
            }
            labels.push(c as i32);
            row += 1;
        }
    }
    EmbeddingSet::new_normalized(m, Some(labels))
}

fn perturbed_unit<R: Rng>(rng: &mut R, center: &[f64], sigma: f64) -> Result<Vec<f64>> {
    for _ in 0..2 {
        let v: Vec<f64> = center
            .iter()
            .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Err(Error::Degenerate("zero vector after perturbation, twice".into()))
}

/// With probability (1+eps)/2 draws `mu - (1+eps) sigma |g|`, otherwise
/// `mu + (1-eps) sigma |g|`.
pub fn gen_esn_samples(spec: &SyntheticSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let SyntheticKind::EsnSamples {
        mu,
        sigma,
        eps,
        count,
    } = spec.kind
    else {
        return invalid("spec is not esn-samples");
    };
    let mut rng = seeded(spec.seed);
    Ok(esn_stream(&mut rng, mu, sigma, eps, count))
}

pub(crate) fn esn_stream<R: Rng>(rng: &mut R, mu: f64, sigma: f64, eps: f64, count: usize) -> Vec<f64> {
    let left_mass = (1.0 + eps) / 2.0;
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let g: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            if u < left_mass {
                mu - (1.0 + eps) * sigma * g
            } else {
                mu + (1.0 - eps) * sigma * g
            }
        })
        .collect()
}

/// `count x m` matrix with entry (t, i) ~ N(mean_i, sd_i^2).
pub fn gen_unit_contributions(spec: &SyntheticSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let SyntheticKind::UnitContributions { means, sds, count } = &spec.kind else {
        return invalid("spec is not unit-contributions");
    };
    let mut rng = seeded(spec.seed);
    let m = means.len();
    let mut out = DMatrix::zeros(*count, m);
    for t in 0..*count {
        for i in 0..m {
            out[(t, i)] = means[i] + sds[i] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}
