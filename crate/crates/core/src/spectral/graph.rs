use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// One sample of an augmentation graph. `class` is set for labeled samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub shape: String,
    pub color: String,
    pub class: Option<usize>,
}

impl Node {
    pub fn new(shape: &str, color: &str, class: Option<usize>) -> Self {
        Node {
            shape: shape.to_string(),
            color: color.to_string(),
            class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauParams {
    pub tau1: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau0: f64,
}

impl TauParams {
    pub fn new(tau1: f64, tau_c: f64, tau_s: f64, tau0: f64) -> Self {
        TauParams { tau1, tau_c, tau_s, tau0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.tau1, self.tau_c, self.tau_s, self.tau0];
        if all.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return invalid("augmentation probabilities must be finite and non-negative");
        }
        Ok(())
    }

    /// `tau1 > max(tau_c, tau_s) >= min(tau_c, tau_s) > tau0 >= 0`.
    pub fn validate_order(&self) -> Result<()> {
        self.validate()?;
        let hi = self.tau_c.max(self.tau_s);
        let lo = self.tau_c.min(self.tau_s);
        if !(self.tau1 > hi && lo > self.tau0) {
            return invalid(format!(
                "need tau1 > max(tau_c, tau_s) and min(tau_c, tau_s) > tau0, got tau1={} tau_c={} tau_s={} tau0={}",
                self.tau1, self.tau_c, self.tau_s, self.tau0
            ));
        }
        Ok(())
    }

    /// Augmentation probability between two samples by shared attributes.
    pub fn weight(&self, a: &Node, b: &Node) -> f64 {
        match (a.shape == b.shape, a.color == b.color) {
            (true, true) => self.tau1,
            (true, false) => self.tau_s,
            (false, true) => self.tau_c,
            (false, false) => self.tau0,
        }
    }
}

/// How the adjacency mixes labeled and unlabeled augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixing {
    /// `alpha * sum_i l_i l_i^T + beta * mean over unlabeled anchors of T[:,j] T[:,j]^T`.
    Nscl { alpha: f64, beta: f64 },
    /// `eta_u * mean over all anchors of T[:,j] T[:,j]^T + eta_l * sum_i l_i l_i^T`.
    Sorl { eta_u: f64, eta_l: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyCase {
    /// labeled red cylinder, sharing color with the target class
    Nscl1,
    /// labeled gray cylinder, unrelated to every unlabeled sample
    Nscl2,
    /// labeled gray cube, sharing shape with the spurious attribute
    Nscl3,
    /// six nodes: known cube class, novel sphere and cylinder classes
    Sorl,
}

impl FromStr for ToyCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nscl-1" => Ok(ToyCase::Nscl1),
            "nscl-2" => Ok(ToyCase::Nscl2),
            "nscl-3" => Ok(ToyCase::Nscl3),
            "sorl" => Ok(ToyCase::Sorl),
            other => Err(Error::Validation(format!("unknown toy case '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationGraph {
    pub nodes: Vec<Node>,
    pub tau: TauParams,
    pub mixing: Mixing,
    /// N x N augmentation matrix built from the attribute rule.
    pub t: DMatrix<f64>,
    /// Entries controlled by the connection-strength override.
    pub link_pairs: Vec<(usize, usize)>,
}

impl AugmentationGraph {
    pub fn new(nodes: Vec<Node>, tau: TauParams, mixing: Mixing) -> Result<Self> {
        tau.validate()?;
        if nodes.is_empty() {
            return invalid("graph has no nodes");
        }
        let coeffs = match mixing {
            Mixing::Nscl { alpha, beta } => [alpha, beta],
            Mixing::Sorl { eta_u, eta_l } => [eta_u, eta_l],
        };
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return invalid("mixing coefficients must be finite and non-negative");
        }
        let n = nodes.len();
        let t = DMatrix::from_fn(n, n, |i, j| tau.weight(&nodes[i], &nodes[j]));
        Ok(AugmentationGraph {
            nodes,
            tau,
            mixing,
            t,
            link_pairs: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.class.is_some()).count()
    }

    fn labeled_classes(&self) -> Vec<usize> {
        let mut cs: Vec<usize> = self.nodes.iter().filter_map(|n| n.class).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    /// Mean of the augmentation columns of each labeled class, in class order.
    pub fn label_vectors(&self, t: &DMatrix<f64>) -> Vec<DVector<f64>> {
        self.labeled_classes()
            .into_iter()
            .map(|c| {
                let members: Vec<usize> = (0..self.n()).filter(|&i| self.nodes[i].class == Some(c)).collect();
                let mut l = DVector::zeros(self.n());
                for &j in &members {
                    l += t.column(j);
                }
                l / members.len() as f64
            })
            .collect()
    }
}

/// The 5-node (label-aware discovery) and 6-node (open-world) toy graphs.
pub fn build_toy_graph(case: ToyCase, tau: TauParams) -> Result<AugmentationGraph> {
    tau.validate_order()?;
    let labeled = |shape: &str, color: &str| Node::new(shape, color, Some(0));
    let unlabeled = [
        Node::new("cube", "red", None),
        Node::new("sphere", "red", None),
        Node::new("cube", "blue", None),
        Node::new("sphere", "blue", None),
    ];
    let nscl = |first: Node, links: bool| -> Result<AugmentationGraph> {
        let mut nodes = vec![first];
        nodes.extend(unlabeled.iter().cloned());
        let mut g = AugmentationGraph::new(nodes, tau, Mixing::Nscl { alpha: 1.0, beta: 4.0 })?;
        if links {
            // the labeled sample and the red (target) novel class
            g.link_pairs = vec![(0, 1), (0, 2)];
        }
        Ok(g)
    };
    match case {
        ToyCase::Nscl1 => nscl(labeled("cylinder", "red"), true),
        ToyCase::Nscl2 => nscl(labeled("cylinder", "gray"), true),
        ToyCase::Nscl3 => nscl(labeled("cube", "gray"), false),
        ToyCase::Sorl => {
            let nodes = vec![
                labeled("cube", "red"),
                labeled("cube", "blue"),
                Node::new("sphere", "red", None),
                Node::new("sphere", "blue", None),
                Node::new("cylinder", "gray", None),
                Node::new("cylinder", "gray", None),
            ];
            AugmentationGraph::new(nodes, tau, Mixing::Sorl { eta_u: 6.0, eta_l: 4.0 })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyBundle {
    pub a: DMatrix<f64>,
    pub degrees: DVector<f64>,
    pub normalized: DMatrix<f64>,
    /// Label-connection vector of the first labeled class, if any.
    pub l: Option<DVector<f64>>,
    /// Weighted unlabeled-augmentation component of `a`.
    pub unlabeled_part: DMatrix<f64>,
    /// Weighted labeled component of `a` (zero when nothing is labeled).
    pub labeled_part: DMatrix<f64>,
}

impl AdjacencyBundle {
    /// Bundle for an arbitrary symmetric non-negative adjacency.
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let zero = DMatrix::zeros(n, n);
        Self::assemble(a.clone(), a, zero, None)
    }

    fn assemble(a: DMatrix<f64>, unlabeled_part: DMatrix<f64>, labeled_part: DMatrix<f64>, l: Option<DVector<f64>>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(Error::Shape("adjacency must be a non-empty square matrix".into()));
        }
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("adjacency entries must be finite and non-negative");
        }
        for i in 0..n {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * a[(i, j)].abs().max(1.0) {
                    return invalid("adjacency is not symmetric");
                }
            }
        }
        let degrees = DVector::from_iterator(n, a.row_iter().map(|r| r.sum()));
        if let Some(i) = degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::Degenerate(format!("node {i} has zero degree")));
        }
        let normalized = normalize(&a, &degrees);
        Ok(AdjacencyBundle {
            a,
            degrees,
            normalized,
            l,
            unlabeled_part,
            labeled_part,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Normalized unlabeled component, the base graph before labels are added.
    pub fn unlabeled_normalized(&self) -> Result<DMatrix<f64>> {
        let degrees = DVector::from_iterator(self.n(), self.unlabeled_part.row_iter().map(|r| r.sum()));
        if let Some(i) = degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::Degenerate(format!("node {i} has zero unlabeled degree")));
        }
        Ok(normalize(&self.unlabeled_part, &degrees))
    }
}

pub(crate) fn normalize(a: &DMatrix<f64>, degrees: &DVector<f64>) -> DMatrix<f64> {
    let s = degrees.map(|d| 1.0 / d.sqrt());
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s[i] * s[j])
}

fn outer_sum(cols: impl Iterator<Item = DVector<f64>>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for c in cols {
        out += &c * c.transpose();
    }
    out
}

/// Adjacency of an augmentation graph; `t_override` sets the labeled-to-target
/// connection strength on the graph's link pairs.
pub fn build_adjacency(graph: &AugmentationGraph, t_override: Option<f64>) -> Result<AdjacencyBundle> {
    let n = graph.n();
    let mut t = graph.t.clone();
    if let Some(v) = t_override {
        if !v.is_finite() || v < 0.0 {
            return invalid("connection strength must be finite and non-negative");
        }
        if graph.link_pairs.is_empty() {
            return invalid("graph has no overridable link pairs");
        }
        for &(i, j) in &graph.link_pairs {
            t[(i, j)] = v;
            t[(j, i)] = v;
        }
    }
    let labels = graph.label_vectors(&t);
    let label_term = outer_sum(labels.iter().cloned(), n);
    let (unlabeled_part, labeled_part) = match graph.mixing {
        Mixing::Nscl { alpha, beta } => {
            let anchors: Vec<usize> = (0..n).filter(|&j| graph.nodes[j].class.is_none()).collect();
            if anchors.is_empty() {
                return invalid("no unlabeled anchors");
            }
            let u = outer_sum(anchors.iter().map(|&j| t.column(j).into_owned()), n) * (beta / anchors.len() as f64);
            (u, label_term * alpha)
        }
        Mixing::Sorl { eta_u, eta_l } => {
            let u = &t * t.transpose() * (eta_u / n as f64);
            (u, label_term * eta_l)
        }
    };
    let a = &unlabeled_part + &labeled_part;
    AdjacencyBundle::assemble(a, unlabeled_part, labeled_part, labels.into_iter().next())
}
