use nalgebra::DMatrix;

use crate::error::{invalid, Result};

use super::graph::{build_adjacency, build_toy_graph, TauParams, ToyCase};
use super::split::{column_basis, sorted_eigen};

/// Largest principal angle between the column spans of `a` and `b`, via the
/// sine form `asin ||(I - Q_b Q_b^T) Q_a||_2`, which stays accurate near zero.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = column_basis(a);
    let qb = column_basis(b);
    let resid = &qa - &qb * (qb.transpose() * &qa);
    let s = resid.singular_values().max();
    s.min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenCheck {
    pub ratio: f64,
    pub tau: TauParams,
    pub labeled_angle: f64,
    pub unlabeled_angle: f64,
    /// Largest three eigenvalues of the labeled normalized adjacency.
    pub labeled_top: [f64; 3],
    pub unlabeled_top: [f64; 3],
    pub predicted_third: f64,
    pub third_error: f64,
    pub angle_limit: f64,
    pub eigen_limit: f64,
}

impl EigenCheck {
    pub fn angle_ok(&self) -> bool {
        self.labeled_angle <= self.angle_limit && self.unlabeled_angle <= self.angle_limit
    }

    pub fn eigen_ok(&self) -> bool {
        self.third_error <= self.eigen_limit
    }
}

/// Probabilities with `tau1 + tau_c + tau_s = 1`, `tau_c = ratio tau1`,
/// `tau_s = shape_frac tau_c`, `tau0 = 0`.
pub fn open_world_taus(ratio: f64, shape_frac: f64) -> Result<TauParams> {
    if !(ratio > 0.0 && ratio <= 0.1) {
        return invalid("need 0 < tau_c/tau1 <= 0.1");
    }
    if !(4.0 / 9.0..1.0).contains(&shape_frac) {
        return invalid("need 4/9 <= tau_s/tau_c < 1");
    }
    let tau1 = 1.0 / (1.0 + ratio + shape_frac * ratio);
    let tau_c = ratio * tau1;
    Ok(TauParams::new(tau1, tau_c, shape_frac * tau_c, 0.0))
}

fn top3(m: &DMatrix<f64>) -> ([f64; 3], DMatrix<f64>) {
    let (values, vectors) = sorted_eigen(m);
    ([values[0], values[1], values[2]], vectors.columns(0, 3).into_owned())
}

/// Compares the top-3 eigenspaces of the 6-node toy graph, with and without
/// labels, against their closed-form templates.
pub fn sorl_toy_eigen_check(ratio: f64, shape_frac: f64) -> Result<EigenCheck> {
    let tau = open_world_taus(ratio, shape_frac)?;
    let g = build_toy_graph(ToyCase::Sorl, tau)?;
    let b = build_adjacency(&g, None)?;
    let s3 = 3f64.sqrt();
    let labeled_tmpl = DMatrix::from_column_slice(
        6,
        3,
        &[
            0.0, 0.0, 0.0, 0.0, 1.0, 1.0, //
            s3, s3, 1.0, 1.0, 0.0, 0.0, //
            1.0, 1.0, -s3, -s3, 0.0, 0.0,
        ],
    );
    let unlabeled_tmpl = DMatrix::from_column_slice(
        6,
        3,
        &[
            0.0, 0.0, 0.0, 0.0, 1.0, 1.0, //
            1.0, 1.0, 1.0, 1.0, 0.0, 0.0, //
            1.0, -1.0, 1.0, -1.0, 0.0, 0.0,
        ],
    );
    let (labeled_top, lv) = top3(&b.normalized);
    let (unlabeled_top, uv) = top3(&b.unlabeled_normalized()?);
    let predicted_third = 1.0 - 16.0 / 3.0 * ratio;
    Ok(EigenCheck {
        ratio,
        tau,
        labeled_angle: max_principal_angle(&lv, &labeled_tmpl),
        unlabeled_angle: max_principal_angle(&uv, &unlabeled_tmpl),
        labeled_top,
        unlabeled_top,
        predicted_third,
        third_error: (labeled_top[2] - predicted_third).abs(),
        angle_limit: 10.0 * ratio,
        eigen_limit: 10.0 * ratio * ratio,
    })
}
