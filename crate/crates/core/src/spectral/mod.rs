//! Augmentation graphs and their spectral analysis: toy constructions,
//! normalized adjacencies, residuals and their bounds, factorization losses,
//! K-means measures and label-perturbation effects.

mod eigen_check;
mod graph;
mod kms;
mod loss;
mod split;

pub use eigen_check::{max_principal_angle, open_world_taus, sorl_toy_eigen_check, EigenCheck};
pub use graph::{build_adjacency, build_toy_graph, AdjacencyBundle, AugmentationGraph, Mixing, Node, TauParams, ToyCase};
pub use kms::{
    cluster_error_ratio, delta_kms, kmeans_measure, kms_derivative, spectral_features, ClassTerm, ClusterErrors, KmsDerivative,
    KmsMeasure, Partition, FD_STEP,
};
pub use loss::{contrastive_expansion, contrastive_expansion_grad, lmf_loss, optimal_factor, Expansion};
pub use split::{
    averaged_adjacency, column_basis, ignorance_and_coverage, linear_probe_error_1d, multiclass_residual, project, residual,
    residual_bound, sorted_eigen, spectral_split, split_symmetric, t_bar, toy_residual, toy_residual_theorems, Diagnostics,
    SpectralSplit, ToyCheck, ToyReport, SVD_CUTOFF,
};
