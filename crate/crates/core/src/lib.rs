//! Informative functional representations of discrete random variables.
//!
//! Given samples (or an exact joint) of `d` discrete variables, the crate builds
//! the normalized pairwise matrix `B`, extracts per-variable feature functions
//! through three routes (dense eigendecomposition, alternating conditional
//! expectations, H-score maximization), and provides analytic oracles and
//! verifiers for the underlying theory.

pub mod bits;
pub mod complexity;
pub mod dataset;
pub mod error;
pub mod features;
pub mod instances;
pub mod json;
pub mod linalg;
pub mod mace;
pub mod mhscore;
pub mod preprocess;
pub mod spectral;
pub mod theory;

pub use dataset::{
    estimate_distributions, from_joint, load_csv, read_csv, write_csv, Alphabet, CsvOptions, DiscreteDataset,
    DistributionSet, EstimateOptions, JointTable,
};
pub use error::{Error, Result};
pub use features::FeatureSet;
pub use spectral::{
    build_b, build_b_tilde, check_lemma1, eigendecompose, features_from_spectrum, BMatrix, Lemma1Report, Spectrum,
    Variant,
};
