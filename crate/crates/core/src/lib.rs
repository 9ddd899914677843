//! Dense ℓ2-regularized partial correlation networks computed through the
//! resolution matrix `R = A†A` of a data matrix `A` (samples × variables).
//!
//! The pipeline is:
//!
//! 1. [`dataset`]: load and standardize the data so every column has
//!    squared norm `m`.
//! 2. [`regpinv`]: one thin SVD; all regularized pseudoinverses are applied
//!    from the factors.
//! 3. [`resolution`]: `R = V diag(f) Vᵀ` as a factored operator with its
//!    diagonal cached.
//! 4. [`partialcorr`]: neighborhood-regression coefficients
//!    `βᵢ = r₋ᵢ / (1 − Rᵢᵢ)` and the partial correlation network.
//! 5. [`knn`]: distances between network columns and the cross-validated
//!    k-nearest-neighbor experiment.

pub mod dataset;
pub mod error;
pub mod knn;
pub mod partialcorr;
pub mod regpinv;
pub mod resolution;
pub mod synthetic;

pub use dataset::{Dataset, FoldAssignment, LoadOptions, Orientation, RawTable, StandardizeOptions};
pub use error::{PcnError, Result};
pub use knn::{CvReport, DistanceSpec, Metric, PcnMode};
pub use partialcorr::{NetworkForm, PartialCorrNetwork, ScaleVectors, SignConvention};
pub use regpinv::{RegularizationSpec, SvdFactors};
pub use resolution::ResolutionOperator;

/// Default guard against accidentally materializing huge n×n matrices.
pub const DEFAULT_N_LIMIT: usize = 20_000;
