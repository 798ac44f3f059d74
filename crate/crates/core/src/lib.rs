//! Joint regression models for the mean, log-variance and matrix-log
//! correlation of grouped data, fitted by maximum likelihood.

pub mod diagnostics;
pub mod error;
pub mod gzt;
pub mod inference;
pub mod likelihood;
pub mod matcalc;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};
pub use gzt::{gzt_forward, gzt_inverse, gzt_jacobian, GztVector};
pub use inference::{aic, bic, gzt_correlogram, lrt, wald, CorrelogramTable, LrtResult};
pub use likelihood::{fisher_information, fit, log_likelihood, score, FisherBlocks, FitOptions, FitResult};
pub use matcalc::{CorrelationMatrix, SymmetricMatrix};
pub use model::{build_dataset, GroupData, GroupedDataset, ModelSpec, ObservationRecord, PairCovariateRule, ParameterVector};
