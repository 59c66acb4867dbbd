//! Kernel sliced average variance estimation (SAVE) for responses observed
//! on spatial lattices.
//!
//! * [`kernels`]: compactly supported order-`k` kernels and their moment
//!   certification.
//! * [`fieldsim`]: m-dependent moving-average random fields, response links
//!   and Monte Carlo population truth.
//! * [`save_core`]: the kernel-smoothed SAVE candidate matrix.
//! * [`edr`]: whitening, EDR directions and subspace metrics.
//! * [`oracle`]: a plain double-loop reference estimator.
//! * [`experiments`]: sweeps, rate fits and pilot calibration.

pub mod edr;
pub mod error;
pub mod experiments;
pub mod fieldsim;
pub mod kernels;
pub mod linalg;
pub mod oracle;
pub mod quadrature;
pub mod save_core;

pub use edr::{edr_directions, subspace_distance, whiten, whiten_oracle, EdrEstimate, SupNormReport, WhiteningResult};
pub use error::{Error, Result};
pub use experiments::{fit_rate, run_sweep, ExperimentConfig, ExperimentRow, RateFit};
pub use fieldsim::{
    population_truth, simulate_field, FieldDataset, InnovationLaw, LatticeShape, LinkId, ModelSpec, PopulationTruth,
};
pub use kernels::{build_order_k_kernel, kernel_eval, kernel_moment_check, KernelSpec, MomentReport};
pub use oracle::{gamma_error, reference_save};
pub use save_core::{
    phi_n, save_matrices, smooth_at, validate_schedule, BandwidthSchedule, SaveMatrices, ScheduleReport, SmoothedSite,
};
