//! Parametrized convex functions: input-convex networks whose weights are
//! produced by a hypernetwork of a parameter vector, with training, model
//! selection and export to disciplined-convex expression graphs.

pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod export;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod psi;
pub mod selection;
pub mod training;

pub use arch::{Activation, Architecture, ArchitectureBuilder, Monotonicity, Quadratic};
pub use autodiff::{argmin_reg_and_grad, loss_and_grad, Batch, GradientBuffer};
pub use data::Dataset;
pub use error::{PcfError, Result};
pub use layers::{icnn_forward, icnn_jacobian, MaterializedLayers};
pub use loss::{error_rate, loss_value, ArgminTarget, LossSpec, RegKind, RegSpec};
pub use model::{PcfModel, Scaling};
pub use psi::{psi_forward, WeightVector};
pub use selection::{cross_validate, r2_score, rmse, CvConfig, CvReport};
pub use training::{fit, FitReport, TestMetrics, TrainConfig};
