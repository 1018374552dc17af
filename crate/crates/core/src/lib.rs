//! One-shot federated linear mixed models.
//!
//! Each site reduces its data `(y_k, X_k)` to two `(p+1) × (p+1)` matrices,
//! `S_k = Σ z zᵀ` and `T_k = s sᵀ` with `z = (y, x)` and `s = Σ z`. Under a
//! random-intercept working covariance these pin down the pooled likelihood, the
//! GLS estimate and the cluster-robust sandwich exactly, so a coordinator can fit
//! the model from one round of summaries. Summaries can be released through the
//! Gaussian mechanism before they leave a site.

pub mod attack;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod optim;
pub mod privacy;
pub mod sim;
pub mod summary;
pub mod variance;

pub use error::{Error, Result};
pub use estimator::{fit_ml, fit_reml, FitResult, Method, OptimizerConfig, Theta};
pub use privacy::{calibrate, privatize, CalibrationRule, NoiseScope, PrivacyBudget};
pub use summary::{compute_summary, merge_summaries, FederatedSummarySet, ModelSpec, SiteData, SiteSummary};
pub use variance::{apply_correction, cr0, wald_ci, Correction, RobustVariance};
