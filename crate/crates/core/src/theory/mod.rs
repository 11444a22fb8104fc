//! Numerical verification of the framework's theoretical apparatus:
//! divergence identities, the risk decomposition, PAC-Bayes KL scaling of
//! hyperplane vs radius classifiers, and synergy (Gaussian MI) estimation.

pub mod divergence;
pub mod laplace;
pub mod synergy;

pub use divergence::{
    check_risk_decomposition, check_sqrt_jsd_triangle, check_unimodal_sum_bound, js_divergence,
    kl_discrete, product_joint, DiscreteDist, JointDist, RiskDecomposition, TriangleCheck,
    UnimodalSumBound,
};
pub use laplace::{
    kl_gaussian, laplace_kl_asymmetric, laplace_kl_symmetric, linear_fit, relative_variation,
    Covariance, GaussianSpec, LaplaceFit, PriorSpec, SweepDataConfig,
};
pub use synergy::{estimate_synergy, SynergyEstimate};
