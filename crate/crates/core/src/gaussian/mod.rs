//! Closed-form Gaussian analysis: entropy, KL, the point memorisation
//! metric, the small-epsilon ratio limit and empirical latent statistics.

pub mod model;
pub mod verify;

pub use model::{
    dataset_mem_metric, entropy_monte_carlo, kl_monte_carlo, kl_ratio, latent_stats,
    point_mem_kl, richardson_limit, theorem1_hypotheses, theorem1_ratio, ClassStats,
    GaussianModel, LatentStats,
};
pub use verify::{verify_identities, IdentityCheck};
