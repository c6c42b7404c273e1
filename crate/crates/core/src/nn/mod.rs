//! Numeric training stack: sum-pooled embeddings, ReLU towers with a
//! two-logit softmax head, cross-entropy, Adam and gradient checking.
//! Everything is `f64`.

pub mod adam;
pub mod embedding;
pub mod gradcheck;
pub mod graph;
pub(crate) mod linalg;
pub mod loss;
pub mod mlp;
pub mod params;
pub mod snapshot;

pub use adam::{Adam, AdamConfig, Moments};
pub use embedding::{EmbeddingGrad, EmbeddingTable};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Label, Objective, Workspace};
pub use loss::cross_entropy;
pub use mlp::{BatchCache, Dense, MlpTower, PROB_CLAMP};
pub use params::{Grads, ParamStore};
