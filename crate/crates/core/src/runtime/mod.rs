//! Weights, deterministic initialization, batch-norm folding and the forward
//! interpreter.

mod exec;
mod fold;
mod init;
mod rng;
mod weights;

pub use exec::{forward, infer_image, run_layer};
pub use fold::{fold_batch_norm, FoldedNetwork};
pub use init::{init_weights, perturb_batch_norm, uniform_bound};
pub use rng::{fnv1a64, tensor_seed, SplitMix64};
pub use weights::{load_weights, save_weights, Param, WeightStore, EDAW_MAGIC, EDAW_VERSION};
