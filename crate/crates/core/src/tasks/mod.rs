//! Datasets, environments and observation normalization.

mod datasets;
mod env;
mod mnist;
mod moments;

pub use datasets::{
    make_multimode, make_quadrant_toy, quadrant_of, Dataset, MultimodeRecipe, Split, MULTIMODE_SIGMA, QUADRANT_SIGMA,
};
pub use env::{
    env_reset, env_reset_capped, env_step, run_episode, scripted_expert, scripted_expert_with_gain, Action, EnvKind,
    EnvState, Transition, MOUNTAINCAR_EXPERT_GAIN,
};
pub use mnist::{encode_idx_images, encode_idx_labels, load_mnist_dir, load_mnist_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use moments::RunningMoments;
