//! Semi-supervised multi-task multi-view learning over windowed sensor
//! series: per-view encoders feed a small bank of shared blocks selected by a
//! learnable Gumbel-softmax gate, views are fused under a co-regularizer, and
//! unlabeled fragments contribute an uncertainty-weighted
//! consistency/discrimination objective.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gating;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod trainer;
