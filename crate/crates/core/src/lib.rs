//! Feature-magnitude regularization: a small reverse-mode autodiff engine,
//! the entropy regularizer and its schedule, MLP/CNN models, synthetic
//! biased datasets, a fine-tuning loop and analysis tools.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod fmr;
pub mod models;
pub mod training;
