//! Reverse-mode differentiation and the neural building blocks shared by
//! every model stage.

pub mod checkpoint;
mod gaussian;
pub mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod optim;
mod params;

pub use gaussian::{gaussian_kl, kl_var, standard_normal, DiagGaussian, GaussianVar, LOG_VAR_MAX, LOG_VAR_MIN};
pub use gradcheck::{grad_check, grad_check_input, GradCheckReport};
pub use graph::{FkSpec, Graph, Var};
pub use layers::{Dense, DenseSpec, Gru, StackedGru, LEAKY_SLOPE};
pub use matrix::{matmul, matmul_nt, matmul_tn, Mat};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParameterStore, Tensor};
