//! Adaptive graph convolutional recurrent forecasting with pluggable global
//! temporal attention.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gcrn;
pub mod gradcheck;
pub mod graph_conv;
pub mod model;
pub mod oracle;
pub mod param;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
