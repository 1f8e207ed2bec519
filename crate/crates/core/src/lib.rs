pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sec;
pub mod tensor;
pub mod train;

pub use attention::{AttentionLayer, ConnectorOutput, PlanStore};
pub use autodiff::{Grads, Graph, Var};
pub use error::{Error, Result};
pub use model::{BlockConfig, ModelConfig, SecBlock, SecVit};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::{DType, Scalar, Tensor};
