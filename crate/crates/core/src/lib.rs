pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod profile;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{Gradients, Tape, Var};
pub use error::{AutogradError, ShapeError};
pub use loss::{BaseLoss, LossConfig, LossError};
pub use metrics::{ConfusionCounts, MetricsError, MetricsReport};
pub use model::{BlockKind, ModelError, ModelOutput, Network, NetworkConfig};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Scalar, Tensor};
