//! A small residual recognition network written from scratch: tensors,
//! layers with hand-derived gradients, an optional feature selection gate
//! driven by the desensitization mask, SGD training, checkpoints, embedding
//! verification and a federated-averaging simulator.

pub mod block;
pub mod error;
pub mod fedsim;
pub mod fsm;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod saliency;
pub mod scalar;
pub mod state;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{NetError, Result};
pub use layers::Mode;
pub use network::{Arch, FsmArch, Network};
pub use state::ModelState;
pub use tensor::Tensor;
pub use train::{MaskPolicy, TrainConfig};
