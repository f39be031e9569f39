//! Dense feed-forward networks with reverse-mode gradients and Adam.

mod loss;
mod net;
mod optim;
mod persist;
mod train;

pub use loss::LossKind;
pub use net::{sigmoid, Activation, DenseNet, Layer, ParamBuf, Tape};
pub use optim::{clip_grad_norm, AdamState};
pub use persist::NetFile;
pub use train::{apply_step, column, fit, grad_check, loss_and_grad, train_step, Objective, TrainConfig};
