//! Numeric foundation: tensors with reverse-mode autodiff, SGD, gradient
//! verification, and the binary checkpoint container.

mod checkpoint;
mod gradcheck;
mod optim;
mod tensor;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, NamedTensor, MAGIC, VERSION};
pub use gradcheck::{check_gradients, GradCheck};
pub use optim::{Schedule, Sgd};
pub use tensor::{batchnorm_eval, batchnorm_train, Tensor, EPS_NORM, LOG_CLAMP};
