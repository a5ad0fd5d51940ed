//! Dense f64 tensors, a reverse-mode tape, linear layers and Adam.

mod checkpoint;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, ParamMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{init_uniform, Activation, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use tape::{ParamId, ParamStore, Tape, Var};
pub use tensor::{matmul, softmax_rows, Tensor};
