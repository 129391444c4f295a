//! Dense tensors, reverse-mode gradients, AdamW, schedules, seeded RNG and
//! the checkpoint container shared by every trainable component.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, Bound, LrSchedule, Optimizer, ParamStore};
pub use rng::SeededRng;
pub use tape::{Grads, Primitive, Tape, Var};
pub use tensor::{Scalar, Tensor};
