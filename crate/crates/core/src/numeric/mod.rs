//! Dense tensors, compute kernels, a reverse-mode tape and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod primitives;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_filtered, relative_error, GradCheckReport};
pub use kernels::Padding;
pub use params::{Bound, Params};
pub use primitives::{primitive_checks, primitive_names};
pub use rng::{streams, SeedTree, StreamRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
