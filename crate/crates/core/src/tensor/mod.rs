//! Dense linear algebra with reverse-mode differentiation: a row-major
//! matrix type, named parameter storage with Adam state, a computation tape
//! recording matrix-granularity operations, and a finite-difference checker
//! that validates every analytic gradient the tape produces.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{finite_diff_check, worst_block, BlockCheck};
pub use matrix::Matrix;
pub use optim::adam_step;
pub use params::{GradStore, ParamId, ParamSet, Parameter};
pub use tape::{NodeId, Tape, TapeNode};
