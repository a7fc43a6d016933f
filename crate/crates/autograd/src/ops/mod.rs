//! Forward/backward kernels used by the [`Graph`](crate::Graph) ops.

pub mod channel;
pub mod conv;
pub mod layout;
pub mod matrix;

pub use matrix::power_iteration;
