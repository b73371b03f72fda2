//! Numeric kernels behind the tape ops.
//!
//! Everything here works on plain slices/tensors and knows nothing about
//! graphs or gradients-as-state; the tape calls forward kernels while
//! recording and backward kernels while replaying in reverse.

pub mod conv;
pub mod dwt;
pub mod elem;
pub mod gemm;
pub mod grid;
pub mod pool;
