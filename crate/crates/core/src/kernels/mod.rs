//! Numerical kernels on raw buffers. The autodiff graph wraps these.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod routing;
