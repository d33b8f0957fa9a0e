//! Numerical lab for the delayed reaction-diffusion equation
//! `v_t = D v_xx − δ v + p v(t − r) e^{−a v(t − r)}`.

// `!(x > 0.0)` is how the validators reject NaN along with the bad range
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod charspec;
pub mod cli;
pub mod delayode;
pub mod error;
pub mod lindelay;
pub mod model;
pub mod pde;
mod roots;
pub mod stability;
pub mod waves;

pub use error::{Error, Result};
pub use model::{ModelParams, ParamRegime};
