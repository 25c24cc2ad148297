//! Numerical laboratory for coupled forward-backward SDEs with jumps whose
//! intensity depends on a measure-valued random environment.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the companion `fbsde-lab` crate.
#![no_std]
// `!(x > 0.0)` guards are meant to reject NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backward_bsde;
pub mod bundle;
pub mod coupled;
pub mod forward_sde;
pub mod intensity;
pub mod math;
pub mod models;
pub mod measures;
pub mod pointproc;
pub mod process;
pub mod rng;
