//! Secure state reconstruction and zero-order CBF safety filtering for a
//! sampled-data unicycle whose sensors may be spoofed.
//!
//! - [`dynamics`]: plant, RK4 model, and sampled bounds on their gap.
//! - [`sensing`]: the five-sensor model and the fake-trajectory attacker.
//! - [`reconstruction`]: per-subset observability maps, consistency tests
//!   and plausible-state sets.
//! - [`safety`]: barrier condition and the secure min-norm filter.
//! - [`scenario`]: the closed-loop sine-path experiment.
//! - [`calibration`], [`config`], [`output`], [`selftest`]: plumbing for the
//!   `ssf` binary.

// negated comparisons also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod calibration;
pub mod config;
pub mod dynamics;
pub mod output;
pub mod reconstruction;
pub mod safety;
pub mod scenario;
pub mod selftest;
pub mod sensing;
