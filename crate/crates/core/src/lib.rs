//! Forward KL, reverse KL and adaptive KL divergences over discrete token
//! distributions, with analytic gradients in student-logit space and small
//! distillation experiments built on them.
//!
//! - [`divergence`]: softmax, FKL/RKL values and gradients, f-divergences.
//! - [`adaptive`]: head masks, head/tail gaps, AKL / AKL-r / fixed mixtures.
//! - [`oracle`]: finite-difference gradients and brute-force mask search.
//! - [`toy`]: gradient-descent fitting of one student distribution.
//! - [`sequence`]: tabular Markov LMs and token-level distillation.
//! - [`harness`]: experiment configs, runner and result files.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod sequence;
pub mod toy;

pub use adaptive::{
    akl, akl_r, compute_gaps, fixed_mix, solve_head_mask, AdaptiveParams, Divergence, GapFn,
    GapReport, HeadMask,
};
pub use divergence::{
    f_divergence, fkl, fkl_grad, rkl, rkl_grad, softmax, Distribution, DivergenceEval, FGenerator,
    LogitVector,
};
pub use error::{Error, Result};
