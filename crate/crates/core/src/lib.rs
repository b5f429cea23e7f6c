//! Dynamic semantic-aware transformer tracking.
//!
//! The crate is `no_std` + `alloc`. Everything here is pure computation:
//! dense kernels and a reverse-mode tape ([`numerics`]), the correlation /
//! relevance / semantic stages of the semantic-aware block, the backbone and
//! prediction head, contribution-ranked layer pruning, the online tracker and
//! the synthetic evaluation harness. File formats and the command line live
//! in the `dsatrack` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
pub mod correlation;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradsuite;
pub mod head;
pub mod image;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod relevance;
pub mod semantic;
pub mod tracker;

pub use error::{Error, Result};
pub use numerics::{GradTape, RngStream, Tensor, Var};
