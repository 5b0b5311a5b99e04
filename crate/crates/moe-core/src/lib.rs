//! A unified mixture-of-experts layer built around interchangeable routers.
//!
//! The layer computes
//! `Y[t,:] = sum_{r,c} combine[t,r,c] * MLP_r(X^T dispatch[:,r,c])`
//! for a group of tokens, a bank of experts with per-expert buffers of
//! `capacity` slots, and a router that maps the tokens to the paired
//! dispatch/combine tensors. Six routers are provided: softmax or entropic
//! transport affinities allocated token-first or expert-first, a
//! sparsity-capped quadratic transport plan allocated expert-first, and a
//! fully soft per-slot mixing scheme.
//!
//! Everything runs on an f64 tensor substrate with tape-based reverse-mode
//! differentiation, a counter-based deterministic RNG, and an explicit
//! stop-gradient marker so the transport solvers stay out of the backward
//! pass unless deliberately unrolled.

pub mod affinity;
pub mod allocation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod moe;
pub mod numeric;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Placement, Tape, Var};
pub use tensor::Tensor;
