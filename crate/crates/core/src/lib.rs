// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation engineering on a desk-scale transformer.
//!
//! The crate covers the full loop: a small decoder-only LM with per-layer taps
//! and rewrite hooks ([`model`]), a synthetic corpus with a planted
//! topic/direction confound ([`corpus`]), linear probes for layer selection and
//! bias audits ([`probing`]), low-rank debias blocks trained against a
//! gradient-reversed domain probe ([`debias`]), steering-vector extraction and
//! output control ([`steering`]), and token-level alignment reports
//! ([`explain`]).

// `!(x >= 0.0)` style checks are kept so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod debias;
pub mod explain;
pub mod model;
pub mod probing;
pub mod steering;
pub mod tensor;
