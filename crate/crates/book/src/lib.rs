//! The chapters of the guide in `book/src`, included as module docs so that
//! `cargo test` compiles and runs every Rust snippet in them.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/uncertainty-sets.md")]
pub mod uncertainty_sets {}

#[doc = include_str!("../../../book/src/regression.md")]
pub mod regression {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/formula-audit.md")]
pub mod formula_audit {}

#[doc = include_str!("../../../book/src/discrepancy-ledger.md")]
pub mod discrepancy_ledger {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
