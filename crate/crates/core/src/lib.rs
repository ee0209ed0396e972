//! Budgeted up-to-down speculative decoding for listwise ranking.
//!
//! A target ranker ([`oracle::Oracle`]) scores full candidate rankings one
//! encoding at a time. The [`decoder`] spends a fixed number of encodings
//! verifying the longest greedy-consistent prefix of the current draft and
//! redrafting the rest with a learned permutation [`policy`], which the
//! [`trainer`] fits by supervised initialisation and policy optimisation.

pub mod decoder;
pub mod error;
pub mod numeric;
pub mod oracle;
pub mod policy;
pub mod ranking;
pub mod trainer;

pub use error::{Result, RsdError};
pub use ranking::{MetricReport, Ranking};
