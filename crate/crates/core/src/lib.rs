//! Generate-then-verify synthesis of multiple-choice questions about
//! scientific figures.
pub mod dataset;
pub mod digest;
pub mod eval;
pub mod figure;
pub mod gateway;
pub mod generation;
pub mod jsonl;
pub mod latex;
pub mod pipeline;
pub mod replay;
pub mod verification;
