//! Automated quality assessment for third-party automatic weather station
//! (TPAWS) observations.
//!
//! The engine calibrates per-station statistical tests against official data
//! sources, scores each incoming observation with a confidence level, fuses
//! the tests into a final verdict with traceback, and evaluates its own skill
//! via synthetic error injection.
//!
//! A narrative guide lives in `book/`; the chapters mirror the doc-tests on
//! the public API.
//!
//! # Quick taste
//!
//! ```
//! use obsqa::assessment::confidence_level;
//!
//! // An observation sitting exactly at a test's predictive median gets
//! // full confidence; either tail decays to zero.
//! assert_eq!(confidence_level(0.5).unwrap(), 1.0);
//! assert!((confidence_level(0.8).unwrap() - 0.4).abs() < 1e-15);
//! assert_eq!(confidence_level(1.0).unwrap(), 0.0);
//! ```

// Book chapters double as doc-tests: every fenced Rust block in book/ is
// compiled and run by `cargo test`, so the guide cannot drift from the API.
#[doc = include_str!("../../../book/src/introduction.md")]
mod _book_introduction {}
#[doc = include_str!("../../../book/src/confidence.md")]
mod _book_confidence {}
#[doc = include_str!("../../../book/src/transform.md")]
mod _book_transform {}
#[doc = include_str!("../../../book/src/solvers.md")]
mod _book_solvers {}
#[doc = include_str!("../../../book/src/point-tests.md")]
mod _book_point_tests {}
#[doc = include_str!("../../../book/src/st-subdaily.md")]
mod _book_st_subdaily {}
#[doc = include_str!("../../../book/src/fusion.md")]
mod _book_fusion {}
#[doc = include_str!("../../../book/src/harness.md")]
mod _book_harness {}
#[doc = include_str!("../../../book/src/io-cli.md")]
mod _book_io_cli {}

pub mod assessment;
pub mod core;
pub mod harness;
pub mod io;
pub mod solvers;
pub mod tests_point;
pub mod tests_st;
pub mod tests_subdaily;
pub mod transform;
