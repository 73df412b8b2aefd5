//! The guide under `book/` is written for mdbook, which cannot build listings
//! against workspace crates. Each chapter is attached to a module here instead,
//! so `cargo test` runs every listing as a doctest.

#[doc = include_str!("../../../book/src/index.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/boxes-and-metrics.md")]
pub mod boxes_and_metrics {}

#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}

#[doc = include_str!("../../../book/src/query-selection.md")]
pub mod query_selection {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
