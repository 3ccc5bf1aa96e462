//! Runs the Rust snippets in `book/src` as doctests. Each chapter becomes an
//! empty module documented by the chapter's Markdown, so a failing snippet is
//! reported under the chapter's module name.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/feature-store.md")]
pub mod feature_store {}

#[doc = include_str!("../../../book/src/detection.md")]
pub mod detection {}

#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}

#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}

#[doc = include_str!("../../../book/src/theory.md")]
pub mod theory {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
