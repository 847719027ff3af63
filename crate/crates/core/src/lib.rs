//! Memory-enhanced sequence-to-sequence transducer.
//!
//! A frozen transformer recognizer is extended with a text memory and a
//! trained access mechanism (MEM and 2MEM decoder variants) so that
//! user-supplied words and phrases can be recalled at inference time
//! without retraining. See the `book/` guide for a narrative tour.

// Keep the guide's snippets compiling: every chapter is a doc-test.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub mod baseline;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod optim;
pub mod params;
pub mod tokenizer;
pub mod training;
