//! Compiles every code block in the guide as a doc-test, so the book cannot
//! drift from the library.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/corpus.md")]
mod corpus_chapter {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/features.md")]
mod features_chapter {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/interpretation.md")]
mod interpretation_chapter {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/dataset.md")]
mod dataset_chapter {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attacks.md")]
mod attacks_chapter {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation_chapter {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/client.md")]
mod client_chapter {}
