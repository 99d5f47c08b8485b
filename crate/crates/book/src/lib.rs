//! The guide in `book/`, compiled as doctests so every listing stays in
//! sync with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/corpus.md")]
pub mod corpus {}
#[doc = include_str!("../../../book/src/tensor.md")]
pub mod tensor {}
#[doc = include_str!("../../../book/src/transducer.md")]
pub mod transducer {}
#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}
#[doc = include_str!("../../../book/src/selfsup.md")]
pub mod selfsup {}
#[doc = include_str!("../../../book/src/nst.md")]
pub mod nst {}
#[doc = include_str!("../../../book/src/eval.md")]
pub mod eval {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
