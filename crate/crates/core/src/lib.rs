//! Compact-code similarity search with a triplet-trained encoder and shared
//! additive codebooks.
//!
//! An encoder maps raw features to embeddings; `M` codebooks of `K` codewords
//! each approximate every embedding by a sum of one codeword per codebook, so
//! an item is stored as `M` sub-indices (`M * log2(K)` bits). Queries stay
//! real-valued and are scored against codes through a lookup table.
//!
//! ```
//! use tquant::quantizer::{icm_encode, CodebookSet};
//! use tquant::retrieval::build_table;
//!
//! let c = CodebookSet::from_words(2, 2, 2, vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
//! let out = icm_encode(&c, &[1.0, 1.0], None, 3).unwrap();
//! assert_eq!(out.code, vec![0, 0]);
//! assert_eq!(out.residual, 0.0);
//! let table = build_table(&[2.0, 3.0], &c).unwrap();
//! assert_eq!(table.score(&out.code), 5.0);
//! ```

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod mining;
pub mod objective;
pub mod quantizer;
pub mod retrieval;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/codebooks.md")]
    mod codebooks {}
    #[doc = include_str!("../../../book/src/mining.md")]
    mod mining {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
