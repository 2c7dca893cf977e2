//! Tagged multilingual Transformer translation with language-aware layer
//! normalization, a per-language encoder/decoder bridge and random online
//! backtranslation.

pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lang;
pub mod model;
pub mod robt;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use lang::{LangId, LanguageSet};
pub use vocab::{build_vocab, VocabMode, Vocabulary};
