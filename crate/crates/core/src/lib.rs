//! Autocomplete-effectiveness (AE) evaluation of next-token predictors.
//!
//! A text is tokenized, a predictor ranks every true next token against its
//! full vocabulary, and each rank is converted into the keystrokes a user of
//! a top-10 autocomplete list would spend. The AE ratio is the fraction of
//! manual keystrokes saved.

pub mod claims;
pub mod metric;
pub mod predict;
pub mod report;
pub mod token;

pub use metric::{
    ae_ratio, aggregate, evaluate_sequence, EvalOptions, KeystrokeBreakdown, SequenceTrace,
};
pub use predict::{PredictError, Predictor};
pub use token::{train_tokenizer, TokenId, Vocab};
