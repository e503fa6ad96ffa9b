//! Subword segmental machine translation (SSMT).
//!
//! A toolkit that unifies target-side subword segmentation, conditional
//! sequence modelling and generation in a single trainable model. The model
//! treats the segmentation of target words into subwords as a latent
//! variable: training marginalises over all segmentations with a semi-Markov
//! dynamic program, decoding adapts segmentations on the fly, and the trained
//! model doubles as an unsupervised morphological segmenter.
//!
//! The crate is organised around the pipeline:
//!
//! - [`textproc`]: corpora, character vocabularies, word spans, source-side
//!   BPE and the target-side subword lexicon with trie prefix queries.
//! - [`numerics`]: a small dense-matrix core with reverse-mode automatic
//!   differentiation, neural building blocks and an Adam optimizer.
//! - [`ssmodel`]: the encoder-decoder that scores candidate subwords with a
//!   gated mixture of a character LSTM and a lexicon softmax.
//! - [`lattice`]: the segmentation lattice - forward marginal (the training
//!   objective), Viterbi segmentation and a brute-force enumeration oracle.
//! - [`decoder`]: dynamic decoding and a naive mixture beam-search baseline.
//! - [`metrics`]: chrF, morpheme boundary/identification P/R/F1 and paired
//!   bootstrap resampling.
//! - [`compgen`]: compound/atom divergences and greedy extraction of
//!   compositional-generalisation test subsets.
//! - [`config`] and [`train`]: run configuration and the training loop that
//!   back the `ssmt` command-line interface.

pub mod compgen;
pub mod config;
pub mod decoder;
pub mod lattice;
pub mod metrics;
pub mod numerics;
pub mod ssmodel;
pub mod synth;
pub mod textproc;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;
