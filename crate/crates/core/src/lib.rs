//! Single-channel EEG foundation model: preprocessing, tokenization, a
//! hierarchical masked-autoencoder encoder trained with a small reverse-mode
//! autodiff engine, and a frozen-feature evaluation harness.

pub mod downstream;
pub mod dsp;
pub mod encoder;
pub mod pretrain;
pub mod signal_io;
pub mod tensor;
pub mod tokenizer;
