//! On-disk formats.
//!
//! Three families: semantic vector files (the word2vec text and binary
//! layouts, plus frequency tables for pruning), visual feature matrices
//! (a small binary container or plain CSV, with label sidecars), and the
//! trained-model file that ties an embedding and its class weights to the
//! exact vocabulary they were trained against.
//!
//! Vectors arrive as f32 in the binary layouts and are widened to f64 in
//! memory; everything the model file stores is f64, so a save/load round
//! trip is bit-exact.

pub mod features;
pub mod model;
pub mod vectors;

pub use features::{
    read_features, read_labels, train_class_indices, vocab_row_indices, write_features_binary,
    write_features_csv, write_labels,
};
pub use model::{load_model, save_model, vocab_fingerprint, TrainedModel, MODEL_VERSION};
pub use vectors::{
    prune_vocabulary, read_frequencies, read_vectors, write_vectors, VectorFile, VectorFormat,
};
