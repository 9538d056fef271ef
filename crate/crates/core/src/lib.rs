//! Hybrid image-based Android malware detection.
//!
//! The pipeline turns a DEX byte stream and a manifest byte stream into RGB
//! images, extracts per-modality embeddings with compact convolutional
//! backbones, selects informative DEX-image subregions with learned masks and
//! CLS-token self-attention, fuses the two modalities through a factorized
//! outer-product space, and scores samples under a learnable Mahalanobis
//! metric trained with a pairwise contrastive loss alongside three
//! per-modality classification heads.
//!
//! Everything is deterministic under a fixed seed and runs on plain f64 CPU
//! math; see the `tensor` module for the reverse-mode tape it all sits on.

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod dex;
pub mod fusion;
pub mod imaging;
pub mod metric;
pub mod select;
pub mod tensor;
pub mod train;
