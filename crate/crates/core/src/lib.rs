//! Zero-shot anomaly detection engine.
//!
//! The pipeline classifies and segments anomalies in images of a named
//! object category without any reference images of that category:
//!
//! 1. [`prompts`] composes normal/abnormal text prompts from templates and
//!    state lists and obtains text features for them (imported table or
//!    synthetic encoder).
//! 2. [`selector`] reduces each sampled feature set to one representative
//!    vector (mean / PCA / KDE / mean shift / DBSCAN) and classifies image
//!    embeddings by cosine similarity.
//! 3. [`encoder`] is a minimal ViT image encoder with stage partitioning;
//!    [`surgery`] adds the value-value attention path and the redundant
//!    feature removal that make patch-level predictions usable.
//! 4. [`detector`] assembles staged anomaly maps and fuses image-level
//!    scores; [`align`] adds trainable per-stage linear alignment with focal
//!    and dice losses.
//! 5. [`metrics`] evaluates AUROC / F1-max / AP / PRO, each checked against
//!    an independent brute-force oracle in the test suite.
//! 6. [`data`] handles dataset layout scanning, synthetic dataset
//!    generation, image codecs, and heatmap rendering.

pub mod align;
pub mod container;
pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod prompts;
pub mod selector;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
