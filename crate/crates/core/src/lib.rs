//! Deep clustering with multi-manifold structure preservation.
//!
//! A denoising MLP autoencoder is fine-tuned with a Student-t/KL clustering
//! objective over learnable centers, plus three geometric losses that keep
//! local isometry inside each cluster, the rank order of cluster centers
//! across clusters, and the learnable centers bound to the empirical latent
//! means. Training alternates mini-batch and full-batch phases while the
//! clustering weight ramps down and the isometry weight ramps up.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`optim`]: matrices, reverse-mode AD, Adam
//! - [`data`]: IDX/CSV loading, normalization, splits, synthetic generators
//! - [`autoencoder`]: encoder/decoder MLP and denoising pretraining
//! - [`cluster`]: soft assignment, target distribution, KL loss, k-means
//! - [`geometry`]: distances, kNN graphs, closeness ranks, cluster means
//! - [`losses`]: isometry, ranking, alignment and separation losses
//! - [`trainer`]: schedule, alternating training loop
//! - [`checkpoint`]: binary save/load of models and training state
//! - [`metrics`]: ACC, NMI, RRE, Trust, Cont, d-RMSE, LGD, CRA

pub mod autodiff;
pub mod autoencoder;
pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{DcrlError, Result};
pub use tensor::Matrix;
