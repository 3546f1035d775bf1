//! 2-D inspection coordinates: PCA projection and exact t-SNE for the
//! raw-feature and explanation-space matrices. Embeddings feed reports
//! only; clustering always runs in the full space.

mod pca;
mod tsne;

pub use pca::pca_project;
pub use tsne::{tsne, tsne_with_config, tsne_with_point_streams, TsneConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Which algorithm produced an embedding, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum EmbedMethod {
    Pca {
        dims: usize,
        explained_variance: Vec<f64>,
    },
    Tsne(TsneConfig),
}

/// Row-aligned low-dimensional coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D<S: Scalar> {
    /// N x dims coordinates, rows aligned with the input matrix.
    pub coords: Array2<S>,
    pub method: EmbedMethod,
    pub seed: u64,
    /// (iteration, KL divergence) samples for t-SNE; empty for PCA.
    pub kl_history: Vec<(usize, f64)>,
}
