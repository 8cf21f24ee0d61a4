//! Sobel-gradient MLP toolkit for handwritten character recognition.
//!
//! The pipeline: parse IDX datasets, extract signed horizontal/vertical
//! Sobel derivative maps from 28x28 images, min-max normalize each channel,
//! flatten to 1568-dim feature vectors, and train a three-hidden-layer dense
//! network (BatchNorm + ReLU + inverted dropout) with Adam, early stopping
//! on validation accuracy, and learning-rate reduction on validation-loss
//! plateau.
//!
//! Everything numeric is `f32` and deterministic: a fixed xoshiro256++
//! stream drives splits, initialization, shuffles, and dropout, and the
//! parallel kernels are bit-identical to their sequential fallbacks for any
//! thread count (build with `--no-default-features` for the fully
//! sequential variant).

pub mod dataset;
pub mod edge;
pub mod error;
pub mod idx;
pub mod model;
pub mod optim;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};

/// Cap the size of the global worker pool. Must be called before the first
/// parallel operation; later calls fail. Results never depend on the thread
/// count, only throughput does.
#[cfg(feature = "parallel")]
pub fn set_thread_count(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

/// Sequential build: the thread count is ignored.
#[cfg(not(feature = "parallel"))]
pub fn set_thread_count(_threads: usize) -> Result<()> {
    Ok(())
}
