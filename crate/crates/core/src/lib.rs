//! Keyed block-wise image encryption and the matching Vision Transformer
//! embedding adaptation.
//!
//! * [`keyperm`]: SplitMix64-driven keyed permutations.
//! * [`blockcodec`]: block scrambling + pixel shuffling, PPM/IMGT files.
//! * [`vit`]: a small ViT with exact gradients and SGD.
//! * [`adapt`]: permuting the patch/position embeddings so a model accepts
//!   encrypted images, plus the equivalence check.
//! * [`harness`]: synthetic data, training and scenario comparison.

pub mod adapt;
pub mod blockcodec;
pub mod error;
pub mod harness;
pub mod keyperm;
pub mod vit;

pub use error::{Error, Result};

/// Environment variable bounding the rayon pool size.
pub const THREADS_ENV: &str = "CIPHERPATCH_THREADS";

/// Installs the global rayon pool, honouring `CIPHERPATCH_THREADS`.
///
/// Numeric results do not depend on the thread count: parallel work is
/// always reduced in input order.
pub fn init_thread_pool() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = threads {
        // an already-initialized pool is fine
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}
