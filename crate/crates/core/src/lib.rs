//! Metric-learning engine: L2-normalized embedding training with hard-triplet
//! mining (global OHNM, batch OHNM, and subspace-partitioned batch OHNM),
//! classifier-based label-noise cleaning, and a two-layer hierarchical
//! identity-retrieval index, runnable end to end on synthetic
//! hierarchically-clustered identity data.

pub mod cleaning;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod formats;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod subspace;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Deterministic per-stage sub-seed: every pipeline stage draws from its own
/// stream, so stages can be re-run or reordered without perturbing others.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then splitmix64 finalization mixed with the seed
    let mut h = 0xcbf29ce484222325u64;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
