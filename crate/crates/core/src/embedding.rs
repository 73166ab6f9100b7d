//! The shared numeric substrate: unit-norm embeddings, squared Euclidean
//! distances, identity centroids, and two-model fusion.
//!
//! Centroids and fused vectors are plain arithmetic means and are *not*
//! renormalized; nearest-centroid decisions downstream depend on that
//! convention. A config flag upstream can renormalize copies for ablation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Tolerance on `|‖e‖₂ − 1|` for a constructed [`Embedding`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A unit-L2-norm vector produced by a model. The currency of mining and
/// retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wraps a vector that is already unit norm (within [`UNIT_NORM_TOL`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Numerical(format!(
                "embedding norm {norm} is not within {UNIT_NORM_TOL} of 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Mean of an identity's member embeddings. Deliberately not renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCentroid {
    pub identity: u32,
    pub centroid: Vec<f64>,
    pub member_count: usize,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit L2 norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let norm = l2_norm(v);
    if !norm.is_finite() {
        return Err(Error::Numerical("non-finite norm".into()));
    }
    if norm == 0.0 {
        return Err(Error::Normalization);
    }
    Ok(Embedding {
        values: v.iter().map(|x| x / norm).collect(),
    })
}

/// Squared Euclidean distance between two raw vectors of equal length.
///
/// Unchecked variant used on hot paths (mining, retrieval, k-means) where
/// dimensions are validated once at the boundary.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Squared Euclidean distance ‖a−b‖² between embeddings. For unit vectors
/// this equals 2 − 2⟨a,b⟩ and lies in [0, 4].
pub fn squared_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(sq_dist(a.values(), b.values()))
}

/// Arithmetic mean of member embeddings, accumulated in f64.
pub fn identity_centroid(identity: u32, members: &[Embedding]) -> Result<IdentityCentroid> {
    let first = members.first().ok_or(Error::EmptyIdentity)?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    for e in members {
        if e.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: e.dim(),
            });
        }
        for (s, x) in sum.iter_mut().zip(e.values()) {
            *s += x;
        }
    }
    let n = members.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(IdentityCentroid {
        identity,
        centroid: sum,
        member_count: members.len(),
    })
}

/// Elementwise average (a+b)/2 of two representations of the same sample.
/// The result is generally not unit norm and is returned as a raw vector.
pub fn fuse_embeddings(a: &Embedding, b: &Embedding) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(fuse_raw(a.values(), b.values()))
}

pub(crate) fn fuse_raw(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()
}
