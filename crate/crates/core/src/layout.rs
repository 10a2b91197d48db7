//! Packed embedding layout.
//!
//! An utterance embedding is one flat vector holding `M` query/key/value
//! triplets. Pairs are stored one after another (pair-major); within a pair
//! the query block comes first, then the key block (independent layouts
//! only), then the value block:
//!
//! ```text
//! tied:         [ q1|k1 | v1 ][ q2|k2 | v2 ] ...      (d_k + d_v) * M
//! independent:  [ q1 | k1 | v1 ][ q2 | k2 | v2 ] ...  (2 d_k + d_v) * M
//! ```
//!
//! With tied layouts the single `d_k` block serves as the query of a test
//! utterance and as the key of an enrollment utterance.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub num_pairs: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub tied: bool,
}

impl LayoutConfig {
    pub fn new(num_pairs: usize, key_dim: usize, value_dim: usize, tied: bool) -> Result<Self> {
        let cfg = LayoutConfig {
            num_pairs,
            key_dim,
            value_dim,
            tied,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tied(num_pairs: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        Self::new(num_pairs, key_dim, value_dim, true)
    }

    pub fn independent(num_pairs: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        Self::new(num_pairs, key_dim, value_dim, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::Layout(format!(
                "all dimensions must be >= 1 (pairs={}, key_dim={}, value_dim={})",
                self.num_pairs, self.key_dim, self.value_dim
            )));
        }
        Ok(())
    }

    /// Floats occupied by one query/key/value triplet.
    pub fn pair_stride(&self) -> usize {
        if self.tied {
            self.key_dim + self.value_dim
        } else {
            2 * self.key_dim + self.value_dim
        }
    }

    pub fn total_dim(&self) -> usize {
        self.pair_stride() * self.num_pairs
    }

    pub fn query_range(&self, pair: usize) -> Range<usize> {
        let start = pair * self.pair_stride();
        start..start + self.key_dim
    }

    /// For tied layouts this is the same range as the query.
    pub fn key_range(&self, pair: usize) -> Range<usize> {
        let start = pair * self.pair_stride() + if self.tied { 0 } else { self.key_dim };
        start..start + self.key_dim
    }

    pub fn value_range(&self, pair: usize) -> Range<usize> {
        let end = (pair + 1) * self.pair_stride();
        end - self.value_dim..end
    }

    /// Checks that `vec` has this layout's length and only finite entries.
    pub fn check_vec(&self, vec: &[f64]) -> Result<()> {
        if vec.len() != self.total_dim() {
            return Err(Error::Layout(format!(
                "vector length {} does not match layout total_dim {}",
                vec.len(),
                self.total_dim()
            )));
        }
        check_finite(vec, "packed embedding")
    }
}

/// One utterance embedding as stored on disk or sent over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedEmbedding {
    pub utterance_id: String,
    pub vec: Vec<f64>,
}

impl PackedEmbedding {
    pub fn new(utterance_id: impl Into<String>, vec: Vec<f64>) -> Self {
        PackedEmbedding {
            utterance_id: utterance_id.into(),
            vec,
        }
    }
}

/// The `M` (query, key, value) triplets of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpackedRepresentation {
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

pub fn unpack(emb: &PackedEmbedding, cfg: &LayoutConfig) -> Result<UnpackedRepresentation> {
    cfg.validate()?;
    cfg.check_vec(&emb.vec)?;
    let v = &emb.vec;
    let m = cfg.num_pairs;
    let mut rep = UnpackedRepresentation {
        queries: Vec::with_capacity(m),
        keys: Vec::with_capacity(m),
        values: Vec::with_capacity(m),
    };
    for pair in 0..m {
        rep.queries.push(v[cfg.query_range(pair)].to_vec());
        rep.keys.push(v[cfg.key_range(pair)].to_vec());
        rep.values.push(v[cfg.value_range(pair)].to_vec());
    }
    Ok(rep)
}

pub fn pack(
    rep: &UnpackedRepresentation,
    cfg: &LayoutConfig,
    utterance_id: impl Into<String>,
) -> Result<PackedEmbedding> {
    cfg.validate()?;
    let m = cfg.num_pairs;
    if rep.queries.len() != m || rep.keys.len() != m || rep.values.len() != m {
        return Err(Error::Dimension(format!(
            "expected {m} triplets, got {} queries, {} keys, {} values",
            rep.queries.len(),
            rep.keys.len(),
            rep.values.len()
        )));
    }
    let mut vec = vec![0.0; cfg.total_dim()];
    for pair in 0..m {
        let (q, k, v) = (&rep.queries[pair], &rep.keys[pair], &rep.values[pair]);
        if q.len() != cfg.key_dim || k.len() != cfg.key_dim || v.len() != cfg.value_dim {
            return Err(Error::Dimension(format!(
                "pair {pair}: dims q={} k={} v={} do not match layout (d_k={}, d_v={})",
                q.len(),
                k.len(),
                v.len(),
                cfg.key_dim,
                cfg.value_dim
            )));
        }
        if cfg.tied && q != k {
            return Err(Error::Layout(format!(
                "pair {pair}: tied layout requires identical query and key"
            )));
        }
        vec[cfg.query_range(pair)].copy_from_slice(q);
        vec[cfg.key_range(pair)].copy_from_slice(k);
        vec[cfg.value_range(pair)].copy_from_slice(v);
    }
    Ok(PackedEmbedding::new(utterance_id, vec))
}
