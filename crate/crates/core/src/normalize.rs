//! Normalizations applied to embeddings before scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::layout::PackedEmbedding;

/// Norms and standard deviations below this are treated as degenerate.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Raw projection outputs.
    #[default]
    None,
    /// Layer normalization of the whole packed vector, before unpacking.
    #[serde(rename = "layer")]
    LayerNorm,
    /// Per-vector L2 normalization of queries, keys and values.
    #[serde(rename = "kv-l2")]
    KeyValueL2,
    /// Per-vector L2 on queries and keys, then global normalization of the
    /// weighted value stacks.
    #[serde(rename = "key-global-l2")]
    KeyAndGlobalL2,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [
        NormMode::None,
        NormMode::LayerNorm,
        NormMode::KeyValueL2,
        NormMode::KeyAndGlobalL2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::LayerNorm => "layer",
            NormMode::KeyValueL2 => "kv-l2",
            NormMode::KeyAndGlobalL2 => "key-global-l2",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown normalization mode '{s}'")))
    }
}

/// Per-element affine applied after layer normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gain.iter().all(|&g| g == 1.0) && self.bias.iter().all(|&b| b == 0.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "vector")?;
    let n = norm(v);
    if n < EPS {
        return Err(Error::degenerate("vector norm", n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes `v` in place and returns its original norm.
pub(crate) fn l2_normalize_in_place(v: &mut [f64], what: &str) -> Result<f64> {
    let n = norm(v);
    if !(n >= EPS) {
        return Err(Error::degenerate(what, n));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

/// Pulls a gradient back through `y = x / |x|`, given the normalized `y` and
/// the original norm.
pub(crate) fn l2_backward(grad_y: &[f64], y: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(grad_y, y);
    grad_y.iter().zip(y).map(|(g, yi)| (g - proj * yi) / norm).collect()
}

pub fn layer_normalize(emb: &PackedEmbedding, p: &LayerNormParams) -> Result<PackedEmbedding> {
    check_finite(&emb.vec, "packed embedding")?;
    let (out, _) = layer_normalize_vec(&emb.vec, p)?;
    Ok(PackedEmbedding::new(emb.utterance_id.clone(), out))
}

/// Forward cache needed to differentiate layer normalization.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    /// Standardized input, before gain and bias.
    pub standardized: Vec<f64>,
    pub std: f64,
}

pub(crate) fn layer_normalize_vec(v: &[f64], p: &LayerNormParams) -> Result<(Vec<f64>, LayerNormCache)> {
    if p.gain.len() != v.len() || p.bias.len() != v.len() {
        return Err(Error::Dimension(format!(
            "layer norm params have length {}/{}, vector has {}",
            p.gain.len(),
            p.bias.len(),
            v.len()
        )));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= EPS) {
        return Err(Error::degenerate("layer norm standard deviation", std));
    }
    let standardized: Vec<f64> = v.iter().map(|x| (x - mean) / std).collect();
    let out = standardized
        .iter()
        .zip(p.gain.iter().zip(&p.bias))
        .map(|(z, (g, b))| g * z + b)
        .collect();
    Ok((out, LayerNormCache { standardized, std }))
}

pub(crate) fn layer_norm_backward(grad_out: &[f64], cache: &LayerNormCache, p: &LayerNormParams) -> Vec<f64> {
    let n = grad_out.len() as f64;
    let g: Vec<f64> = grad_out.iter().zip(&p.gain).map(|(d, g)| d * g).collect();
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_gz = dot(&g, &cache.standardized) / n;
    g.iter()
        .zip(&cache.standardized)
        .map(|(gi, zi)| (gi - mean_g - zi * mean_gz) / cache.std)
        .collect()
}
