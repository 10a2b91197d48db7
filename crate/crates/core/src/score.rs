//! Attentive scoring of test utterances against enrollment models.
//!
//! A test utterance contributes `M` (query, value) pairs and an enrollment
//! model contributes `N` (key, value) pairs. Every query is compared with
//! every key, a single softmax over all `M x N` logits `alpha * q_m . k_n`
//! produces the weights `w_mn`, and the score is `sum_mn w_mn t_m . e_n`.
//!
//! The same sum is the dot product of two long vectors `a` and `b` built by
//! stacking `sqrt(w_mn) t_m` and `sqrt(w_mn) e_n`. Dividing by `|a| |b|`
//! gives the globally normalized score, which only needs the row and
//! column sums of the weight matrix:
//!
//! ```text
//! |a|^2 = sum_m (sum_n w_mn) |t_m|^2      |b|^2 = sum_n (sum_m w_mn) |e_n|^2
//! ```
//!
//! All sums run with `m` in the outer loop and `n` in the inner loop, so
//! identical inputs give bit-identical scores.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::enroll::{mean_vector, EnrollAgg, EnrollMaterial, EnrollmentModel};
use crate::error::{check_finite, Error, Result};
use crate::layout::{LayoutConfig, PackedEmbedding, UnpackedRepresentation};
use crate::normalize::{
    dot, l2_backward, l2_normalize_in_place, layer_norm_backward, layer_normalize_vec, norm, LayerNormCache,
    LayerNormParams, NormMode, EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    #[default]
    Attentive,
    /// Cosine between the test vector and the mean of the L2-normalized
    /// enrollment vectors. Ignores the normalization mode.
    Cosine,
}

impl ScoreMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMethod::Attentive => "attentive",
            ScoreMethod::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attentive" => Ok(ScoreMethod::Attentive),
            "cosine" => Ok(ScoreMethod::Cosine),
            _ => Err(Error::Invalid(format!("unknown scoring method '{s}'"))),
        }
    }
}

/// The conventional temperature `1 / sqrt(d_k)`.
pub fn default_alpha(key_dim: usize) -> f64 {
    1.0 / (key_dim as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub method: ScoreMethod,
    pub norm: NormMode,
    /// Softmax temperature; must be positive.
    pub alpha: f64,
    pub layout: LayoutConfig,
    pub enroll_agg: EnrollAgg,
    /// Gain and bias for [`NormMode::LayerNorm`]; identity when absent.
    pub layer_norm: Option<LayerNormParams>,
}

impl ScoringConfig {
    pub fn attentive(layout: LayoutConfig, norm: NormMode) -> Self {
        ScoringConfig {
            method: ScoreMethod::Attentive,
            norm,
            alpha: default_alpha(layout.key_dim),
            layout,
            enroll_agg: EnrollAgg::Concat,
            layer_norm: None,
        }
    }

    pub fn cosine(layout: LayoutConfig) -> Self {
        ScoringConfig {
            method: ScoreMethod::Cosine,
            ..Self::attentive(layout, NormMode::None)
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_enroll_agg(mut self, agg: EnrollAgg) -> Self {
        self.enroll_agg = agg;
        self
    }

    pub fn tied(&self) -> bool {
        self.layout.tied
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        check_alpha(self.alpha)?;
        if let Some(p) = &self.layer_norm {
            let dim = self.layout.total_dim();
            if p.gain.len() != dim || p.bias.len() != dim {
                return Err(Error::Dimension(format!("layer norm params must have length {dim}")));
            }
        }
        Ok(())
    }

    pub(crate) fn layer_norm_params(&self) -> Cow<'_, LayerNormParams> {
        match &self.layer_norm {
            Some(p) => Cow::Borrowed(p),
            None => Cow::Owned(LayerNormParams::identity(self.layout.total_dim())),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!(
            "softmax temperature must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

/// Queries and values of the test utterance, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSide {
    key_dim: usize,
    value_dim: usize,
    queries: Vec<f64>,
    values: Vec<f64>,
}

/// Keys and values of an enrollment model, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrollSide {
    key_dim: usize,
    value_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

fn flatten(vectors: &[Vec<f64>], what: &str) -> Result<(usize, Vec<f64>)> {
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Dimension(format!("{what}: need at least one non-empty vector")));
    }
    let mut flat = Vec::with_capacity(dim * vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Dimension(format!(
                "{what} {i} has dimension {}, expected {dim}",
                v.len()
            )));
        }
        flat.extend_from_slice(v);
    }
    check_finite(&flat, what)?;
    Ok((dim, flat))
}

macro_rules! side_impl {
    ($ty:ident, $qk:ident, $qk_get:ident) => {
        impl $ty {
            pub fn new($qk: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
                if $qk.len() != values.len() {
                    return Err(Error::Dimension(format!(
                        "{} {} vs {} values",
                        $qk.len(),
                        stringify!($qk),
                        values.len()
                    )));
                }
                let (key_dim, $qk) = flatten($qk, stringify!($qk))?;
                let (value_dim, values) = flatten(values, "values")?;
                Ok($ty {
                    key_dim,
                    value_dim,
                    $qk,
                    values,
                })
            }

            pub(crate) fn from_flat(key_dim: usize, value_dim: usize, $qk: Vec<f64>, values: Vec<f64>) -> Self {
                debug_assert_eq!($qk.len() / key_dim, values.len() / value_dim);
                $ty {
                    key_dim,
                    value_dim,
                    $qk,
                    values,
                }
            }

            /// Number of pairs.
            pub fn len(&self) -> usize {
                self.values.len() / self.value_dim
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn key_dim(&self) -> usize {
                self.key_dim
            }

            pub fn value_dim(&self) -> usize {
                self.value_dim
            }

            pub fn $qk_get(&self, i: usize) -> &[f64] {
                &self.$qk[i * self.key_dim..(i + 1) * self.key_dim]
            }

            pub fn value(&self, i: usize) -> &[f64] {
                &self.values[i * self.value_dim..(i + 1) * self.value_dim]
            }
        }
    };
}

side_impl!(TestSide, queries, query);
side_impl!(EnrollSide, keys, key);

impl TestSide {
    /// Takes the queries and values of an unpacked test utterance.
    pub fn from_unpacked(rep: &UnpackedRepresentation) -> Result<Self> {
        Self::new(&rep.queries, &rep.values)
    }
}

impl EnrollSide {
    /// Concatenates keys and values of the given enrollment utterances.
    pub fn from_unpacked(reps: &[UnpackedRepresentation]) -> Result<Self> {
        let keys: Vec<Vec<f64>> = reps.iter().flat_map(|r| r.keys.iter().cloned()).collect();
        let values: Vec<Vec<f64>> = reps.iter().flat_map(|r| r.values.iter().cloned()).collect();
        Self::new(&keys, &values)
    }
}

/// Joint softmax weights over all query/key combinations.
///
/// Log-weights are kept next to the weights: at large temperatures the
/// smallest weights underflow to zero in linear form while their logarithms
/// stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl WeightMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.weights[m * self.cols + n]
    }

    pub fn log_weight(&self, m: usize, n: usize) -> f64 {
        self.log_weights[m * self.cols + n]
    }

    /// Row-major weights.
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.weights.chunks_exact(self.cols) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
        out
    }
}

/// Everything the forward pass computes that the backward pass reuses.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub weights: WeightMatrix,
    /// `q_m . k_n`, row-major.
    pub key_dots: Vec<f64>,
    /// `t_m . e_n`, row-major.
    pub value_dots: Vec<f64>,
    /// Unnormalized attentive score.
    pub s_att: f64,
}

fn check_compatible(test: &TestSide, enroll: &EnrollSide) -> Result<()> {
    if test.key_dim != enroll.key_dim || test.value_dim != enroll.value_dim {
        return Err(Error::Dimension(format!(
            "test side has d_k={}, d_v={}; enrollment side has d_k={}, d_v={}",
            test.key_dim, test.value_dim, enroll.key_dim, enroll.value_dim
        )));
    }
    if test.is_empty() || enroll.is_empty() {
        return Err(Error::Dimension("both sides need at least one pair".into()));
    }
    Ok(())
}

pub(crate) fn forward(test: &TestSide, enroll: &EnrollSide, alpha: f64) -> Result<Forward> {
    check_compatible(test, enroll)?;
    check_alpha(alpha)?;
    let (m_count, n_count) = (test.len(), enroll.len());
    let cells = m_count * n_count;
    let mut key_dots = Vec::with_capacity(cells);
    let mut value_dots = Vec::with_capacity(cells);
    for m in 0..m_count {
        let (q, t) = (test.query(m), test.value(m));
        for n in 0..n_count {
            key_dots.push(dot(q, enroll.key(n)));
            value_dots.push(dot(t, enroll.value(n)));
        }
    }

    let max_logit = key_dots.iter().map(|d| alpha * d).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = key_dots.iter().map(|d| (alpha * d - max_logit).exp()).collect();
    let total: f64 = weights.iter().sum();
    let log_total = total.ln();
    weights.iter_mut().for_each(|w| *w /= total);
    let log_weights = key_dots.iter().map(|d| alpha * d - max_logit - log_total).collect();

    let s_att = weights.iter().zip(&value_dots).map(|(w, v)| w * v).sum();
    if !f64::is_finite(s_att) {
        return Err(Error::NonFinite {
            context: "attentive score".into(),
            index: 0,
        });
    }
    Ok(Forward {
        weights: WeightMatrix {
            rows: m_count,
            cols: n_count,
            weights,
            log_weights,
        },
        key_dots,
        value_dots,
        s_att,
    })
}

/// Squared norms of the stacked vectors `a` and `b`.
pub(crate) struct GlobalNorms {
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub test_norms2: Vec<f64>,
    pub enroll_norms2: Vec<f64>,
    pub a2: f64,
    pub b2: f64,
}

pub(crate) fn global_norms(test: &TestSide, enroll: &EnrollSide, fwd: &Forward) -> Result<GlobalNorms> {
    let row_sums = fwd.weights.row_sums();
    let col_sums = fwd.weights.col_sums();
    let test_norms2: Vec<f64> = (0..test.len()).map(|m| dot(test.value(m), test.value(m))).collect();
    let enroll_norms2: Vec<f64> = (0..enroll.len())
        .map(|n| dot(enroll.value(n), enroll.value(n)))
        .collect();
    let a2: f64 = row_sums.iter().zip(&test_norms2).map(|(r, t)| r * t).sum();
    let b2: f64 = col_sums.iter().zip(&enroll_norms2).map(|(c, e)| c * e).sum();
    if !(a2 >= EPS) {
        return Err(Error::degenerate("weighted test value norm", a2));
    }
    if !(b2 >= EPS) {
        return Err(Error::degenerate("weighted enrollment value norm", b2));
    }
    Ok(GlobalNorms {
        row_sums,
        col_sums,
        test_norms2,
        enroll_norms2,
        a2,
        b2,
    })
}

pub fn softmax_weights(test: &TestSide, enroll: &EnrollSide, alpha: f64) -> Result<WeightMatrix> {
    Ok(forward(test, enroll, alpha)?.weights)
}

/// Weighted sum of value dot products. Inputs must already be normalized
/// as the configuration requires.
pub fn score_attentive(test: &TestSide, enroll: &EnrollSide, cfg: &ScoringConfig) -> Result<f64> {
    Ok(forward(test, enroll, cfg.alpha)?.s_att)
}

/// Attentive score divided by the norms of the weighted value stacks.
/// Queries and keys should be unit length; values are used as given.
pub fn score_global_l2(test: &TestSide, enroll: &EnrollSide, cfg: &ScoringConfig) -> Result<f64> {
    let fwd = forward(test, enroll, cfg.alpha)?;
    let g = global_norms(test, enroll, &fwd)?;
    Ok((fwd.s_att / (g.a2.sqrt() * g.b2.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na >= EPS) {
        return Err(Error::degenerate("vector norm", na));
    }
    if !(nb >= EPS) {
        return Err(Error::degenerate("vector norm", nb));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the test vector and the average of the L2-normalized
/// enrollment vectors.
pub fn score_cosine_baseline(test_emb: &PackedEmbedding, enroll_embs: &[PackedEmbedding]) -> Result<f64> {
    let vecs: Vec<&[f64]> = enroll_embs.iter().map(|e| e.vec.as_slice()).collect();
    cosine_baseline(&test_emb.vec, &vecs)
}

pub(crate) fn cosine_baseline(test: &[f64], enroll: &[&[f64]]) -> Result<f64> {
    if enroll.is_empty() {
        return Err(Error::Invalid("cosine baseline needs an enrollment vector".into()));
    }
    check_finite(test, "test embedding")?;
    let mut avg = vec![0.0; test.len()];
    for (j, v) in enroll.iter().enumerate() {
        if v.len() != test.len() {
            return Err(Error::Dimension(format!(
                "enrollment vector {j} has length {}, test has {}",
                v.len(),
                test.len()
            )));
        }
        check_finite(v, "enrollment embedding")?;
        let n = norm(v);
        if !(n >= EPS) {
            return Err(Error::degenerate("enrollment vector norm", n));
        }
        for (a, x) in avg.iter_mut().zip(v.iter()) {
            *a += x / n;
        }
    }
    let e = enroll.len() as f64;
    avg.iter_mut().for_each(|a| *a /= e);
    cosine(test, &avg)
}

/// Which side of a trial an utterance sits on. Decides whether the shared
/// query/key block is read as a query or a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Test,
    Enroll,
}

/// One packed vector after normalization and unpacking, with the caches
/// needed to pull gradients back to the packed vector.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    /// Queries (test role) or keys (enroll role), `M * d_k`.
    pub qk: Vec<f64>,
    pub values: Vec<f64>,
    layer_norm: Option<LayerNormCache>,
    qk_norms: Vec<f64>,
    value_norms: Vec<f64>,
}

pub(crate) fn prepare(vec: &[f64], cfg: &ScoringConfig, role: Role) -> Result<Prepared> {
    let layout = &cfg.layout;
    layout.check_vec(vec)?;
    let (normed, layer_norm) = if cfg.norm == NormMode::LayerNorm {
        let (out, cache) = layer_normalize_vec(vec, &cfg.layer_norm_params())?;
        (Cow::Owned(out), Some(cache))
    } else {
        (Cow::Borrowed(vec), None)
    };
    let m_count = layout.num_pairs;
    let mut qk = Vec::with_capacity(m_count * layout.key_dim);
    let mut values = Vec::with_capacity(m_count * layout.value_dim);
    for pair in 0..m_count {
        let range = match role {
            Role::Test => layout.query_range(pair),
            Role::Enroll => layout.key_range(pair),
        };
        qk.extend_from_slice(&normed[range]);
        values.extend_from_slice(&normed[layout.value_range(pair)]);
    }

    let side = match role {
        Role::Test => "query",
        Role::Enroll => "key",
    };
    let mut qk_norms = Vec::new();
    let mut value_norms = Vec::new();
    if matches!(cfg.norm, NormMode::KeyValueL2 | NormMode::KeyAndGlobalL2) {
        for (pair, chunk) in qk.chunks_exact_mut(layout.key_dim).enumerate() {
            qk_norms.push(l2_normalize_in_place(chunk, &format!("{side} {pair} norm"))?);
        }
    }
    if cfg.norm == NormMode::KeyValueL2 {
        for (pair, chunk) in values.chunks_exact_mut(layout.value_dim).enumerate() {
            value_norms.push(l2_normalize_in_place(chunk, &format!("value {pair} norm"))?);
        }
    }
    Ok(Prepared {
        qk,
        values,
        layer_norm,
        qk_norms,
        value_norms,
    })
}

impl Prepared {
    pub fn test_side(&self, layout: &LayoutConfig) -> TestSide {
        TestSide::from_flat(layout.key_dim, layout.value_dim, self.qk.clone(), self.values.clone())
    }

    /// Pulls gradients w.r.t. the prepared queries/keys and values back to
    /// the packed vector.
    pub fn backward(&self, d_qk: &[f64], d_values: &[f64], cfg: &ScoringConfig, role: Role) -> Vec<f64> {
        let layout = &cfg.layout;
        let (dk, dv) = (layout.key_dim, layout.value_dim);
        let mut grad = vec![0.0; layout.total_dim()];
        for pair in 0..layout.num_pairs {
            let g_qk = &d_qk[pair * dk..(pair + 1) * dk];
            let g_v = &d_values[pair * dv..(pair + 1) * dv];
            let range = match role {
                Role::Test => layout.query_range(pair),
                Role::Enroll => layout.key_range(pair),
            };
            if self.qk_norms.is_empty() {
                grad[range].copy_from_slice(g_qk);
            } else {
                let y = &self.qk[pair * dk..(pair + 1) * dk];
                grad[range].copy_from_slice(&l2_backward(g_qk, y, self.qk_norms[pair]));
            }
            let range = layout.value_range(pair);
            if self.value_norms.is_empty() {
                grad[range].copy_from_slice(g_v);
            } else {
                let y = &self.values[pair * dv..(pair + 1) * dv];
                grad[range].copy_from_slice(&l2_backward(g_v, y, self.value_norms[pair]));
            }
        }
        match &self.layer_norm {
            Some(cache) => layer_norm_backward(&grad, cache, &cfg.layer_norm_params()),
            None => grad,
        }
    }
}

/// Concatenates prepared enrollment utterances into one enrollment side.
pub(crate) fn enroll_side(prepared: &[&Prepared], layout: &LayoutConfig) -> EnrollSide {
    let keys = prepared.iter().flat_map(|p| p.qk.iter().copied()).collect();
    let values = prepared.iter().flat_map(|p| p.values.iter().copied()).collect();
    EnrollSide::from_flat(layout.key_dim, layout.value_dim, keys, values)
}

/// Score of prepared sides under the configured normalization.
pub(crate) fn score_prepared(test: &TestSide, enroll: &EnrollSide, cfg: &ScoringConfig) -> Result<f64> {
    match cfg.norm {
        NormMode::KeyAndGlobalL2 => score_global_l2(test, enroll, cfg),
        _ => score_attentive(test, enroll, cfg),
    }
}

/// The enrollment vectors actually scored: the model's stored vectors, or
/// their mean when the configuration asks for mean aggregation.
pub(crate) fn effective_enroll_vectors<'a>(model: &'a EnrollmentModel, cfg: &ScoringConfig) -> Cow<'a, [Vec<f64>]> {
    match (&model.material, cfg.enroll_agg) {
        (EnrollMaterial::Concat(embs), EnrollAgg::Mean) if embs.len() > 1 => {
            let vecs: Vec<&[f64]> = embs.iter().map(|e| e.vec.as_slice()).collect();
            Cow::Owned(vec![mean_vector(&vecs)])
        }
        _ => Cow::Owned(model.vectors().iter().map(|v| v.to_vec()).collect()),
    }
}

pub(crate) fn check_trial(test_emb: &PackedEmbedding, model: &EnrollmentModel, cfg: &ScoringConfig) -> Result<()> {
    cfg.validate()?;
    if model.layout != cfg.layout {
        return Err(Error::Layout(format!(
            "enrollment model for '{}' has layout {:?}, scoring expects {:?}",
            model.speaker_id, model.layout, cfg.layout
        )));
    }
    cfg.layout.check_vec(&test_emb.vec)?;
    for v in model.vectors() {
        cfg.layout.check_vec(v)?;
    }
    Ok(())
}

/// Scores one trial: normalizes, unpacks, aggregates enrollment and
/// dispatches to the configured scorer.
pub fn score_trial(test_emb: &PackedEmbedding, model: &EnrollmentModel, cfg: &ScoringConfig) -> Result<f64> {
    check_trial(test_emb, model, cfg)?;
    let enroll_vecs = effective_enroll_vectors(model, cfg);
    match cfg.method {
        ScoreMethod::Cosine => {
            let refs: Vec<&[f64]> = enroll_vecs.iter().map(Vec::as_slice).collect();
            cosine_baseline(&test_emb.vec, &refs)
        }
        ScoreMethod::Attentive => {
            let test = prepare(&test_emb.vec, cfg, Role::Test)?.test_side(&cfg.layout);
            let prepared = enroll_vecs
                .iter()
                .map(|v| prepare(v, cfg, Role::Enroll))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Prepared> = prepared.iter().collect();
            score_prepared(&test, &enroll_side(&refs, &cfg.layout), cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enroll::build_enrollment;
    use crate::layout::unpack;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn side_pair(q: &[Vec<f64>], t: &[Vec<f64>], k: &[Vec<f64>], e: &[Vec<f64>]) -> (TestSide, EnrollSide) {
        (TestSide::new(q, t).unwrap(), EnrollSide::new(k, e).unwrap())
    }

    fn cfg_for(dk: usize, dv: usize, norm: NormMode, alpha: f64) -> ScoringConfig {
        ScoringConfig::attentive(LayoutConfig::tied(1, dk, dv).unwrap(), norm).with_alpha(alpha)
    }

    /// Term-by-term transcription of the two defining formulas.
    fn brute_force_score(q: &[Vec<f64>], t: &[Vec<f64>], k: &[Vec<f64>], e: &[Vec<f64>], alpha: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut denom = 0.0;
        for qi in q {
            for kj in k {
                denom += (alpha * d(qi, kj)).exp();
            }
        }
        let mut s = 0.0;
        for (qm, tm) in q.iter().zip(t) {
            for (kn, en) in k.iter().zip(e) {
                s += (alpha * d(qm, kn)).exp() / denom * d(tm, en);
            }
        }
        s
    }

    fn random_vecs(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn single_entry_softmax() {
        let (t, e) = side_pair(&[vec![3.0]], &[vec![1.0]], &[vec![-2.0]], &[vec![1.0]]);
        let w = softmax_weights(&t, &e, 0.7).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }

    #[test]
    fn tiny_alpha_is_uniform() {
        let (t, e) = side_pair(
            &[vec![1.0, 0.0], vec![0.0, 5.0]],
            &[vec![1.0], vec![1.0]],
            &[vec![3.0, 1.0], vec![-1.0, 2.0], vec![0.5, 0.5]],
            &[vec![1.0], vec![1.0], vec![1.0]],
        );
        let w = softmax_weights(&t, &e, 1e-12).unwrap();
        for &x in w.as_slice() {
            assert!((x - 1.0 / 6.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_by_one_weights() {
        // q1.k1 = 1, q2.k1 = 0
        let (t, e) = side_pair(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0], vec![1.0]],
            &[vec![1.0, 0.0]],
            &[vec![1.0]],
        );
        let w = softmax_weights(&t, &e, 1.0).unwrap();
        let ee = std::f64::consts::E;
        assert!((w.get(0, 0) - ee / (ee + 1.0)).abs() < 1e-15);
        assert!((w.get(1, 0) - 1.0 / (ee + 1.0)).abs() < 1e-15);
        assert!((w.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((w.get(1, 0) - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn single_pair_is_dot_product() {
        let (t, e) = side_pair(&[vec![0.3]], &[vec![1.0, 0.0]], &[vec![0.9]], &[vec![0.5, 0.5]]);
        let s = score_attentive(&t, &e, &cfg_for(1, 2, NormMode::None, 1.0)).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn identical_normalized_pair_scores_one() {
        let v = vec![0.6, 0.8];
        let (t, e) = side_pair(
            &[vec![1.0]],
            std::slice::from_ref(&v),
            &[vec![1.0]],
            std::slice::from_ref(&v),
        );
        let s = score_attentive(&t, &e, &cfg_for(1, 2, NormMode::KeyValueL2, 1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn integer_instance_matches_brute_force() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let t = vec![vec![1.0, 2.0, 0.0], vec![-1.0, 1.0, 3.0]];
        let k = vec![vec![1.0, 1.0], vec![2.0, -1.0]];
        let e = vec![vec![0.0, 1.0, 1.0], vec![2.0, 0.0, -1.0]];
        let (ts, es) = side_pair(&q, &t, &k, &e);
        let s = score_attentive(&ts, &es, &cfg_for(2, 3, NormMode::None, 1.0)).unwrap();
        let oracle = brute_force_score(&q, &t, &k, &e, 1.0);
        // logits [1,2,2,-2], value dots [2,2,4,-5]; frozen from an independent numpy evaluation
        assert!((oracle - 2.7844247703887044).abs() < 1e-12, "{oracle}");
        assert!((s - oracle).abs() < 1e-13);
    }

    #[test]
    fn global_single_pair_is_cosine() {
        let (t, e) = side_pair(
            &[vec![1.0]],
            &[vec![1.0, 2.0, -1.0]],
            &[vec![1.0]],
            &[vec![0.5, -1.0, 4.0]],
        );
        let cfg = cfg_for(1, 3, NormMode::KeyAndGlobalL2, 1.0);
        let s = score_global_l2(&t, &e, &cfg).unwrap();
        let c = cosine(&[1.0, 2.0, -1.0], &[0.5, -1.0, 4.0]).unwrap();
        assert!((s - c).abs() < 1e-15);
        let (t, e) = side_pair(&[vec![1.0]], &[vec![1.0, 2.0]], &[vec![1.0]], &[vec![1.0, 2.0]]);
        let s = score_global_l2(&t, &e, &cfg_for(1, 2, NormMode::KeyAndGlobalL2, 1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && s <= 1.0);
    }

    #[test]
    fn global_degenerate_values() {
        let (t, e) = side_pair(&[vec![1.0]], &[vec![0.0, 0.0]], &[vec![1.0]], &[vec![1.0, 2.0]]);
        let cfg = cfg_for(1, 2, NormMode::KeyAndGlobalL2, 1.0);
        assert!(matches!(score_global_l2(&t, &e, &cfg), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn global_matches_materialized_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, t) = (random_vecs(&mut rng, 4, 3), random_vecs(&mut rng, 4, 5));
        let (k, e) = (random_vecs(&mut rng, 8, 3), random_vecs(&mut rng, 8, 5));
        let (ts, es) = side_pair(&q, &t, &k, &e);
        let cfg = cfg_for(3, 5, NormMode::KeyAndGlobalL2, 0.8);
        let w = softmax_weights(&ts, &es, 0.8).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for m in 0..4 {
            for n in 0..8 {
                let s = w.get(m, n).sqrt();
                a.extend(t[m].iter().map(|x| s * x));
                b.extend(e[n].iter().map(|x| s * x));
            }
        }
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let expected = d(&a, &b) / (d(&a, &a).sqrt() * d(&b, &b).sqrt());
        assert!((score_global_l2(&ts, &es, &cfg).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn cosine_baseline_examples() {
        let test = PackedEmbedding::new("t", vec![1.0, 2.0, 3.0]);
        let same = score_cosine_baseline(&test, std::slice::from_ref(&test)).unwrap();
        assert!((same - 1.0).abs() < 1e-15);
        let neg = PackedEmbedding::new("e", vec![-1.0, -2.0, -3.0]);
        assert!((score_cosine_baseline(&test, &[neg]).unwrap() + 1.0).abs() < 1e-15);

        let u = PackedEmbedding::new("u", vec![1.0, 0.0]);
        let v = PackedEmbedding::new("v", vec![0.0, 3.0]);
        let s = score_cosine_baseline(&u, &[u.clone(), v]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_baseline_rejects_degenerate() {
        let test = PackedEmbedding::new("t", vec![1.0, 2.0]);
        let zero = PackedEmbedding::new("z", vec![0.0, 0.0]);
        assert!(matches!(
            score_cosine_baseline(&test, &[zero]),
            Err(Error::Degenerate { .. })
        ));
        assert!(score_cosine_baseline(&test, &[]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (t, _) = side_pair(&[vec![1.0]], &[vec![1.0]], &[vec![1.0]], &[vec![1.0]]);
        let e = EnrollSide::new(&[vec![1.0, 2.0]], &[vec![1.0]]).unwrap();
        assert!(matches!(softmax_weights(&t, &e, 1.0), Err(Error::Dimension(_))));
        assert!(TestSide::new(&[vec![1.0], vec![1.0, 2.0]], &[vec![1.0], vec![1.0]]).is_err());
        assert!(TestSide::new(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn bad_alpha_rejected() {
        let (t, e) = side_pair(&[vec![1.0]], &[vec![1.0]], &[vec![1.0]], &[vec![1.0]]);
        assert!(softmax_weights(&t, &e, 0.0).is_err());
        assert!(softmax_weights(&t, &e, -1.0).is_err());
        assert!(softmax_weights(&t, &e, f64::NAN).is_err());
    }

    #[test]
    fn default_alpha_is_inverse_sqrt_key_dim() {
        assert!((default_alpha(32) - 0.17677669529663687).abs() < 1e-15);
        let cfg = ScoringConfig::attentive(LayoutConfig::tied(8, 32, 256).unwrap(), NormMode::None);
        assert!((cfg.alpha - 0.176777).abs() < 1e-6);
    }

    #[test]
    fn trial_none_mode_single_pair_is_value_dot() {
        let layout = LayoutConfig::tied(1, 2, 3).unwrap();
        let cfg = ScoringConfig::attentive(layout, NormMode::None);
        let test = PackedEmbedding::new("t", vec![0.2, 0.1, 1.0, 2.0, 3.0]);
        let enr = PackedEmbedding::new("e", vec![-0.5, 0.4, 0.5, -1.0, 2.0]);
        let model = build_enrollment(&[enr], &layout, EnrollAgg::Concat, "s").unwrap();
        assert_eq!(score_trial(&test, &model, &cfg).unwrap(), 0.5 - 2.0 + 6.0);
    }

    #[test]
    fn trial_mean_of_identical_equals_single() {
        let layout = LayoutConfig::independent(2, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let test = PackedEmbedding::new("t", random_vecs(&mut rng, 1, 14).remove(0));
        let enr = PackedEmbedding::new("e", random_vecs(&mut rng, 1, 14).remove(0));
        for norm in NormMode::ALL {
            let cfg = ScoringConfig::attentive(layout, norm).with_enroll_agg(EnrollAgg::Mean);
            let single = build_enrollment(std::slice::from_ref(&enr), &layout, EnrollAgg::Concat, "s").unwrap();
            let triple =
                build_enrollment(&[enr.clone(), enr.clone(), enr.clone()], &layout, EnrollAgg::Mean, "s").unwrap();
            let a = score_trial(&test, &single, &cfg).unwrap();
            let b = score_trial(&test, &triple, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12, "{norm}: {a} vs {b}");
        }
    }

    #[test]
    fn trial_cosine_method_matches_baseline() {
        let layout = LayoutConfig::tied(2, 1, 2).unwrap();
        let cfg = ScoringConfig::cosine(layout);
        let test = PackedEmbedding::new("t", vec![1.0, 2.0, 0.5, -1.0, 0.0, 2.0]);
        let embs = vec![
            PackedEmbedding::new("a", vec![0.0, 1.0, 0.5, -1.0, 0.2, 2.0]),
            PackedEmbedding::new("b", vec![3.0, 2.0, -0.5, 1.0, 0.0, 1.0]),
        ];
        let model = build_enrollment(&embs, &layout, EnrollAgg::Concat, "s").unwrap();
        let s = score_trial(&test, &model, &cfg).unwrap();
        assert_eq!(s, score_cosine_baseline(&test, &embs).unwrap());
    }

    #[test]
    fn trial_rejects_layout_mismatch_and_nan() {
        let layout = LayoutConfig::tied(1, 1, 1).unwrap();
        let other = LayoutConfig::tied(1, 1, 2).unwrap();
        let model = build_enrollment(
            &[PackedEmbedding::new("e", vec![1.0, 1.0])],
            &layout,
            EnrollAgg::Concat,
            "s",
        )
        .unwrap();
        let cfg = ScoringConfig::attentive(other, NormMode::None);
        assert!(matches!(
            score_trial(&PackedEmbedding::new("t", vec![1.0, 1.0, 1.0]), &model, &cfg),
            Err(Error::Layout(_))
        ));
        let cfg = ScoringConfig::attentive(layout, NormMode::None);
        assert!(matches!(
            score_trial(&PackedEmbedding::new("t", vec![f64::NAN, 1.0]), &model, &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn trial_is_deterministic() {
        let layout = LayoutConfig::tied(3, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let test = PackedEmbedding::new("t", random_vecs(&mut rng, 1, 27).remove(0));
        let embs: Vec<_> = random_vecs(&mut rng, 3, 27)
            .into_iter()
            .enumerate()
            .map(|(i, v)| PackedEmbedding::new(format!("e{i}"), v))
            .collect();
        let model = build_enrollment(&embs, &layout, EnrollAgg::Concat, "s").unwrap();
        for norm in NormMode::ALL {
            let cfg = ScoringConfig::attentive(layout, norm);
            let a = score_trial(&test, &model, &cfg).unwrap();
            let b = score_trial(&test, &model, &cfg).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unpacked_sides_match_trial_pipeline() {
        let layout = LayoutConfig::independent(2, 2, 2).unwrap();
        let test = PackedEmbedding::new("t", vec![1.0, 0.5, 9.0, 9.0, 0.3, -0.2, -1.0, 2.0, 9.0, 9.0, 1.0, 1.0]);
        let enr = PackedEmbedding::new("e", vec![9.0, 9.0, 0.2, 0.1, 1.0, 0.0, 9.0, 9.0, 1.5, -0.5, 0.5, 2.0]);
        let cfg = ScoringConfig::attentive(layout, NormMode::None);
        let ts = TestSide::from_unpacked(&unpack(&test, &layout).unwrap()).unwrap();
        let es = EnrollSide::from_unpacked(&[unpack(&enr, &layout).unwrap()]).unwrap();
        let model = build_enrollment(&[enr], &layout, EnrollAgg::Concat, "s").unwrap();
        assert_eq!(
            score_attentive(&ts, &es, &cfg).unwrap(),
            score_trial(&test, &model, &cfg).unwrap()
        );
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
        (1usize..5, 1usize..7, 1usize..5, 1usize..5, 0.05f64..5.0).prop_flat_map(|(m, n, dk, dv, alpha)| {
            let vecs = |c, d| prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), c);
            (vecs(m, dk), vecs(m, dv), vecs(n, dk), vecs(n, dv), Just(alpha))
        })
    }

    fn unit(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        v.iter()
            .map(|x| {
                crate::normalize::l2_normalize(x).unwrap_or_else(|_| {
                    let mut u = vec![0.0; x.len()];
                    u[0] = 1.0;
                    u
                })
            })
            .collect()
    }

    proptest! {
        #[test]
        fn weights_form_simplex((q, t, k, e, alpha) in instance()) {
            let (ts, es) = side_pair(&q, &t, &k, &e);
            let w = softmax_weights(&ts, &es, alpha).unwrap();
            prop_assert!((w.sum() - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn matches_brute_force((q, t, k, e, alpha) in instance()) {
            let (ts, es) = side_pair(&q, &t, &k, &e);
            let cfg = cfg_for(q[0].len(), t[0].len(), NormMode::None, alpha);
            let s = score_attentive(&ts, &es, &cfg).unwrap();
            let o = brute_force_score(&q, &t, &k, &e, alpha);
            prop_assert!((s - o).abs() <= 1e-12 * (1.0 + o.abs()));
        }

        #[test]
        fn permutation_invariant((q, t, k, e, alpha) in instance(), rot_m in 0usize..8, rot_n in 0usize..8) {
            let (ts, es) = side_pair(&q, &t, &k, &e);
            let cfg = cfg_for(q[0].len(), t[0].len(), NormMode::KeyAndGlobalL2, alpha);
            let rot = |v: &[Vec<f64>], r: usize| { let mut v = v.to_vec(); let l = v.len(); v.rotate_left(r % l); v };
            let (ts2, es2) = side_pair(&rot(&q, rot_m), &rot(&t, rot_m), &rot(&k, rot_n), &rot(&e, rot_n));
            let a = score_attentive(&ts, &es, &cfg).unwrap();
            let b = score_attentive(&ts2, &es2, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            if let (Ok(a), Ok(b)) = (score_global_l2(&ts, &es, &cfg), score_global_l2(&ts2, &es2, &cfg)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bounded_scores((q, t, k, e, alpha) in instance()) {
            let (q, k) = (unit(&q), unit(&k));
            let (ts, es) = side_pair(&q, &t, &k, &e);
            let cfg = cfg_for(q[0].len(), t[0].len(), NormMode::KeyAndGlobalL2, alpha);
            if let Ok(g) = score_global_l2(&ts, &es, &cfg) {
                prop_assert!((-1.0..=1.0).contains(&g));
            }
            let (tn, en) = (unit(&t), unit(&e));
            let (ts, es) = side_pair(&q, &tn, &k, &en);
            let s = score_attentive(&ts, &es, &cfg).unwrap();
            prop_assert!(s.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn temperature_limits((q, t, k, e, _alpha) in instance()) {
            let (ts, es) = side_pair(&q, &t, &k, &e);
            let cfg = cfg_for(q[0].len(), t[0].len(), NormMode::None, 1e-9);
            let s = score_attentive(&ts, &es, &cfg).unwrap();
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mean = t.iter().flat_map(|tm| e.iter().map(move |en| d(tm, en))).sum::<f64>()
                / (t.len() * e.len()) as f64;
            prop_assert!((s - mean).abs() < 1e-6);
        }

        #[test]
        fn key_scale_invariance_under_global((q, t, k, e, alpha) in instance(), c in 0.01f64..100.0, which in 0usize..4) {
            let layout = LayoutConfig::independent(q.len(), q[0].len(), t[0].len()).unwrap();
            let cfg = ScoringConfig::attentive(layout, NormMode::KeyAndGlobalL2).with_alpha(alpha);
            let n_utts = 1;
            let k = &k[..q.len().min(k.len())];
            prop_assume!(k.len() == q.len() * n_utts);
            let build = |q: &[Vec<f64>], k: &[Vec<f64>]| -> (PackedEmbedding, PackedEmbedding) {
                let rep_t = UnpackedRepresentation { queries: q.to_vec(), keys: q.to_vec(), values: t.clone() };
                let rep_e = UnpackedRepresentation { queries: k.to_vec(), keys: k.to_vec(), values: e[..k.len()].to_vec() };
                (crate::layout::pack(&rep_t, &layout, "t").unwrap(), crate::layout::pack(&rep_e, &layout, "e").unwrap())
            };
            let (pt, pe) = build(&q, k);
            let model = build_enrollment(&[pe], &layout, EnrollAgg::Concat, "s").unwrap();
            let Ok(base) = score_trial(&pt, &model, &cfg) else { return Ok(()); };
            let mut q2 = q.clone();
            let mut k2 = k.to_vec();
            let idx = which % q.len();
            q2[idx].iter_mut().for_each(|x| *x *= c);
            k2[idx].iter_mut().for_each(|x| *x *= c);
            let (pt2, pe2) = build(&q2, &k2);
            let model2 = build_enrollment(&[pe2], &layout, EnrollAgg::Concat, "s").unwrap();
            let scaled = score_trial(&pt2, &model2, &cfg).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }
    }

    #[test]
    fn large_alpha_selects_dominant_pair() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let k = vec![vec![2.0, 0.0], vec![0.0, 0.5]];
        // q1.k1 = 2 dominates every other logit by >= 1.5
        let t = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let e = vec![vec![0.5, 0.5], vec![3.0, -2.0]];
        let (ts, es) = side_pair(&q, &t, &k, &e);
        let s = score_attentive(&ts, &es, &cfg_for(2, 2, NormMode::None, 1e3)).unwrap();
        assert!((s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tied_self_trial_weights_are_symmetric() {
        let layout = LayoutConfig::tied(4, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_vecs(&mut rng, 1, layout.total_dim()).remove(0);
        let cfg = ScoringConfig::attentive(layout, NormMode::KeyValueL2);
        let t = prepare(&v, &cfg, Role::Test).unwrap();
        let e = prepare(&v, &cfg, Role::Enroll).unwrap();
        let w = softmax_weights(&t.test_side(&layout), &enroll_side(&[&e], &layout), cfg.alpha).unwrap();
        for m in 0..4 {
            for n in 0..4 {
                assert!((w.get(m, n) - w.get(n, m)).abs() < 1e-12);
            }
        }
    }
}
