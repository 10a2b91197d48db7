//! Attentive temporal pooling: a sigmoid-gated running weighted mean and
//! standard deviation over a stream of frame vectors.
//!
//! The state only holds weighted moments, so statistics can be read out
//! after any frame.

use crate::error::{check_finite, Error, Result};
use crate::normalize::{dot, EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub weight_vec: Vec<f64>,
    pub weight_bias: f64,
}

impl PoolingParams {
    /// Gate that weights every frame 0.5.
    pub fn uniform(dim: usize) -> Self {
        PoolingParams {
            weight_vec: vec![0.0; dim],
            weight_bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight_vec.len()
    }

    /// Gate value in (0, 1) for one frame.
    pub fn frame_weight(&self, frame: &[f64]) -> f64 {
        sigmoid(dot(&self.weight_vec, frame) + self.weight_bias)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingState {
    pub cum_weight: f64,
    pub cum_wx: Vec<f64>,
    pub cum_wx2: Vec<f64>,
}

impl PoolingState {
    pub fn new(dim: usize) -> Self {
        PoolingState {
            cum_weight: 0.0,
            cum_wx: vec![0.0; dim],
            cum_wx2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.cum_wx.len()
    }
}

pub fn pool_step(state: &PoolingState, frame: &[f64], p: &PoolingParams) -> Result<PoolingState> {
    let mut next = state.clone();
    pool_step_in_place(&mut next, frame, p)?;
    Ok(next)
}

/// In-place variant of [`pool_step`]; returns the frame weight.
pub fn pool_step_in_place(state: &mut PoolingState, frame: &[f64], p: &PoolingParams) -> Result<f64> {
    if frame.len() != state.dim() || p.dim() != state.dim() {
        return Err(Error::Dimension(format!(
            "frame dim {}, state dim {}, params dim {}",
            frame.len(),
            state.dim(),
            p.dim()
        )));
    }
    check_finite(frame, "frame")?;
    let w = p.frame_weight(frame);
    state.cum_weight += w;
    for ((a, b), x) in state.cum_wx.iter_mut().zip(state.cum_wx2.iter_mut()).zip(frame) {
        *a += w * x;
        *b += w * x * x;
    }
    Ok(w)
}

/// `[mean | std]` of the frames seen so far.
pub fn pool_finalize(state: &PoolingState) -> Result<Vec<f64>> {
    if !(state.cum_weight >= EPS) {
        return Err(Error::degenerate("cumulative frame weight", state.cum_weight));
    }
    let dim = state.dim();
    let mut out = Vec::with_capacity(2 * dim);
    let mean: Vec<f64> = state.cum_wx.iter().map(|s| s / state.cum_weight).collect();
    out.extend_from_slice(&mean);
    for (s2, m) in state.cum_wx2.iter().zip(&mean) {
        out.push((s2 / state.cum_weight - m * m).max(0.0).sqrt());
    }
    Ok(out)
}

/// Folds a whole frame sequence and finalizes.
pub fn pool_sequence(frames: &[Vec<f64>], p: &PoolingParams) -> Result<Vec<f64>> {
    let mut state = PoolingState::new(p.dim());
    for f in frames {
        pool_step_in_place(&mut state, f, p)?;
    }
    pool_finalize(&state)
}
