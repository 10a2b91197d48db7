//! Synthetic speakers and a desk-scale trainer.
//!
//! Speakers are random centroids in a latent space that is split into
//! contiguous subspaces. Each utterance adds Gaussian noise whose scale
//! differs per subspace; by default the scales are shuffled per utterance, so
//! which part of the latent is reliable changes from one utterance to the
//! next. A [`ToyModel`] maps latents to packed embeddings with an affine
//! projection and is trained with a batch speaker-softmax loss using the
//! analytic score gradients.
//!
//! The loss is a leave-one-out softmax over the speakers of a batch. It is a
//! simplified stand-in for the extended-set formulation of generalized
//! end-to-end training, not a reproduction of it.

use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::enroll::{mean_vector, EnrollAgg};
use crate::error::{Error, Result};
use crate::grad::{cosine_grad, kernel_grad, KernelGrad};
use crate::layout::LayoutConfig;
use crate::normalize::{LayerNormParams, NormMode};
use crate::score::{default_alpha, enroll_side, prepare, EnrollSide, Prepared, Role, ScoreMethod, ScoringConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub latent_dim: usize,
    /// Per-coordinate noise standard deviation of each subspace. The latent
    /// is split into this many contiguous, near-equal blocks.
    pub within_speaker_noise: Vec<f64>,
    /// Isotropic per-coordinate noise added on top.
    pub channel_noise: f64,
    /// Per-coordinate standard deviation of the speaker centroids.
    pub centroid_scale: f64,
    /// Reassign the subspace scales to blocks at random for every utterance.
    pub shuffle_subspaces: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_speakers: 64,
            utts_per_speaker: 10,
            latent_dim: 64,
            within_speaker_noise: vec![0.1, 1.0],
            channel_noise: 0.0,
            centroid_scale: 0.5,
            shuffle_subspaces: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.utts_per_speaker == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "speaker count, utterances per speaker and latent_dim must be positive".into(),
            ));
        }
        if self.within_speaker_noise.is_empty() || self.within_speaker_noise.len() > self.latent_dim {
            return Err(Error::Config(format!(
                "need between 1 and latent_dim ({}) subspace noise scales, got {}",
                self.latent_dim,
                self.within_speaker_noise.len()
            )));
        }
        let scales = self
            .within_speaker_noise
            .iter()
            .chain([&self.channel_noise, &self.centroid_scale]);
        if scales.clone().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "noise and centroid scales must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Contiguous blocks splitting `dim` coordinates into `parts` near-equal ranges.
pub fn subspace_ranges(dim: usize, parts: usize) -> Vec<Range<usize>> {
    (0..parts).map(|i| (i * dim / parts)..((i + 1) * dim / parts)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Index into [`Dataset::speakers`].
    pub speaker: usize,
    pub id: String,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub latent_dim: usize,
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Utterance indices grouped by speaker.
    pub fn by_speaker(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for (i, u) in self.utterances.iter().enumerate() {
            out[u.speaker].push(i);
        }
        out
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:04}")
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.latent_dim;
    let blocks = subspace_ranges(dim, spec.within_speaker_noise.len());
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut speakers = Vec::with_capacity(spec.num_speakers);
    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utts_per_speaker);
    let mut scales = spec.within_speaker_noise.clone();
    for s in 0..spec.num_speakers {
        let name = speaker_id(s);
        let centroid: Vec<f64> = (0..dim)
            .map(|_| spec.centroid_scale * std_normal.sample(&mut rng))
            .collect();
        for u in 0..spec.utts_per_speaker {
            if spec.shuffle_subspaces {
                scales.shuffle(&mut rng);
            }
            let mut latent = centroid.clone();
            for (block, scale) in blocks.iter().zip(&scales) {
                for x in &mut latent[block.clone()] {
                    *x += scale * std_normal.sample(&mut rng);
                }
            }
            for x in &mut latent {
                *x += spec.channel_noise * std_normal.sample(&mut rng);
            }
            utterances.push(Utterance {
                speaker: s,
                id: format!("{name}-u{u:02}"),
                latent,
            });
        }
        speakers.push(name);
    }
    Ok(Dataset {
        latent_dim: dim,
        speakers,
        utterances,
    })
}

/// Batch loss: mean over utterances of `-log softmax(scale * scores)[label]`.
///
/// `scores[i][j]` is utterance `i` scored against batch speaker `j`.
pub fn ge2e_xs_loss(scores: &[Vec<f64>], labels: &[usize], scale: f64) -> Result<f64> {
    Ok(loss_and_grad(scores, labels, scale)?.0)
}

/// Loss, its gradient w.r.t. every score, and its derivative w.r.t. the scale.
fn loss_and_grad(scores: &[Vec<f64>], labels: &[usize], scale: f64) -> Result<(f64, Vec<Vec<f64>>, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let speakers = scores[0].len();
    if speakers < 2 {
        return Err(Error::Invalid("the batch loss needs at least two speakers".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Invalid(format!("loss scale must be positive, got {scale}")));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut d_scores = Vec::with_capacity(scores.len());
    let mut d_scale = 0.0;
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != speakers || label >= speakers {
            return Err(Error::Invalid(format!(
                "score row of length {} with label {label}, expected {speakers} speakers",
                row.len()
            )));
        }
        let logits: Vec<f64> = row.iter().map(|s| scale * s).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - logits[label]) / n;
        let mut d_row = Vec::with_capacity(speakers);
        for (j, (l, s)) in logits.iter().zip(row).enumerate() {
            let p = (l - log_z).exp();
            let g = (p - if j == label { 1.0 } else { 0.0 }) / n;
            d_scale += g * s;
            d_row.push(g * scale);
        }
        d_scores.push(d_row);
    }
    Ok((loss, d_scores, d_scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub speakers_per_batch: usize,
    pub utts_per_batch_speaker: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            speakers_per_batch: 16,
            utts_per_batch_speaker: 8,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers_per_batch < 2 {
            return Err(Error::Config("speakers_per_batch must be at least 2".into()));
        }
        if self.utts_per_batch_speaker < 2 {
            return Err(Error::Config(
                "utts_per_batch_speaker must be at least 2 for leave-one-out enrollment".into(),
            ));
        }
        Ok(())
    }
}

/// Initial values for a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    /// Standard deviation of projection entries, times `1/sqrt(latent_dim)`.
    pub weight_scale: f64,
    /// Extra factor on the rows producing queries and keys.
    pub key_weight_scale: f64,
    /// Norm of the random per-pair code placed in the query/key bias.
    pub key_bias_scale: f64,
    /// Initial temperature; `None` uses `1/sqrt(d_k)`.
    pub alpha: Option<f64>,
    /// Initial loss scale.
    pub loss_scale: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            weight_scale: 1.0,
            key_weight_scale: 0.1,
            key_bias_scale: 1.0,
            alpha: Some(30.0),
            loss_scale: 10.0,
        }
    }
}

impl InitSpec {
    /// Plain random projection without bias codes, used for cosine models.
    pub fn plain() -> Self {
        InitSpec {
            key_weight_scale: 1.0,
            key_bias_scale: 0.0,
            ..InitSpec::default()
        }
    }
}

/// Affine map from latents to packed embeddings plus the trainable scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub layout: LayoutConfig,
    pub latent_dim: usize,
    /// Row-major `total_dim x latent_dim`.
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_alpha: f64,
    /// Log of the loss scale.
    pub log_scale: f64,
    /// Kept at its initial value; the trainer does not update it.
    pub layer_norm: Option<LayerNormParams>,
}

impl ToyModel {
    pub fn init(layout: LayoutConfig, latent_dim: usize, init: &InitSpec, seed: u64) -> Result<Self> {
        layout.validate()?;
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let alpha = init.alpha.unwrap_or_else(|| default_alpha(layout.key_dim));
        if !(alpha > 0.0 && alpha.is_finite() && init.loss_scale > 0.0 && init.loss_scale.is_finite()) {
            return Err(Error::Config("initial alpha and loss scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let total = layout.total_dim();
        let mut is_key_row = vec![false; total];
        for pair in 0..layout.num_pairs {
            for r in layout.query_range(pair).chain(layout.key_range(pair)) {
                is_key_row[r] = true;
            }
        }
        let base = init.weight_scale / (latent_dim as f64).sqrt();
        let mut projection = Vec::with_capacity(total * latent_dim);
        for &key in &is_key_row {
            let s = if key { base * init.key_weight_scale } else { base };
            projection.extend((0..latent_dim).map(|_| s * std_normal.sample(&mut rng)));
        }
        let mut bias = vec![0.0; total];
        if init.key_bias_scale > 0.0 {
            let mut ranges: Vec<Range<usize>> = (0..layout.num_pairs).map(|p| layout.query_range(p)).collect();
            if !layout.tied {
                ranges.extend((0..layout.num_pairs).map(|p| layout.key_range(p)));
            }
            for r in ranges {
                let code: Vec<f64> = r.clone().map(|_| std_normal.sample(&mut rng)).collect();
                let n = code.iter().map(|c| c * c).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for (b, c) in bias[r].iter_mut().zip(code) {
                    *b = init.key_bias_scale * c / n;
                }
            }
            // independent layouts share the code between a pair's query and key
            if !layout.tied {
                for pair in 0..layout.num_pairs {
                    let q = bias[layout.query_range(pair)].to_vec();
                    bias[layout.key_range(pair)].copy_from_slice(&q);
                }
            }
        }
        Ok(ToyModel {
            layout,
            latent_dim,
            projection,
            bias,
            log_alpha: alpha.ln(),
            log_scale: init.loss_scale.ln(),
            layer_norm: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn loss_scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn num_params(&self) -> usize {
        self.projection.len() + self.bias.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let total = self.layout.total_dim();
        if self.projection.len() != total * self.latent_dim || self.bias.len() != total {
            return Err(Error::Dimension(format!(
                "model parameters do not match {total} x {} projection",
                self.latent_dim
            )));
        }
        if let Some(ln) = &self.layer_norm {
            if ln.gain.len() != total || ln.bias.len() != total {
                return Err(Error::Dimension("layer norm parameters do not match total_dim".into()));
            }
        }
        let scalars = [self.log_alpha, self.log_scale];
        if self
            .projection
            .iter()
            .chain(&self.bias)
            .chain(&scalars)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite {
                context: "model parameters".into(),
                index: 0,
            });
        }
        Ok(())
    }

    /// Packed embedding of one latent vector.
    pub fn embed(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "latent has {} coordinates, model expects {}",
                latent.len(),
                self.latent_dim
            )));
        }
        Ok(self
            .projection
            .chunks_exact(self.latent_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(latent).map(|(w, x)| w * x).sum::<f64>())
            .collect())
    }

    /// `base` with this model's layout, temperature and layer norm parameters.
    pub fn scoring_config(&self, base: &ScoringConfig) -> ScoringConfig {
        ScoringConfig {
            layout: self.layout,
            alpha: self.alpha(),
            layer_norm: self.layer_norm.clone(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fraction of steps spent on the linear warm-up.
    pub warmup_frac: f64,
    pub batch: BatchSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.02,
            warmup_frac: 0.05,
            batch: BatchSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warm-up, then inverse square root decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((self.warmup_frac * self.steps as f64).round() as usize).max(1);
        let t = (step + 1) as f64;
        if step < warm {
            self.lr * t / warm as f64
        } else {
            self.lr * (warm as f64 / t).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Parameter gradient of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_alpha: f64,
    pub log_scale: f64,
}

impl ModelGrad {
    fn is_finite(&self) -> bool {
        self.projection
            .iter()
            .chain(&self.bias)
            .chain(&[self.log_alpha, self.log_scale])
            .all(|x| x.is_finite())
    }
}

/// Enrollment material shared by the trials of one batch.
struct EnrollSet {
    members: Vec<usize>,
    side: EnrollSide,
    /// Prepared mean vector under mean aggregation.
    mean: Option<Prepared>,
}

/// Loss of one batch and, if asked, its gradient.
///
/// `batch` lists utterance indices, `labels` the batch-local speaker of each.
/// Every utterance is scored against every batch speaker; its own speaker
/// is enrolled from the other utterances of that speaker.
pub fn batch_loss(
    model: &ToyModel,
    cfg: &ScoringConfig,
    latents: &[&[f64]],
    labels: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<ModelGrad>)> {
    let num_speakers = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); num_speakers];
    for (u, &l) in labels.iter().enumerate() {
        groups[l].push(u);
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Invalid(
            "every batch speaker needs at least two utterances".into(),
        ));
    }
    let cfg = model.scoring_config(cfg);
    let layout = cfg.layout;
    let embedded = latents.iter().map(|z| model.embed(z)).collect::<Result<Vec<_>>>()?;
    let num_utts = embedded.len();

    // Sets 0..S enroll whole speakers; set S + u enrolls u's speaker without u.
    let mut set_members: Vec<Vec<usize>> = groups.clone();
    for (u, &l) in labels.iter().enumerate() {
        set_members.push(groups[l].iter().copied().filter(|&v| v != u).collect());
    }
    let set_of = |u: usize, j: usize| if j == labels[u] { num_speakers + u } else { j };

    let mut scores = vec![vec![0.0; num_speakers]; num_utts];
    let mut d_packed = vec![vec![0.0; layout.total_dim()]; num_utts];
    let mut d_log_alpha = 0.0;

    match cfg.method {
        ScoreMethod::Cosine => {
            let mut parts = Vec::with_capacity(num_utts);
            for (u, row) in scores.iter_mut().enumerate() {
                let mut per_speaker = Vec::with_capacity(num_speakers);
                for (j, s) in row.iter_mut().enumerate() {
                    let members = &set_members[set_of(u, j)];
                    let refs: Vec<&[f64]> = members.iter().map(|&v| embedded[v].as_slice()).collect();
                    let (score, dt, de) = cosine_grad(&embedded[u], &refs)?;
                    *s = score;
                    per_speaker.push((dt, de));
                }
                parts.push(per_speaker);
            }
            let (loss, d_scores, d_scale) = loss_and_grad(&scores, labels, model.loss_scale())?;
            if !with_grad {
                return Ok((loss, None));
            }
            for (u, per_speaker) in parts.into_iter().enumerate() {
                for (j, (dt, de)) in per_speaker.into_iter().enumerate() {
                    let g = d_scores[u][j];
                    axpy(&mut d_packed[u], g, &dt);
                    for (&v, d) in set_members[set_of(u, j)].iter().zip(&de) {
                        axpy(&mut d_packed[v], g, d);
                    }
                }
            }
            let grad = project_back(model, latents, &d_packed, d_log_alpha, d_scale * model.loss_scale());
            Ok((loss, Some(grad)))
        }
        ScoreMethod::Attentive => {
            let tests = embedded
                .iter()
                .map(|x| prepare(x, &cfg, Role::Test))
                .collect::<Result<Vec<_>>>()?;
            let test_sides: Vec<_> = tests.iter().map(|p| p.test_side(&layout)).collect();
            let mean_agg = cfg.enroll_agg == EnrollAgg::Mean;
            let keys = if mean_agg {
                Vec::new()
            } else {
                embedded
                    .iter()
                    .map(|x| prepare(x, &cfg, Role::Enroll))
                    .collect::<Result<Vec<_>>>()?
            };
            let sets = set_members
                .into_iter()
                .map(|members| {
                    if mean_agg {
                        let vecs: Vec<&[f64]> = members.iter().map(|&v| embedded[v].as_slice()).collect();
                        let mean = prepare(&mean_vector(&vecs), &cfg, Role::Enroll)?;
                        let side = enroll_side(&[&mean], &layout);
                        Ok(EnrollSet {
                            members,
                            side,
                            mean: Some(mean),
                        })
                    } else {
                        let refs: Vec<&Prepared> = members.iter().map(|&v| &keys[v]).collect();
                        let side = enroll_side(&refs, &layout);
                        Ok(EnrollSet {
                            members,
                            side,
                            mean: None,
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;

            let global = cfg.norm == NormMode::KeyAndGlobalL2;
            let mut kernels: Vec<Vec<KernelGrad>> = Vec::with_capacity(num_utts);
            for (u, row) in scores.iter_mut().enumerate() {
                let mut per_speaker = Vec::with_capacity(num_speakers);
                for (j, s) in row.iter_mut().enumerate() {
                    let kg = kernel_grad(&test_sides[u], &sets[set_of(u, j)].side, cfg.alpha, global)?;
                    *s = kg.score;
                    per_speaker.push(kg);
                }
                kernels.push(per_speaker);
            }
            let (loss, d_scores, d_scale) = loss_and_grad(&scores, labels, model.loss_scale())?;
            if !with_grad {
                return Ok((loss, None));
            }

            let (kstride, vstride) = (layout.num_pairs * layout.key_dim, layout.num_pairs * layout.value_dim);
            let mut d_test_qk = vec![vec![0.0; kstride]; num_utts];
            let mut d_test_v = vec![vec![0.0; vstride]; num_utts];
            let mut d_set_k: Vec<Vec<f64>> = sets.iter().map(|s| vec![0.0; s.side.len() * layout.key_dim]).collect();
            let mut d_set_v: Vec<Vec<f64>> = sets
                .iter()
                .map(|s| vec![0.0; s.side.len() * layout.value_dim])
                .collect();
            for (u, per_speaker) in kernels.iter().enumerate() {
                for (j, kg) in per_speaker.iter().enumerate() {
                    let g = d_scores[u][j];
                    let set = set_of(u, j);
                    axpy(&mut d_test_qk[u], g, &kg.d_queries);
                    axpy(&mut d_test_v[u], g, &kg.d_test_values);
                    axpy(&mut d_set_k[set], g, &kg.d_keys);
                    axpy(&mut d_set_v[set], g, &kg.d_enroll_values);
                    d_log_alpha += g * kg.d_alpha;
                }
            }
            d_log_alpha *= cfg.alpha;

            let mut d_enroll_k = vec![vec![0.0; kstride]; if mean_agg { 0 } else { num_utts }];
            let mut d_enroll_v = vec![vec![0.0; vstride]; if mean_agg { 0 } else { num_utts }];
            for (s, set) in sets.iter().enumerate() {
                match &set.mean {
                    Some(mean) => {
                        let d = mean.backward(&d_set_k[s], &d_set_v[s], &cfg, Role::Enroll);
                        let share = 1.0 / set.members.len() as f64;
                        for &v in &set.members {
                            axpy(&mut d_packed[v], share, &d);
                        }
                    }
                    None => {
                        for (i, &v) in set.members.iter().enumerate() {
                            axpy(&mut d_enroll_k[v], 1.0, &d_set_k[s][i * kstride..(i + 1) * kstride]);
                            axpy(&mut d_enroll_v[v], 1.0, &d_set_v[s][i * vstride..(i + 1) * vstride]);
                        }
                    }
                }
            }
            for u in 0..num_utts {
                let d = tests[u].backward(&d_test_qk[u], &d_test_v[u], &cfg, Role::Test);
                axpy(&mut d_packed[u], 1.0, &d);
                if !mean_agg {
                    let d = keys[u].backward(&d_enroll_k[u], &d_enroll_v[u], &cfg, Role::Enroll);
                    axpy(&mut d_packed[u], 1.0, &d);
                }
            }
            let grad = project_back(model, latents, &d_packed, d_log_alpha, d_scale * model.loss_scale());
            Ok((loss, Some(grad)))
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Chains packed-embedding gradients through the affine projection.
fn project_back(
    model: &ToyModel,
    latents: &[&[f64]],
    d_packed: &[Vec<f64>],
    d_log_alpha: f64,
    d_log_scale: f64,
) -> ModelGrad {
    let dim = model.latent_dim;
    let mut projection = vec![0.0; model.projection.len()];
    let mut bias = vec![0.0; model.bias.len()];
    for (z, d) in latents.iter().zip(d_packed) {
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            bias[r] += dr;
            axpy(&mut projection[r * dim..(r + 1) * dim], dr, z);
        }
    }
    ModelGrad {
        projection,
        bias,
        log_alpha: d_log_alpha,
        log_scale: d_log_scale,
    }
}

/// Draws a batch: distinct speakers, and distinct utterances within each.
fn sample_batch(
    groups: &[Vec<usize>],
    eligible: &[usize],
    batch: &BatchSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut utts = Vec::with_capacity(batch.speakers_per_batch * batch.utts_per_batch_speaker);
    let mut labels = Vec::with_capacity(utts.capacity());
    let chosen = index::sample(rng, eligible.len(), batch.speakers_per_batch);
    for (label, k) in chosen.into_iter().enumerate() {
        let group = &groups[eligible[k]];
        for i in index::sample(rng, group.len(), batch.utts_per_batch_speaker) {
            utts.push(group[i]);
            labels.push(label);
        }
    }
    (utts, labels)
}

/// Plain gradient descent on the batch loss.
pub fn train(model: ToyModel, data: &Dataset, cfg: &ScoringConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    model.validate()?;
    cfg.validate()?;
    if data.latent_dim != model.latent_dim {
        return Err(Error::Dimension(format!(
            "dataset latent_dim {} but model expects {}",
            data.latent_dim, model.latent_dim
        )));
    }
    let groups = data.by_speaker();
    let eligible: Vec<usize> = (0..groups.len())
        .filter(|&s| groups[s].len() >= tc.batch.utts_per_batch_speaker)
        .collect();
    if eligible.len() < tc.batch.speakers_per_batch {
        return Err(Error::Config(format!(
            "{} speakers have at least {} utterances, batch needs {}",
            eligible.len(),
            tc.batch.utts_per_batch_speaker,
            tc.batch.speakers_per_batch
        )));
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let (utts, labels) = sample_batch(&groups, &eligible, &tc.batch, &mut rng);
        let latents: Vec<&[f64]> = utts.iter().map(|&u| data.utterances[u].latent.as_slice()).collect();
        let (loss, grad) = batch_loss(&model, cfg, &latents, &labels, true).map_err(|e| match e {
            Error::Degenerate { .. } | Error::NonFinite { .. } => Error::Diverged {
                step,
                detail: e.to_string(),
            },
            other => other,
        })?;
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}, gradient finite: {}", grad.is_finite()),
            });
        }
        losses.push(loss);
        let lr = tc.lr_at(step);
        if lr == 0.0 {
            continue;
        }
        axpy(&mut model.projection, -lr, &grad.projection);
        axpy(&mut model.bias, -lr, &grad.bias);
        if cfg.method == ScoreMethod::Attentive {
            model.log_alpha -= lr * grad.log_alpha;
        }
        model.log_scale -= lr * grad.log_scale;
    }
    Ok(TrainOutcome { model, losses })
}

/// Random latent-space noise, used for noisy test conditions.
pub fn perturb(latent: &[f64], scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    latent.iter().map(|x| x + scale * std_normal.sample(rng)).collect()
}
