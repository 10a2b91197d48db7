//! On-disk formats: packed embedding files, trial and score lists, model
//! checkpoints and run configuration.
//!
//! Binary formats are little-endian and store 32-bit floats, which are
//! promoted to `f64` on load. Reading a file and writing it back reproduces
//! it byte for byte.
//!
//! ```text
//! embedding file   "ATSF" u16 version  u16 flags  u32 M  u32 d_k  u32 d_v  u64 count
//!                  count x ( u16 id_len  id bytes  total_dim x f32 )
//! checkpoint       "ATSM" u16 version  u16 flags  u32 M  u32 d_k  u32 d_v  u32 latent_dim
//!                  f32 x ( projection  bias  log_alpha  log_scale  [ln gain  ln bias] )
//! ```
//!
//! Flag bit 0 marks a tied layout; in checkpoints bit 1 marks stored layer
//! normalization parameters.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::EvalSpec;
use crate::enroll::{build_enrollment, EnrollAgg, EnrollmentModel};
use crate::error::{Error, Result};
use crate::eval::{ScoreSet, Trial};
use crate::layout::{LayoutConfig, PackedEmbedding};
use crate::normalize::{LayerNormParams, NormMode};
use crate::score::{default_alpha, ScoreMethod, ScoringConfig};
use crate::train::{InitSpec, SynthSpec, ToyModel, TrainConfig};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ATSF";
pub const MODEL_MAGIC: &[u8; 4] = b"ATSM";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_TIED: u16 = 1;
const FLAG_LAYER_NORM: u16 = 2;

/// Separates the speaker from the utterance part of an enrollment id.
pub const ENROLL_ID_SEP: char = ':';

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub layout: LayoutConfig,
    pub embeddings: Vec<PackedEmbedding>,
}

impl EmbeddingFile {
    pub fn new(layout: LayoutConfig, embeddings: Vec<PackedEmbedding>) -> Result<Self> {
        let file = EmbeddingFile { layout, embeddings };
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let mut seen = HashSet::new();
        for e in &self.embeddings {
            if e.utterance_id.is_empty() || e.utterance_id.len() > u16::MAX as usize {
                return Err(Error::Format(format!(
                    "utterance id must be 1..={} bytes, got {}",
                    u16::MAX,
                    e.utterance_id.len()
                )));
            }
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Format(format!("duplicate utterance id '{}'", e.utterance_id)));
            }
            self.layout
                .check_vec(&e.vec)
                .map_err(|err| Error::Format(format!("record '{}': {err}", e.utterance_id)))?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PackedEmbedding> {
        self.embeddings.iter().find(|e| e.utterance_id == id)
    }

    pub fn index(&self) -> HashMap<&str, &PackedEmbedding> {
        self.embeddings.iter().map(|e| (e.utterance_id.as_str(), e)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let l = &self.layout;
        let mut out = Vec::with_capacity(28 + self.embeddings.len() * (8 + 4 * l.total_dim()));
        out.extend_from_slice(EMBEDDING_MAGIC);
        put_u16(&mut out, FORMAT_VERSION);
        put_u16(&mut out, if l.tied { FLAG_TIED } else { 0 });
        put_u32(&mut out, dim_u32(l.num_pairs)?);
        put_u32(&mut out, dim_u32(l.key_dim)?);
        put_u32(&mut out, dim_u32(l.value_dim)?);
        out.extend_from_slice(&(self.embeddings.len() as u64).to_le_bytes());
        for e in &self.embeddings {
            put_u16(&mut out, e.utterance_id.len() as u16);
            out.extend_from_slice(e.utterance_id.as_bytes());
            put_f32s(&mut out, &e.vec, &e.utterance_id)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(EMBEDDING_MAGIC)?;
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let flags = r.u16()?;
        if flags & !FLAG_TIED != 0 {
            return Err(Error::Format(format!("unknown embedding file flags {flags:#06x}")));
        }
        let layout = LayoutConfig::new(
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            flags & FLAG_TIED != 0,
        )
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let count = r.u64()?;
        let dim = layout.total_dim();
        let record_min = 2 + 4 * dim as u64;
        if count.saturating_mul(record_min) > r.remaining() as u64 {
            return Err(Error::Format(format!(
                "header declares {count} records but only {} bytes follow",
                r.remaining()
            )));
        }
        let mut embeddings = Vec::with_capacity(count as usize);
        for i in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format(format!("record {i}: id is not valid UTF-8")))?
                .to_string();
            let vec = r.f32s(dim).map_err(|e| match e {
                Error::NonFinite { index, .. } => Error::NonFinite {
                    context: format!("record '{id}'"),
                    index,
                },
                other => other,
            })?;
            embeddings.push(PackedEmbedding::new(id, vec));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after last record",
                r.remaining()
            )));
        }
        Self::new(layout, embeddings)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_bytes(path)?).map_err(|e| with_path(e, path))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes()?)
    }

    /// Groups records into enrollment models keyed by speaker. A record id
    /// `spk:utt` belongs to speaker `spk`; an id without the separator is a
    /// one-utterance speaker of the same name. Speakers keep file order.
    pub fn enrollments(&self, agg: EnrollAgg) -> Result<Vec<EnrollmentModel>> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, Vec<PackedEmbedding>> = HashMap::new();
        for e in &self.embeddings {
            let spk = enroll_speaker(&e.utterance_id);
            groups
                .entry(spk)
                .or_insert_with(|| {
                    order.push(spk);
                    Vec::new()
                })
                .push(e.clone());
        }
        order
            .into_iter()
            .map(|spk| build_enrollment(&groups[spk], &self.layout, agg, spk))
            .collect()
    }
}

/// Speaker part of an enrollment record id.
pub fn enroll_speaker(id: &str) -> &str {
    id.split_once(ENROLL_ID_SEP).map_or(id, |(spk, _)| spk)
}

/// Parses a trial list: one `enroll<TAB>test<TAB>tgt|non` line per trial.
/// Lines starting with `#` and blank lines are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [enroll, test, label] = fields[..] else {
            return Err(Error::Format(format!(
                "trial line {}: expected 3 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        };
        let label = label
            .parse()
            .map_err(|e| Error::Format(format!("trial line {}: {e}", n + 1)))?;
        trials.push(Trial::new(enroll, test, label).map_err(|e| Error::Format(format!("trial line {}: {e}", n + 1)))?);
    }
    Ok(trials)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            t.enroll_speaker_id, t.test_utterance_id, t.label
        ));
    }
    out
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    parse_trials(&read_text(path)?).map_err(|e| with_path(e, path))
}

/// Decimal rendering with 15 significant digits.
pub fn format_score(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.14}");
    }
    let exp = x.abs().log10().floor() as i32;
    if exp < -30 {
        return format!("{x:.14e}");
    }
    let decimals = (14 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// One `enroll<TAB>test<TAB>score` line per trial, in trial order.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> Result<String> {
    if trials.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} trials but {} scores",
            trials.len(),
            scores.len()
        )));
    }
    let mut out = String::new();
    for (t, s) in trials.iter().zip(scores) {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            t.enroll_speaker_id,
            t.test_utterance_id,
            format_score(*s)
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut lines = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [enroll, test, score] = fields[..] else {
            return Err(Error::Format(format!(
                "score line {}: expected 3 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        };
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Format(format!("score line {}: bad score '{score}'", n + 1)))?;
        if !score.is_finite() {
            return Err(Error::NonFinite {
                context: format!("score line {}", n + 1),
                index: 2,
            });
        }
        lines.push(ScoreLine {
            enroll: enroll.to_string(),
            test: test.to_string(),
            score,
        });
    }
    Ok(lines)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    parse_scores(&read_text(path)?).map_err(|e| with_path(e, path))
}

/// Pairs every trial with its score. Every trial must be scored exactly
/// once; extra score lines are ignored.
pub fn join_scores(trials: &[Trial], scores: &[ScoreLine]) -> Result<ScoreSet> {
    let mut by_key: HashMap<(&str, &str), f64> = HashMap::new();
    for s in scores {
        if by_key.insert((&s.enroll, &s.test), s.score).is_some() {
            return Err(Error::Format(format!("trial {} / {} scored twice", s.enroll, s.test)));
        }
    }
    let entries = trials
        .iter()
        .map(|t| match by_key.get(&t.key()) {
            Some(s) => Ok((t.clone(), *s)),
            None => Err(Error::UnknownId(format!(
                "no score for trial {} / {}",
                t.enroll_speaker_id, t.test_utterance_id
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(entries)
}

/// Scoring section of a [`RunConfig`], named after the command-line flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub method: ScoreMethod,
    pub norm: NormMode,
    pub pairs: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub tied: bool,
    /// `None` uses `1/sqrt(key_dim)`.
    pub alpha: Option<f64>,
    pub enroll_agg: EnrollAgg,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection {
            method: ScoreMethod::Attentive,
            norm: NormMode::KeyAndGlobalL2,
            pairs: 32,
            key_dim: 4,
            value_dim: 8,
            tied: true,
            alpha: None,
            enroll_agg: EnrollAgg::Concat,
        }
    }
}

impl ScoringSection {
    pub fn layout(&self) -> Result<LayoutConfig> {
        LayoutConfig::new(self.pairs, self.key_dim, self.value_dim, self.tied)
    }

    pub fn to_config(&self) -> Result<ScoringConfig> {
        let cfg = ScoringConfig {
            method: self.method,
            norm: self.norm,
            alpha: self.alpha.unwrap_or_else(|| default_alpha(self.key_dim)),
            layout: self.layout()?,
            enroll_agg: self.enroll_agg,
            layer_norm: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Complete description of a run, stored as TOML. Unknown keys are
/// rejected at every level; missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scoring: ScoringSection,
    pub synth: SynthSpec,
    pub eval: EvalSpec,
    pub train: TrainConfig,
    pub init: InitSpec,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&read_text(path)?).map_err(|e| with_path(e, path))
    }

    pub fn validate(&self) -> Result<()> {
        self.scoring.to_config()?;
        self.synth.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

impl ToyModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let l = &self.layout;
        let mut flags = if l.tied { FLAG_TIED } else { 0 };
        if self.layer_norm.is_some() {
            flags |= FLAG_LAYER_NORM;
        }
        let mut out = Vec::with_capacity(28 + 4 * (self.num_params() + 2));
        out.extend_from_slice(MODEL_MAGIC);
        put_u16(&mut out, FORMAT_VERSION);
        put_u16(&mut out, flags);
        put_u32(&mut out, dim_u32(l.num_pairs)?);
        put_u32(&mut out, dim_u32(l.key_dim)?);
        put_u32(&mut out, dim_u32(l.value_dim)?);
        put_u32(&mut out, dim_u32(self.latent_dim)?);
        put_f32s(&mut out, &self.projection, "projection")?;
        put_f32s(&mut out, &self.bias, "bias")?;
        put_f32s(&mut out, &[self.log_alpha, self.log_scale], "scalars")?;
        if let Some(ln) = &self.layer_norm {
            put_f32s(&mut out, &ln.gain, "layer norm gain")?;
            put_f32s(&mut out, &ln.bias, "layer norm bias")?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let flags = r.u16()?;
        if flags & !(FLAG_TIED | FLAG_LAYER_NORM) != 0 {
            return Err(Error::Format(format!("unknown checkpoint flags {flags:#06x}")));
        }
        let layout = LayoutConfig::new(
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            flags & FLAG_TIED != 0,
        )
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let latent_dim = r.u32()? as usize;
        let dim = layout.total_dim();
        let projection = r.f32s(dim * latent_dim)?;
        let bias = r.f32s(dim)?;
        let scalars = r.f32s(2)?;
        let layer_norm = if flags & FLAG_LAYER_NORM != 0 {
            Some(LayerNormParams {
                gain: r.f32s(dim)?,
                bias: r.f32s(dim)?,
            })
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        let model = ToyModel {
            layout,
            latent_dim,
            projection,
            bias,
            log_alpha: scalars[0],
            log_scale: scalars[1],
            layer_norm,
        };
        model.validate()?;
        Ok(model)
    }

    /// Writes the checkpoint to `path` and the run configuration next to it
    /// with a `.toml` extension appended.
    pub fn save(&self, path: impl AsRef<Path>, config: &RunConfig) -> Result<()> {
        let path = path.as_ref();
        write_bytes(path, &self.to_bytes()?)?;
        write_bytes(&sidecar_path(path), config.to_toml()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_bytes(path)?).map_err(|e| with_path(e, path))
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".toml");
    PathBuf::from(name)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn dim_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("dimension {x} does not fit in u32")))
}

fn put_u16(out: &mut Vec<u8>, x: u16) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f64], context: &str) -> Result<()> {
    for (i, &x) in xs.iter().enumerate() {
        let y = x as f32;
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{context} (as f32)"),
                index: i,
            });
        }
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let x = f32::from_le_bytes(c.try_into().unwrap());
                if x.is_finite() {
                    Ok(x as f64)
                } else {
                    Err(Error::NonFinite {
                        context: format!("float block at offset {start}"),
                        index: i,
                    })
                }
            })
            .collect()
    }
}
