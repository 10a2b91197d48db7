//! Speaker enrollment models built from one or more utterance embeddings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutConfig, PackedEmbedding};

/// How several enrollment utterances are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnrollAgg {
    /// Keep every utterance; a speaker with `E` utterances contributes
    /// `M * E` key/value pairs.
    #[default]
    Concat,
    /// Average the raw packed vectors into one before any normalization.
    Mean,
}

impl EnrollAgg {
    pub fn name(&self) -> &'static str {
        match self {
            EnrollAgg::Concat => "concat",
            EnrollAgg::Mean => "mean",
        }
    }
}

impl fmt::Display for EnrollAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnrollAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "joint" => Ok(EnrollAgg::Concat),
            "mean" => Ok(EnrollAgg::Mean),
            _ => Err(Error::Invalid(format!("unknown enrollment aggregation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnrollMaterial {
    Concat(Vec<PackedEmbedding>),
    Mean(PackedEmbedding),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentModel {
    pub speaker_id: String,
    pub layout: LayoutConfig,
    pub material: EnrollMaterial,
    /// Number of source utterances `E`.
    pub num_utterances: usize,
}

impl EnrollmentModel {
    pub fn mode(&self) -> EnrollAgg {
        match self.material {
            EnrollMaterial::Concat(_) => EnrollAgg::Concat,
            EnrollMaterial::Mean(_) => EnrollAgg::Mean,
        }
    }

    /// The stored packed vectors: `E` of them under concat, one under mean.
    pub fn vectors(&self) -> Vec<&[f64]> {
        match &self.material {
            EnrollMaterial::Concat(embs) => embs.iter().map(|e| e.vec.as_slice()).collect(),
            EnrollMaterial::Mean(mean) => vec![mean.vec.as_slice()],
        }
    }

    /// Effective number of enrollment keys `N` seen by the scorer.
    pub fn num_keys(&self) -> usize {
        self.vectors().len() * self.layout.num_pairs
    }
}

pub fn build_enrollment(
    embs: &[PackedEmbedding],
    layout: &LayoutConfig,
    mode: EnrollAgg,
    speaker_id: impl Into<String>,
) -> Result<EnrollmentModel> {
    let speaker_id = speaker_id.into();
    if embs.is_empty() {
        return Err(Error::Invalid(format!(
            "speaker '{speaker_id}' has no enrollment utterances"
        )));
    }
    layout.validate()?;
    for emb in embs {
        layout.check_vec(&emb.vec).map_err(|e| match e {
            Error::Layout(msg) => Error::Layout(format!("{}: {msg}", emb.utterance_id)),
            other => other,
        })?;
    }
    let material = match mode {
        EnrollAgg::Concat => EnrollMaterial::Concat(embs.to_vec()),
        EnrollAgg::Mean => {
            let vecs: Vec<&[f64]> = embs.iter().map(|e| e.vec.as_slice()).collect();
            EnrollMaterial::Mean(PackedEmbedding::new(speaker_id.clone(), mean_vector(&vecs)))
        }
    };
    Ok(EnrollmentModel {
        speaker_id,
        layout: *layout,
        material,
        num_utterances: embs.len(),
    })
}

/// Component-wise arithmetic mean of equal-length vectors.
pub(crate) fn mean_vector(vecs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vecs[0].len()];
    for v in vecs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vecs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Number of floats held by the model.
pub fn enrollment_footprint(model: &EnrollmentModel) -> usize {
    model.vectors().len() * model.layout.total_dim()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: Vec<f64>) -> PackedEmbedding {
        PackedEmbedding::new(id, v)
    }

    #[test]
    fn footprint_full_size_layout() {
        let layout = LayoutConfig::tied(8, 32, 256).unwrap();
        let embs: Vec<_> = (0..6)
            .map(|i| emb(&format!("u{i}"), vec![i as f64 + 0.5; 2304]))
            .collect();
        let concat = build_enrollment(&embs, &layout, EnrollAgg::Concat, "s").unwrap();
        let mean = build_enrollment(&embs, &layout, EnrollAgg::Mean, "s").unwrap();
        assert_eq!(enrollment_footprint(&concat), 13824);
        assert_eq!(enrollment_footprint(&concat), 6 * 8 * (32 + 256));
        assert_eq!(enrollment_footprint(&mean), 2304);
        assert_eq!(concat.num_keys(), 48);
        assert_eq!(mean.num_keys(), 8);
        assert_eq!(concat.num_utterances, 6);
    }

    #[test]
    fn single_utterance_footprint_is_total_dim() {
        let layout = LayoutConfig::independent(3, 2, 5).unwrap();
        let m = build_enrollment(&[emb("a", vec![1.0; 27])], &layout, EnrollAgg::Concat, "s").unwrap();
        assert_eq!(enrollment_footprint(&m), layout.total_dim());
    }

    #[test]
    fn mean_of_identical_is_common_vector() {
        let layout = LayoutConfig::tied(1, 1, 2).unwrap();
        let v = vec![0.1, -0.7, 0.3];
        let embs = vec![emb("a", v.clone()), emb("b", v.clone()), emb("c", v.clone())];
        let m = build_enrollment(&embs, &layout, EnrollAgg::Mean, "s").unwrap();
        for (a, b) in m.vectors()[0].iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_is_order_invariant() {
        let layout = LayoutConfig::tied(1, 2, 2).unwrap();
        let embs = vec![
            emb("a", vec![0.1, 2.0, -3.0, 4.5]),
            emb("b", vec![1e-3, -2.0, 7.0, 0.25]),
            emb("c", vec![9.0, 0.3, 0.3, -1.0]),
        ];
        let fwd = build_enrollment(&embs, &layout, EnrollAgg::Mean, "s").unwrap();
        let rev: Vec<_> = embs.iter().rev().cloned().collect();
        let bwd = build_enrollment(&rev, &layout, EnrollAgg::Mean, "s").unwrap();
        for (a, b) in fwd.vectors()[0].iter().zip(bwd.vectors()[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let layout = LayoutConfig::tied(1, 1, 1).unwrap();
        assert!(matches!(
            build_enrollment(&[], &layout, EnrollAgg::Mean, "s"),
            Err(Error::Invalid(_))
        ));
        let embs = vec![emb("a", vec![1.0, 2.0]), emb("b", vec![1.0, 2.0, 3.0])];
        assert!(matches!(
            build_enrollment(&embs, &layout, EnrollAgg::Concat, "s"),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn agg_names() {
        assert_eq!("joint".parse::<EnrollAgg>().unwrap(), EnrollAgg::Concat);
        assert_eq!("mean".parse::<EnrollAgg>().unwrap(), EnrollAgg::Mean);
        assert!("median".parse::<EnrollAgg>().is_err());
    }
}
