//! Trial lists, scores and equal error rate.
//!
//! Thresholds are swept over the distinct score values (plus `+inf`). At a
//! threshold `theta` a nontarget with score `>= theta` is a false accept and
//! a target with score `< theta` is a false reject, so tied scores count
//! against the system. The EER is read off by linear interpolation between
//! the two adjacent operating points where `FAR - FRR` changes sign.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialLabel::Target => "tgt",
            TrialLabel::Nontarget => "non",
        }
    }

    pub fn is_target(&self) -> bool {
        matches!(self, TrialLabel::Target)
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tgt" => Ok(TrialLabel::Target),
            "non" => Ok(TrialLabel::Nontarget),
            _ => Err(Error::Format(format!("trial label must be 'tgt' or 'non', got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll_speaker_id: String,
    pub test_utterance_id: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, label: TrialLabel) -> Result<Self> {
        let trial = Trial {
            enroll_speaker_id: enroll.into(),
            test_utterance_id: test.into(),
            label,
        };
        if trial.enroll_speaker_id.is_empty() || trial.test_utterance_id.is_empty() {
            return Err(Error::Format("trial ids must be non-empty".into()));
        }
        Ok(trial)
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.enroll_speaker_id, &self.test_utterance_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<(Trial, f64)>,
}

impl ScoreSet {
    pub fn new(entries: Vec<(Trial, f64)>) -> Result<Self> {
        if let Some((t, s)) = entries.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::Eval(format!(
                "non-finite score {s} for trial {} {}",
                t.enroll_speaker_id, t.test_utterance_id
            )));
        }
        Ok(ScoreSet { entries })
    }

    /// Builds a set from bare target and nontarget scores, with synthetic ids.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let mut entries = Vec::with_capacity(targets.len() + nontargets.len());
        for (i, &s) in targets.iter().enumerate() {
            entries.push((Trial::new("tgt", format!("t{i}"), TrialLabel::Target)?, s));
        }
        for (i, &s) in nontargets.iter().enumerate() {
            entries.push((Trial::new("non", format!("n{i}"), TrialLabel::Nontarget)?, s));
        }
        Self::new(entries)
    }

    pub fn counts(&self) -> (usize, usize) {
        let targets = self.entries.iter().filter(|(t, _)| t.label.is_target()).count();
        (targets, self.entries.len() - targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
}

/// One point of the detection tradeoff curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn check_classes(scores: &ScoreSet) -> Result<(usize, usize)> {
    let (t, n) = scores.counts();
    if t == 0 || n == 0 {
        return Err(Error::Eval(format!(
            "EER needs both classes, got {t} target and {n} nontarget trials"
        )));
    }
    Ok((t, n))
}

/// Operating points for every distinct score threshold, ascending, followed
/// by the point at `+inf` (nothing accepted).
pub fn compute_det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (num_t, num_n) = check_classes(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.entries.iter().map(|(t, s)| (*s, t.label.is_target())).collect();
    // nontargets first within ties
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut points = Vec::with_capacity(sorted.len() + 1);
    let mut rejected_t = 0usize;
    let mut rejected_n = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].0;
        points.push(DetPoint {
            threshold: theta,
            far: (num_n - rejected_n) as f64 / num_n as f64,
            frr: rejected_t as f64 / num_t as f64,
        });
        while i < sorted.len() && sorted[i].0 == theta {
            if sorted[i].1 {
                rejected_t += 1;
            } else {
                rejected_n += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Locates the crossing of FAR and FRR on an ascending list of points.
pub(crate) fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    // the first point has FRR = 0, the last FAR = 0, so a crossing exists
    let idx = points
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .unwrap_or(points.len() - 1);
    if idx == 0 {
        return (points[0].frr, points[0].threshold);
    }
    let (a, b) = (&points[idx - 1], &points[idx]);
    let (d0, d1) = (a.far - a.frr, b.far - b.frr);
    let t = d0 / (d0 - d1);
    let eer = a.frr + t * (b.frr - a.frr);
    let threshold = if b.threshold.is_finite() {
        a.threshold + t * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    (eer, threshold)
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let (num_target, num_nontarget) = check_classes(scores)?;
    let points = compute_det_points(scores)?;
    let (eer, threshold) = eer_from_points(&points);
    Ok(EerResult {
        eer,
        threshold,
        num_target,
        num_nontarget,
    })
}
