//! Held-out evaluation of trained toy models and ablation tables.
//!
//! Every test utterance is scored against every enrolled speaker. Single
//! enrollment keeps only the first enrollment utterance of each speaker; the
//! noisy condition perturbs test latents (never enrollment latents) before
//! projection. The task average is the mean EER over the evaluated
//! conditions.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enroll::{mean_vector, EnrollAgg};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, ScoreSet, Trial, TrialLabel};
use crate::layout::LayoutConfig;
use crate::normalize::NormMode;
use crate::score::{
    cosine_baseline, enroll_side, prepare, score_prepared, EnrollSide, Role, ScoreMethod, ScoringConfig, TestSide,
};
use crate::train::{perturb, synth_generate, train, Dataset, InitSpec, SynthSpec, ToyModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnrollCount {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestCondition {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition {
    pub enroll: EnrollCount,
    pub test: TestCondition,
}

impl Condition {
    pub const fn new(enroll: EnrollCount, test: TestCondition) -> Self {
        Condition { enroll, test }
    }

    /// Single clean, single noisy, multi clean, multi noisy.
    pub const ALL: [Condition; 4] = [
        Condition::new(EnrollCount::Single, TestCondition::Clean),
        Condition::new(EnrollCount::Single, TestCondition::Noisy),
        Condition::new(EnrollCount::Multi, TestCondition::Clean),
        Condition::new(EnrollCount::Multi, TestCondition::Noisy),
    ];

    pub fn label(&self) -> &'static str {
        match (self.enroll, self.test) {
            (EnrollCount::Single, TestCondition::Clean) => "single-clean",
            (EnrollCount::Single, TestCondition::Noisy) => "single-noisy",
            (EnrollCount::Multi, TestCondition::Clean) => "multi-clean",
            (EnrollCount::Multi, TestCondition::Noisy) => "multi-noisy",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub num_speakers: usize,
    pub enroll_utts: usize,
    pub test_utts: usize,
    /// Per-coordinate noise added to test latents in the noisy condition.
    pub test_noise: f64,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            num_speakers: 60,
            enroll_utts: 6,
            test_utts: 10,
            test_noise: 0.3,
            seed: 1_000_003,
        }
    }
}

/// Held-out speakers split into enrollment and test utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub speakers: Vec<String>,
    /// Enrollment latents per speaker, in utterance order.
    pub enroll: Vec<Vec<Vec<f64>>>,
    pub tests: Vec<EvalTest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTest {
    pub speaker: usize,
    pub id: String,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
}

/// Draws held-out speakers from the same generator as `synth`.
pub fn build_eval_set(synth: &SynthSpec, spec: &EvalSpec) -> Result<EvalSet> {
    if spec.enroll_utts == 0 || spec.test_utts == 0 || spec.num_speakers < 2 {
        return Err(Error::Config(
            "evaluation needs two or more speakers with enrollment and test utterances".into(),
        ));
    }
    if !(spec.test_noise >= 0.0 && spec.test_noise.is_finite()) {
        return Err(Error::Config("test_noise must be finite and >= 0".into()));
    }
    let data = synth_generate(&SynthSpec {
        num_speakers: spec.num_speakers,
        utts_per_speaker: spec.enroll_utts + spec.test_utts,
        seed: spec.seed,
        ..synth.clone()
    })?;
    Ok(split_eval_set(&data, spec))
}

fn split_eval_set(data: &Dataset, spec: &EvalSpec) -> EvalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_7e57);
    let mut enroll = Vec::with_capacity(data.speakers.len());
    let mut tests = Vec::new();
    for (s, group) in data.by_speaker().into_iter().enumerate() {
        let (enr, tst) = group.split_at(spec.enroll_utts);
        enroll.push(enr.iter().map(|&u| data.utterances[u].latent.clone()).collect());
        for &u in tst {
            let utt = &data.utterances[u];
            tests.push(EvalTest {
                speaker: s,
                id: utt.id.clone(),
                clean: utt.latent.clone(),
                noisy: perturb(&utt.latent, spec.test_noise, &mut rng),
            });
        }
    }
    EvalSet {
        speakers: data.speakers.clone(),
        enroll,
        tests,
    }
}

enum Enrolled {
    Attentive(EnrollSide),
    Cosine(Vec<Vec<f64>>),
}

/// Scores every test utterance against every speaker under one condition.
pub fn condition_scores(model: &ToyModel, cfg: &ScoringConfig, eval: &EvalSet, cond: Condition) -> Result<ScoreSet> {
    let cfg = model.scoring_config(cfg);
    cfg.validate()?;
    let layout = cfg.layout;
    let enrolled = eval
        .enroll
        .iter()
        .map(|utts| {
            let take = match cond.enroll {
                EnrollCount::Single => 1,
                EnrollCount::Multi => utts.len(),
            };
            let mut vecs = utts[..take]
                .iter()
                .map(|z| model.embed(z))
                .collect::<Result<Vec<_>>>()?;
            if cfg.enroll_agg == EnrollAgg::Mean && vecs.len() > 1 {
                let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
                vecs = vec![mean_vector(&refs)];
            }
            Ok(match cfg.method {
                ScoreMethod::Cosine => Enrolled::Cosine(vecs),
                ScoreMethod::Attentive => {
                    let prepared = vecs
                        .iter()
                        .map(|v| prepare(v, &cfg, Role::Enroll))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<_> = prepared.iter().collect();
                    Enrolled::Attentive(enroll_side(&refs, &layout))
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(eval.tests.len() * eval.speakers.len());
    for test in &eval.tests {
        let latent = match cond.test {
            TestCondition::Clean => &test.clean,
            TestCondition::Noisy => &test.noisy,
        };
        let x = model.embed(latent)?;
        let side: Option<TestSide> = match cfg.method {
            ScoreMethod::Attentive => Some(prepare(&x, &cfg, Role::Test)?.test_side(&layout)),
            ScoreMethod::Cosine => None,
        };
        for (s, enr) in enrolled.iter().enumerate() {
            let score = match (enr, &side) {
                (Enrolled::Attentive(e), Some(t)) => score_prepared(t, e, &cfg),
                (Enrolled::Cosine(vecs), _) => {
                    let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
                    cosine_baseline(&x, &refs)
                }
                _ => unreachable!("method decides both sides"),
            }
            .map_err(|e| Error::Eval(format!("trial {} {}: {e}", eval.speakers[s], test.id)))?;
            let label = if s == test.speaker {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            };
            entries.push((Trial::new(eval.speakers[s].clone(), test.id.clone(), label)?, score));
        }
    }
    ScoreSet::new(entries)
}

/// A trained model together with the configuration used to evaluate it.
#[derive(Debug, Clone)]
pub struct System<'a> {
    pub label: String,
    pub model: &'a ToyModel,
    pub cfg: ScoringConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// One EER per condition, as fractions.
    pub eers: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub title: String,
    pub conditions: Vec<Condition>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Tab-separated, EERs in percent with four decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("system");
        for c in &self.conditions {
            out.push('\t');
            out.push_str(c.label());
        }
        out.push_str("\taverage\n");
        for r in &self.rows {
            out.push_str(&r.label);
            for e in r.eers.iter().chain([&r.average]) {
                let _ = write!(out, "\t{:.4}", 100.0 * e);
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text rendering with EERs in percent.
    pub fn render(&self) -> String {
        let mut headers: Vec<String> = vec!["system".into()];
        headers.extend(self.conditions.iter().map(|c| c.label().to_string()));
        headers.push("average".into());
        let mut cells: Vec<Vec<String>> = vec![headers];
        for r in &self.rows {
            let mut line = vec![r.label.clone()];
            line.extend(r.eers.iter().chain([&r.average]).map(|e| format!("{:.2}", 100.0 * e)));
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|i| cells.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.title);
        for line in &cells {
            let mut text = String::new();
            for (i, (cell, w)) in line.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(text, "{cell:<w$}");
                } else {
                    let _ = write!(text, "  {cell:>w$}");
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
        }
        out
    }
}

pub fn run_ablation(
    title: &str,
    eval: &EvalSet,
    systems: &[System<'_>],
    conditions: &[Condition],
) -> Result<AblationTable> {
    if conditions.is_empty() {
        return Err(Error::Invalid("an ablation needs at least one condition".into()));
    }
    let mut rows = Vec::with_capacity(systems.len());
    for sys in systems {
        let eers = conditions
            .iter()
            .map(|&c| Ok(compute_eer(&condition_scores(sys.model, &sys.cfg, eval, c)?)?.eer))
            .collect::<Result<Vec<f64>>>()?;
        let average = eers.iter().sum::<f64>() / eers.len() as f64;
        rows.push(AblationRow {
            label: sys.label.clone(),
            eers,
            average,
        });
    }
    Ok(AblationTable {
        title: title.to_string(),
        conditions: conditions.to_vec(),
        rows,
    })
}

/// The configuration axes studied in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Norm,
    Tied,
    Keys,
    Enroll,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Norm, Axis::Tied, Axis::Keys, Axis::Enroll];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Norm => "norm",
            Axis::Tied => "tied",
            Axis::Keys => "keys",
            Axis::Enroll => "enroll",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation axis '{s}' (norm, tied, keys, enroll)")))
    }
}

/// Per-pair dimensions shared by the rows of an axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxisBase {
    pub num_pairs: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl Default for AxisBase {
    fn default() -> Self {
        AxisBase {
            num_pairs: 32,
            key_dim: 4,
            value_dim: 8,
        }
    }
}

/// One row of an axis: how the model is trained and how it is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisRow {
    pub label: String,
    pub train_cfg: ScoringConfig,
    pub eval_cfg: ScoringConfig,
}

impl AxisRow {
    fn same(label: &str, cfg: ScoringConfig) -> Self {
        AxisRow {
            label: label.into(),
            train_cfg: cfg.clone(),
            eval_cfg: cfg,
        }
    }
}

pub const KEY_COUNTS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

pub fn axis_rows(axis: Axis, base: &AxisBase) -> Result<Vec<AxisRow>> {
    let layout = |pairs: usize, tied: bool| LayoutConfig::new(pairs, base.key_dim, base.value_dim, tied);
    let tied = layout(base.num_pairs, true)?;
    Ok(match axis {
        Axis::Norm => NormMode::ALL
            .iter()
            .map(|&n| AxisRow::same(n.name(), ScoringConfig::attentive(tied, n)))
            .collect(),
        Axis::Tied => vec![
            AxisRow::same("tied", ScoringConfig::attentive(tied, NormMode::KeyAndGlobalL2)),
            AxisRow::same(
                "independent",
                ScoringConfig::attentive(layout(base.num_pairs, false)?, NormMode::KeyAndGlobalL2),
            ),
        ],
        Axis::Keys => KEY_COUNTS
            .iter()
            .map(|&m| {
                Ok(AxisRow::same(
                    &m.to_string(),
                    ScoringConfig::attentive(layout(m, true)?, NormMode::KeyValueL2),
                ))
            })
            .collect::<Result<_>>()?,
        Axis::Enroll => {
            let joint = ScoringConfig::attentive(tied, NormMode::KeyValueL2);
            let mean = joint.clone().with_enroll_agg(EnrollAgg::Mean);
            vec![
                AxisRow::same("joint/joint", joint.clone()),
                AxisRow {
                    label: "joint/mean".into(),
                    train_cfg: joint,
                    eval_cfg: mean.clone(),
                },
                AxisRow::same("mean/mean", mean),
            ]
        }
    })
}

/// Trains one model per row of `axis` on the same data and evaluates all of
/// them on the same held-out set. Rows sharing a training configuration
/// share the trained model.
pub fn run_axis(
    axis: Axis,
    base: &AxisBase,
    train_data: &Dataset,
    eval: &EvalSet,
    tc: &TrainConfig,
    init: &InitSpec,
    model_seed: u64,
) -> Result<AblationTable> {
    let rows = axis_rows(axis, base)?;
    let mut trained: Vec<(ScoringConfig, ToyModel)> = Vec::new();
    for row in &rows {
        if trained.iter().any(|(c, _)| *c == row.train_cfg) {
            continue;
        }
        let model = ToyModel::init(row.train_cfg.layout, train_data.latent_dim, init, model_seed)?;
        let out = train(model, train_data, &row.train_cfg, tc)?;
        trained.push((row.train_cfg.clone(), out.model));
    }
    let systems: Vec<System<'_>> = rows
        .iter()
        .map(|row| System {
            label: row.label.clone(),
            model: &trained
                .iter()
                .find(|(c, _)| *c == row.train_cfg)
                .expect("trained above")
                .1,
            cfg: row.eval_cfg.clone(),
        })
        .collect();
    run_ablation(&format!("{} ablation", axis.name()), eval, &systems, &Condition::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_eval() -> (SynthSpec, EvalSet) {
        let synth = SynthSpec {
            latent_dim: 8,
            ..SynthSpec::default()
        };
        let spec = EvalSpec {
            num_speakers: 5,
            enroll_utts: 3,
            test_utts: 2,
            ..EvalSpec::default()
        };
        let eval = build_eval_set(&synth, &spec).unwrap();
        (synth, eval)
    }

    fn small_model(norm: NormMode) -> (ToyModel, ScoringConfig) {
        let layout = LayoutConfig::tied(4, 2, 3).unwrap();
        let model = ToyModel::init(layout, 8, &InitSpec::default(), 1).unwrap();
        (model, ScoringConfig::attentive(layout, norm))
    }

    #[test]
    fn eval_set_shape() {
        let (_, eval) = small_eval();
        assert_eq!(eval.speakers.len(), 5);
        assert!(eval.enroll.iter().all(|e| e.len() == 3));
        assert_eq!(eval.tests.len(), 10);
        assert!(eval.tests.iter().all(|t| t.clean != t.noisy));
    }

    #[test]
    fn full_cross_trials() {
        let (_, eval) = small_eval();
        let (model, cfg) = small_model(NormMode::KeyAndGlobalL2);
        let set = condition_scores(&model, &cfg, &eval, Condition::ALL[2]).unwrap();
        assert_eq!(set.counts(), (10, 40));
    }

    #[test]
    fn one_condition_matches_direct_eer() {
        let (_, eval) = small_eval();
        let (model, cfg) = small_model(NormMode::KeyValueL2);
        let sys = System {
            label: "kv".into(),
            model: &model,
            cfg: cfg.clone(),
        };
        let cond = Condition::ALL[0];
        let table = run_ablation("t", &eval, &[sys], &[cond]).unwrap();
        let direct = compute_eer(&condition_scores(&model, &cfg, &eval, cond).unwrap())
            .unwrap()
            .eer;
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].eers, vec![direct]);
        assert_eq!(table.rows[0].average, direct);
    }

    #[test]
    fn cached_scoring_matches_score_trial() {
        use crate::enroll::build_enrollment;
        use crate::layout::PackedEmbedding;
        use crate::score::score_trial;
        let (_, eval) = small_eval();
        for agg in [EnrollAgg::Concat, EnrollAgg::Mean] {
            let (model, cfg) = small_model(NormMode::LayerNorm);
            let cfg = cfg.with_enroll_agg(agg);
            let set = condition_scores(&model, &cfg, &eval, Condition::ALL[3]).unwrap();
            let tcfg = model.scoring_config(&cfg);
            let (trial, score) = &set.entries[7];
            let test = eval.tests.iter().find(|t| t.id == trial.test_utterance_id).unwrap();
            let s = eval
                .speakers
                .iter()
                .position(|s| *s == trial.enroll_speaker_id)
                .unwrap();
            let embs: Vec<_> = eval.enroll[s]
                .iter()
                .map(|z| PackedEmbedding::new("e", model.embed(z).unwrap()))
                .collect();
            let enr = build_enrollment(&embs, &tcfg.layout, EnrollAgg::Concat, "s").unwrap();
            let x = PackedEmbedding::new("t", model.embed(&test.noisy).unwrap());
            let direct = score_trial(&x, &enr, &tcfg).unwrap();
            assert!((direct - score).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_row_structure() {
        let base = AxisBase::default();
        let labels = |a| {
            axis_rows(a, &base)
                .unwrap()
                .into_iter()
                .map(|r| r.label)
                .collect::<Vec<_>>()
        };
        assert_eq!(labels(Axis::Norm), ["none", "layer", "kv-l2", "key-global-l2"]);
        assert_eq!(labels(Axis::Keys), ["1", "2", "4", "8", "16", "32", "64", "128"]);
        assert_eq!(labels(Axis::Enroll), ["joint/joint", "joint/mean", "mean/mean"]);
        assert_eq!(labels(Axis::Tied), ["tied", "independent"]);
        let enroll = axis_rows(Axis::Enroll, &base).unwrap();
        assert_eq!(enroll[0].train_cfg, enroll[1].train_cfg);
        assert_eq!(enroll[1].eval_cfg, enroll[2].eval_cfg);
        assert!("bogus".parse::<Axis>().is_err());
    }

    #[test]
    fn tsv_and_render() {
        let table = AblationTable {
            title: "demo".into(),
            conditions: vec![Condition::ALL[0], Condition::ALL[2]],
            rows: vec![AblationRow {
                label: "a".into(),
                eers: vec![0.1, 0.05],
                average: 0.075,
            }],
        };
        assert_eq!(
            table.to_tsv(),
            "system\tsingle-clean\tmulti-clean\taverage\na\t10.0000\t5.0000\t7.5000\n"
        );
        let text = table.render();
        assert!(text.starts_with("demo\n"));
        assert!(text.contains("7.50"));
    }
}
