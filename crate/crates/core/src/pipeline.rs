//! End-to-end steps behind the `attscore` subcommands, usable without the
//! binary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::ablation::{build_eval_set, run_axis, AblationTable, Axis, AxisBase, EvalSet};
use crate::enroll::EnrollmentModel;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, ScoreSet, Trial, TrialLabel};
use crate::grad::{GradCase, GradCheck};
use crate::io::{format_trials, write_bytes, EmbeddingFile, RunConfig, ENROLL_ID_SEP};
use crate::layout::{LayoutConfig, PackedEmbedding};
use crate::score::{score_trial, ScoreMethod, ScoringConfig};
use crate::train::{synth_generate, train, InitSpec, ToyModel, TrainOutcome};

/// Untrained model for the configured layout and scoring method.
pub fn init_model(cfg: &RunConfig) -> Result<ToyModel> {
    let init = match cfg.scoring.method {
        ScoreMethod::Attentive => cfg.init,
        ScoreMethod::Cosine => InitSpec {
            loss_scale: cfg.init.loss_scale,
            ..InitSpec::plain()
        },
    };
    ToyModel::init(cfg.scoring.layout()?, cfg.synth.latent_dim, &init, cfg.train.seed)
}

/// Trains a fresh model on the configured synthetic speakers.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = synth_generate(&cfg.synth)?;
    train(init_model(cfg)?, &data, &cfg.scoring.to_config()?, &cfg.train)
}

/// Held-out speakers embedded by a model, ready to be written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Every enrollment utterance, with ids `speaker:index`.
    pub enroll: EmbeddingFile,
    /// Only the first enrollment utterance of each speaker.
    pub enroll_single: EmbeddingFile,
    pub test: EmbeddingFile,
    /// The same test utterances with extra additive noise.
    pub test_noisy: EmbeddingFile,
    /// Every test utterance against every speaker.
    pub trials: Vec<Trial>,
}

impl SynthOutput {
    pub const FILES: [&'static str; 5] = [
        "enroll.atsf",
        "enroll-single.atsf",
        "test.atsf",
        "test-noisy.atsf",
        "trials.tsv",
    ];

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.enroll.write(dir.join(Self::FILES[0]))?;
        self.enroll_single.write(dir.join(Self::FILES[1]))?;
        self.test.write(dir.join(Self::FILES[2]))?;
        self.test_noisy.write(dir.join(Self::FILES[3]))?;
        write_bytes(&dir.join(Self::FILES[4]), format_trials(&self.trials).as_bytes())
    }
}

pub fn synth_files(cfg: &RunConfig, model: &ToyModel) -> Result<SynthOutput> {
    if model.latent_dim != cfg.synth.latent_dim {
        return Err(Error::Config(format!(
            "model expects latent dim {}, config generates {}",
            model.latent_dim, cfg.synth.latent_dim
        )));
    }
    let eval = build_eval_set(&cfg.synth, &cfg.eval)?;
    embed_eval_set(&eval, model)
}

pub fn embed_eval_set(eval: &EvalSet, model: &ToyModel) -> Result<SynthOutput> {
    let mut enroll = Vec::new();
    let mut enroll_single = Vec::new();
    for (spk, utts) in eval.speakers.iter().zip(&eval.enroll) {
        for (i, z) in utts.iter().enumerate() {
            let emb = PackedEmbedding::new(format!("{spk}{ENROLL_ID_SEP}{i}"), model.embed(z)?);
            if i == 0 {
                enroll_single.push(emb.clone());
            }
            enroll.push(emb);
        }
    }
    let mut test = Vec::with_capacity(eval.tests.len());
    let mut test_noisy = Vec::with_capacity(eval.tests.len());
    let mut trials = Vec::with_capacity(eval.tests.len() * eval.speakers.len());
    for t in &eval.tests {
        test.push(PackedEmbedding::new(t.id.clone(), model.embed(&t.clean)?));
        test_noisy.push(PackedEmbedding::new(t.id.clone(), model.embed(&t.noisy)?));
        for (s, spk) in eval.speakers.iter().enumerate() {
            let label = if s == t.speaker {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            };
            trials.push(Trial::new(spk.clone(), t.id.clone(), label)?);
        }
    }
    let layout = model.layout;
    Ok(SynthOutput {
        enroll: EmbeddingFile::new(layout, enroll)?,
        enroll_single: EmbeddingFile::new(layout, enroll_single)?,
        test: EmbeddingFile::new(layout, test)?,
        test_noisy: EmbeddingFile::new(layout, test_noisy)?,
        trials,
    })
}

/// Scores trials in input order. Enrollment records are grouped by speaker
/// (see [`EmbeddingFile::enrollments`]); failures name the trial.
pub fn score_files(
    enroll: &EmbeddingFile,
    test: &EmbeddingFile,
    trials: &[Trial],
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    check_layout(&enroll.layout, &cfg.layout, "enrollment file")?;
    check_layout(&test.layout, &cfg.layout, "test file")?;
    let models = enroll.enrollments(cfg.enroll_agg)?;
    let by_speaker: HashMap<&str, &EnrollmentModel> = models.iter().map(|m| (m.speaker_id.as_str(), m)).collect();
    let tests = test.index();
    trials
        .iter()
        .map(|t| {
            let trial_err = |e: Error| -> Error {
                let key = format!("trial {} / {}", t.enroll_speaker_id, t.test_utterance_id);
                match e {
                    Error::NonFinite { context, index } => Error::NonFinite {
                        context: format!("{key}: {context}"),
                        index,
                    },
                    Error::Degenerate { what, magnitude } => Error::Degenerate {
                        what: format!("{what} in {key}"),
                        magnitude,
                    },
                    other => Error::Invalid(format!("{key}: {other}")),
                }
            };
            let model = by_speaker
                .get(t.enroll_speaker_id.as_str())
                .ok_or_else(|| Error::UnknownId(format!("enrollment speaker '{}'", t.enroll_speaker_id)))?;
            let emb = tests
                .get(t.test_utterance_id.as_str())
                .ok_or_else(|| Error::UnknownId(format!("test utterance '{}'", t.test_utterance_id)))?;
            score_trial(emb, model, cfg).map_err(trial_err)
        })
        .collect()
}

fn check_layout(file: &LayoutConfig, expected: &LayoutConfig, what: &str) -> Result<()> {
    if file != expected {
        return Err(Error::Layout(format!(
            "{what} has M={} d_k={} d_v={} {}, scoring expects M={} d_k={} d_v={} {}",
            file.num_pairs,
            file.key_dim,
            file.value_dim,
            tied_name(file.tied),
            expected.num_pairs,
            expected.key_dim,
            expected.value_dim,
            tied_name(expected.tied)
        )));
    }
    Ok(())
}

fn tied_name(tied: bool) -> &'static str {
    if tied {
        "tied"
    } else {
        "independent"
    }
}

/// Human-readable EER summary.
pub fn eval_report(scores: &ScoreSet) -> Result<String> {
    let r = compute_eer(scores)?;
    Ok(format!(
        "trials {} (target {}, nontarget {})\nEER {:.2}%\nthreshold {}\n",
        r.num_target + r.num_nontarget,
        r.num_target,
        r.num_nontarget,
        100.0 * r.eer,
        crate::io::format_score(r.threshold)
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub results: Vec<(GradCase, GradCheck)>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|(_, c)| c.passes(self.tol))
    }

    /// One line per mode, layout and enrollment count with the worst case.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut groups: Vec<((String, bool, usize), Vec<&(GradCase, GradCheck)>)> = Vec::new();
        for r in &self.results {
            let key = (r.0.norm.name().to_string(), r.0.tied, r.0.enroll_utts);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => groups.push((key, vec![r])),
            }
        }
        for ((norm, tied, e), rs) in &groups {
            let worst = rs
                .iter()
                .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
                .expect("non-empty group");
            let failed = rs.iter().filter(|r| !r.1.passes(self.tol)).count();
            let _ = writeln!(
                out,
                "{:<4} {:<14} {:<11} E={} cases {:>3}  max rel {:.3e} (seed {}, coord {})",
                if failed == 0 { "ok" } else { "FAIL" },
                norm,
                tied_name(*tied),
                e,
                rs.len(),
                worst.1.max_rel_error,
                worst.0.seed,
                worst.1.worst_coord
            );
        }
        let _ = writeln!(
            out,
            "{} at tolerance {:e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tol
        );
        out
    }
}

pub fn gradcheck_suite(seeds: std::ops::Range<u64>, h: f64, tol: f64) -> Result<GradReport> {
    let results = GradCase::suite(seeds)
        .into_iter()
        .map(|c| Ok((c, c.run(h)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport { results, tol })
}

/// Runs one ablation axis with the dimensions, data, training and
/// evaluation settings of `cfg`.
pub fn ablate_from_config(cfg: &RunConfig, axis: Axis) -> Result<AblationTable> {
    let base = AxisBase {
        num_pairs: cfg.scoring.pairs,
        key_dim: cfg.scoring.key_dim,
        value_dim: cfg.scoring.value_dim,
    };
    let data = synth_generate(&cfg.synth)?;
    let eval = build_eval_set(&cfg.synth, &cfg.eval)?;
    run_axis(axis, &base, &data, &eval, &cfg.train, &cfg.init, cfg.train.seed)
}
