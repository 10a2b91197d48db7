use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attscore::ablation::Axis;
use attscore::enroll::{build_enrollment, EnrollAgg};
use attscore::grad::check_trial_gradient;
use attscore::io::{self, format_scores, join_scores, read_scores, read_trials, EmbeddingFile, RunConfig};
use attscore::pipeline::{
    ablate_from_config, eval_report, gradcheck_suite, init_model, score_files, synth_files, train_from_config,
};
use attscore::score::default_alpha;
use attscore::{Error, ErrorClass, LayoutConfig, NormMode, Result, ScoreMethod, ScoringConfig, ToyModel};

/// Attentive scoring of packed speaker embeddings.
#[derive(Parser)]
#[command(name = "attscore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed held-out synthetic speakers and write embedding files and a trial list.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to embed with; an untrained model from the config otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory; the config's `paths.out_dir` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on synthetic speakers and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; `model.atsm` in the config's `paths.out_dir` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trial list.
    Score(ScoreArgs),
    /// Report the equal error rate of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// Compare analytic score gradients with central differences.
    Gradcheck {
        /// First seed of the random suite.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random trials per mode, layout and enrollment count.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Check one trial from a file instead: the first record is the test
        /// utterance, the rest form the enrollment.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Train and evaluate one row per setting of an ablation axis.
    Ablate {
        /// norm, tied, keys or enroll.
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table as TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    enroll: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Score file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scoring section of this run config supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<ScoreMethod>,
    #[arg(long)]
    norm: Option<NormMode>,
    /// Number of key-value pairs.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    key_dim: Option<usize>,
    #[arg(long)]
    value_dim: Option<usize>,
    #[arg(long, conflicts_with = "independent")]
    tied: bool,
    #[arg(long)]
    independent: bool,
    /// Softmax temperature; 1/sqrt(d_k) by default.
    #[arg(long)]
    alpha: Option<f64>,
    /// concat (joint) or mean.
    #[arg(long)]
    enroll_agg: Option<EnrollAgg>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::read)
}

fn scoring_config(args: &ScoreArgs, header: LayoutConfig) -> Result<ScoringConfig> {
    let section = match &args.config {
        Some(p) => Some(RunConfig::read(p)?.scoring),
        None => None,
    };
    let mut layout = match section {
        Some(s) => s.layout()?,
        None => header,
    };
    layout.num_pairs = args.pairs.unwrap_or(layout.num_pairs);
    layout.key_dim = args.key_dim.unwrap_or(layout.key_dim);
    layout.value_dim = args.value_dim.unwrap_or(layout.value_dim);
    if args.tied || args.independent {
        layout.tied = args.tied;
    }
    layout.validate()?;
    let defaults = section.unwrap_or_default();
    let cfg = ScoringConfig {
        method: args.method.unwrap_or(defaults.method),
        norm: args.norm.unwrap_or(defaults.norm),
        alpha: args
            .alpha
            .or(defaults.alpha)
            .unwrap_or_else(|| default_alpha(layout.key_dim)),
        layout,
        enroll_agg: args.enroll_agg.unwrap_or(defaults.enroll_agg),
        layer_norm: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => io::write_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { config, model, out } => {
            let cfg = load_config(config.as_deref())?;
            let model = match model {
                Some(p) => ToyModel::load(p)?,
                None => init_model(&cfg)?,
            };
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let files = synth_files(&cfg, &model)?;
            files.write(&out)?;
            io::write_bytes(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            println!(
                "{} speakers, {} test utterances, {} trials -> {}",
                files.enroll_single.embeddings.len(),
                files.test.embeddings.len(),
                files.trials.len(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = match out {
                Some(p) => p,
                None => {
                    let dir = &cfg.paths.out_dir;
                    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                        context: format!("creating {}", dir.display()),
                        source: e,
                    })?;
                    dir.join("model.atsm")
                }
            };
            let outcome = train_from_config(&cfg)?;
            outcome.model.save(&out, &cfg)?;
            println!(
                "{} steps, loss {} -> {}, alpha {}",
                outcome.losses.len(),
                io::format_score(outcome.losses.first().copied().unwrap_or(f64::NAN)),
                io::format_score(outcome.losses.last().copied().unwrap_or(f64::NAN)),
                io::format_score(outcome.model.alpha())
            );
        }
        Command::Score(args) => {
            let enroll = EmbeddingFile::read(&args.enroll)?;
            let test = EmbeddingFile::read(&args.test)?;
            let trials = read_trials(&args.trials)?;
            let cfg = scoring_config(&args, enroll.layout)?;
            let scores = score_files(&enroll, &test, &trials, &cfg)?;
            emit(args.out.as_deref(), &format_scores(&trials, &scores)?)?;
        }
        Command::Eval { scores, trials } => {
            let set = join_scores(&read_trials(&trials)?, &read_scores(&scores)?)?;
            print!("{}", eval_report(&set)?);
        }
        Command::Gradcheck {
            seed,
            seeds,
            h,
            tol,
            fixture,
        } => match fixture {
            None => {
                let report = gradcheck_suite(seed..seed + seeds, h, tol)?;
                print!("{}", report.render());
                return Ok(report.passed());
            }
            Some(path) => {
                let file = EmbeddingFile::read(&path)?;
                let (test, enroll) = file
                    .embeddings
                    .split_first()
                    .filter(|(_, rest)| !rest.is_empty())
                    .ok_or_else(|| Error::Invalid("fixture needs a test record and enrollment records".into()))?;
                let model = build_enrollment(enroll, &file.layout, EnrollAgg::Concat, "fixture")?;
                let mut ok = true;
                for norm in NormMode::ALL {
                    let cfg = ScoringConfig::attentive(file.layout, norm);
                    let check = check_trial_gradient(test, &model, &cfg, h)?;
                    let pass = check.passes(tol);
                    ok &= pass;
                    match check.non_finite_coord {
                        Some(i) => println!("FAIL {:<14} non-finite gradient at coordinate {i}", norm.name()),
                        None => println!(
                            "{:<4} {:<14} max rel {:.3e} (coord {})",
                            if pass { "ok" } else { "FAIL" },
                            norm.name(),
                            check.max_rel_error,
                            check.worst_coord
                        ),
                    }
                }
                println!("{} at tolerance {tol:e}", if ok { "PASS" } else { "FAIL" });
                return Ok(ok);
            }
        },
        Command::Ablate { axis, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let table = ablate_from_config(&cfg, axis)?;
            print!("{}", table.render());
            if let Some(p) = out {
                io::write_bytes(&p, table.to_tsv().as_bytes())?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Io => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
