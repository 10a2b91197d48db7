use attscore::ablation::{build_eval_set, condition_scores, Condition, EnrollCount, EvalSpec, TestCondition};
use attscore::{
    compute_eer, synth_generate, train, BatchSpec, InitSpec, LayoutConfig, NormMode, ScoringConfig, SynthSpec,
    ToyModel, TrainConfig,
};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn default_spec_training_halves_the_loss() {
    let data = synth_generate(&SynthSpec::default()).unwrap();
    let layout = LayoutConfig::tied(32, 4, 8).unwrap();
    let cfg = ScoringConfig::attentive(layout, NormMode::KeyAndGlobalL2);
    let tc = TrainConfig {
        steps: 150,
        batch: BatchSpec {
            speakers_per_batch: 8,
            utts_per_batch_speaker: 4,
        },
        ..TrainConfig::default()
    };
    let model = ToyModel::init(layout, data.latent_dim, &InitSpec::default(), 0).unwrap();
    let out = train(model, &data, &cfg, &tc).unwrap();
    let first = mean(&out.losses[..10]);
    let last = mean(&out.losses[out.losses.len() - 10..]);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn separable_data_drives_the_loss_to_zero() {
    let data = synth_generate(&SynthSpec {
        num_speakers: 8,
        utts_per_speaker: 4,
        latent_dim: 8,
        within_speaker_noise: vec![0.0],
        ..SynthSpec::default()
    })
    .unwrap();
    let layout = LayoutConfig::tied(4, 2, 4).unwrap();
    let cfg = ScoringConfig::attentive(layout, NormMode::KeyValueL2);
    let tc = TrainConfig {
        steps: 500,
        lr: 0.1,
        batch: BatchSpec {
            speakers_per_batch: 4,
            utts_per_batch_speaker: 2,
        },
        ..TrainConfig::default()
    };
    let model = ToyModel::init(layout, data.latent_dim, &InitSpec::default(), 3).unwrap();
    let losses = train(model, &data, &cfg, &tc).unwrap().losses;
    let windows: Vec<f64> = losses.chunks(100).map(mean).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    assert!(*windows.last().unwrap() < 0.05, "{windows:?}");
}

#[test]
fn multi_enrollment_beats_single_enrollment() {
    let layout = LayoutConfig::tied(32, 4, 8).unwrap();
    let cfg = ScoringConfig::cosine(layout);
    let mut wins = 0;
    for seed in 0..10 {
        let synth = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let eval = build_eval_set(
            &synth,
            &EvalSpec {
                seed: 77 + seed,
                ..EvalSpec::default()
            },
        )
        .unwrap();
        let model = ToyModel::init(layout, synth.latent_dim, &InitSpec::plain(), seed).unwrap();
        let eer = |enroll| {
            let cond = Condition {
                enroll,
                test: TestCondition::Clean,
            };
            compute_eer(&condition_scores(&model, &cfg, &eval, cond).unwrap())
                .unwrap()
                .eer
        };
        if eer(EnrollCount::Multi) <= eer(EnrollCount::Single) {
            wins += 1;
        }
    }
    assert!(wins >= 8, "{wins}/10");
}
