//! Training a small projection with attentive scoring on synthetic speakers,
//! then comparing held-out EER with a cosine-trained model.

use attscore::ablation::{build_eval_set, run_ablation, Condition, EvalSpec, System};
use attscore::{
    synth_generate, train, BatchSpec, InitSpec, LayoutConfig, NormMode, ScoringConfig, SynthSpec, ToyModel, TrainConfig,
};

fn main() -> attscore::Result<()> {
    let synth = SynthSpec::default();
    let data = synth_generate(&synth)?;
    let eval = build_eval_set(
        &synth,
        &EvalSpec {
            num_speakers: 30,
            ..EvalSpec::default()
        },
    )?;
    let layout = LayoutConfig::tied(16, 4, 8)?;
    let tc = TrainConfig {
        steps: 60,
        batch: BatchSpec {
            speakers_per_batch: 8,
            utts_per_batch_speaker: 4,
        },
        ..TrainConfig::default()
    };

    let att_cfg = ScoringConfig::attentive(layout, NormMode::KeyAndGlobalL2);
    let att = train(
        ToyModel::init(layout, synth.latent_dim, &InitSpec::default(), 1)?,
        &data,
        &att_cfg,
        &tc,
    )?;
    let cos_cfg = ScoringConfig::cosine(layout);
    let cos = train(
        ToyModel::init(layout, synth.latent_dim, &InitSpec::plain(), 1)?,
        &data,
        &cos_cfg,
        &tc,
    )?;

    for (name, out) in [("attentive", &att), ("cosine", &cos)] {
        // Single-batch losses are noisy; report the first and last ten steps.
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let l = &out.losses;
        let (first, last) = (mean(&l[..10]), mean(&l[l.len() - 10..]));
        println!("{name:<9} loss {first:.3} -> {last:.3}");
    }
    let systems = [
        System {
            label: "attentive".into(),
            model: &att.model,
            cfg: att.model.scoring_config(&att_cfg),
        },
        System {
            label: "cosine".into(),
            model: &cos.model,
            cfg: cos.model.scoring_config(&cos_cfg),
        },
    ];
    print!(
        "{}",
        run_ablation("held-out EER", &eval, &systems, &Condition::ALL)?.render()
    );
    Ok(())
}
