//! The normalization ablation at a small scale: one trained model per mode,
//! evaluated on single/multi enrollment and clean/noisy tests.

use attscore::ablation::{build_eval_set, run_axis, Axis, AxisBase, EvalSpec};
use attscore::{synth_generate, BatchSpec, InitSpec, SynthSpec, TrainConfig};

fn main() -> attscore::Result<()> {
    let synth = SynthSpec {
        num_speakers: 24,
        latent_dim: 16,
        ..SynthSpec::default()
    };
    let data = synth_generate(&synth)?;
    let eval = build_eval_set(
        &synth,
        &EvalSpec {
            num_speakers: 20,
            ..EvalSpec::default()
        },
    )?;
    let base = AxisBase {
        num_pairs: 8,
        key_dim: 4,
        value_dim: 4,
    };
    let tc = TrainConfig {
        steps: 40,
        batch: BatchSpec {
            speakers_per_batch: 6,
            utts_per_batch_speaker: 3,
        },
        ..TrainConfig::default()
    };
    let table = run_axis(Axis::Norm, &base, &data, &eval, &tc, &InitSpec::default(), 0)?;
    print!("{}", table.render());
    Ok(())
}
