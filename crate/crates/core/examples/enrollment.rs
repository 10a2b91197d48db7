//! Joint (concatenated) versus mean enrollment models.

use attscore::{
    build_enrollment, enrollment_footprint, score_trial, EnrollAgg, LayoutConfig, NormMode, PackedEmbedding,
    ScoringConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> attscore::Result<()> {
    let layout = LayoutConfig::tied(8, 4, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let speaker: Vec<f64> = (0..layout.total_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut noisy = |id: String, scale: f64| {
        PackedEmbedding::new(
            id,
            speaker
                .iter()
                .map(|x| x + scale * rng.random_range(-1.0..1.0))
                .collect(),
        )
    };
    let utts: Vec<PackedEmbedding> = (0..6).map(|i| noisy(format!("spk:{i}"), 0.8)).collect();
    let test = noisy("test".into(), 0.8);

    let cfg = ScoringConfig::attentive(layout, NormMode::KeyValueL2);
    for agg in [EnrollAgg::Concat, EnrollAgg::Mean] {
        let model = build_enrollment(&utts, &layout, agg, "spk")?;
        println!(
            "{:<6} keys {:>3}  stored floats {:>5}  score {:.4}",
            agg.name(),
            model.num_keys(),
            enrollment_footprint(&model),
            score_trial(&test, &model, &cfg)?
        );
    }

    // A concatenated model can still be scored as its mean.
    let joint = build_enrollment(&utts, &layout, EnrollAgg::Concat, "spk")?;
    let as_mean = cfg.clone().with_enroll_agg(EnrollAgg::Mean);
    println!(
        "joint model scored as mean: {:.4}",
        score_trial(&test, &joint, &as_mean)?
    );
    Ok(())
}
