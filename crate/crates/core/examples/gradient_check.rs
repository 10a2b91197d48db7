//! Analytic score gradients against central finite differences.

use attscore::grad::{check_trial_gradient, GradCase};
use attscore::{build_enrollment, score_grad, EnrollAgg, LayoutConfig, NormMode, PackedEmbedding, ScoringConfig};

fn main() -> attscore::Result<()> {
    let layout = LayoutConfig::independent(2, 2, 3)?;
    let test = PackedEmbedding::new(
        "t",
        vec![0.3, -0.1, 0.8, 0.2, 1.0, -0.5, 0.4, -0.6, 0.1, 0.9, 0.3, 0.2, -0.7, 0.5],
    );
    let enroll = PackedEmbedding::new(
        "e",
        vec![0.5, 0.4, -0.2, 0.6, 0.7, 0.1, -0.3, 0.2, 0.8, -0.4, 0.6, 0.5, 0.1, -0.2],
    );
    let model = build_enrollment(&[enroll], &layout, EnrollAgg::Concat, "s")?;
    let cfg = ScoringConfig::attentive(layout, NormMode::KeyAndGlobalL2).with_alpha(2.0);

    let (score, grad) = score_grad(&test, &model, &cfg)?;
    println!("score {score:.6}, d score / d log alpha {:.6}", grad.d_log_alpha);
    for h in [1e-3, 1e-6] {
        let check = check_trial_gradient(&test, &model, &cfg, h)?;
        println!(
            "h = {h:e}: max rel error {:.2e} at coordinate {} of {}",
            check.max_rel_error, check.worst_coord, check.num_coords
        );
    }

    let cases = GradCase::suite(0..5);
    let failed = cases
        .iter()
        .filter(|c| !c.run(1e-6).map(|r| r.passes(1e-5)).unwrap_or(false))
        .count();
    println!("random suite: {} cases, {failed} failed", cases.len());
    Ok(())
}
