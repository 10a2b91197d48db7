//! Scoring one trial under each normalization mode, and inspecting the
//! joint softmax weights.

use attscore::{
    build_enrollment, score_trial, softmax_weights, EnrollAgg, EnrollSide, LayoutConfig, NormMode, PackedEmbedding,
    ScoringConfig, TestSide,
};

fn main() -> attscore::Result<()> {
    let layout = LayoutConfig::tied(3, 2, 4)?;
    let test = PackedEmbedding::new(
        "test",
        vec![
            1.0, 0.2, 0.9, 0.1, -0.3, 0.4, //
            -0.5, 1.0, 0.2, 0.8, 0.5, -0.1, //
            0.3, 0.3, -1.0, 0.0, 0.6, 0.2,
        ],
    );
    let enroll = [
        PackedEmbedding::new(
            "spk:0",
            vec![
                0.9, 0.1, 1.0, 0.0, -0.2, 0.5, -0.4, 0.9, 0.1, 0.7, 0.4, 0.0, 0.2, 0.5, 0.3, -0.8, 0.1, 0.9,
            ],
        ),
        PackedEmbedding::new(
            "spk:1",
            vec![
                1.1, 0.0, 0.7, 0.3, -0.4, 0.2, -0.6, 1.2, 0.4, 0.6, 0.6, -0.3, 0.1, 0.1, -0.9, 0.2, 0.4, 0.1,
            ],
        ),
    ];
    let model = build_enrollment(&enroll, &layout, EnrollAgg::Concat, "spk")?;

    for norm in NormMode::ALL {
        let cfg = ScoringConfig::attentive(layout, norm);
        println!("{:<14} score {:+.6}", norm.name(), score_trial(&test, &model, &cfg)?);
    }
    let cosine = ScoringConfig::cosine(layout);
    println!("{:<14} score {:+.6}", "cosine", score_trial(&test, &model, &cosine)?);

    // The weights couple every test pair with every enrollment pair.
    let unpacked = |e: &PackedEmbedding| attscore::unpack(e, &layout);
    let t = unpacked(&test)?;
    let (mut keys, mut values) = (Vec::new(), Vec::new());
    for e in &enroll {
        let r = unpacked(e)?;
        keys.extend(r.keys);
        values.extend(r.values);
    }
    let test_side = TestSide::new(&t.queries, &t.values)?;
    let enroll_side = EnrollSide::new(&keys, &values)?;
    for alpha in [0.1, 1.0, 10.0] {
        let w = softmax_weights(&test_side, &enroll_side, alpha)?;
        let peak = w.as_slice().iter().copied().fold(0.0, f64::max);
        println!("alpha {alpha:>4}: {}x{} weights, largest {peak:.3}", w.rows(), w.cols());
    }
    Ok(())
}
