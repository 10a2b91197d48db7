//! Equal error rate and detection tradeoff points from labelled scores.

use attscore::{compute_det_points, compute_eer, ScoreSet};

fn main() -> attscore::Result<()> {
    let set = ScoreSet::from_scores(&[0.8, 0.6, 0.4], &[0.7, 0.5, 0.3])?;
    for p in compute_det_points(&set)? {
        println!("threshold {:>4}  FAR {:.3}  FRR {:.3}", p.threshold, p.far, p.frr);
    }
    let r = compute_eer(&set)?;
    println!("EER {:.2}% at threshold {:.3}", 100.0 * r.eer, r.threshold);

    // Ties count against the system.
    let tied = compute_eer(&ScoreSet::from_scores(&[0.5, 0.9], &[0.5, 0.1])?)?;
    println!("with a tied pair: EER {:.2}%", 100.0 * tied.eer);
    Ok(())
}
