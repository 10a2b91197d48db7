//! Streaming attentive statistics pooling: statistics are available after
//! every frame.

use attscore::{pool_finalize, pool_step, PoolingParams, PoolingState};

fn main() -> attscore::Result<()> {
    let params = PoolingParams {
        weight_vec: vec![2.0, 0.0],
        weight_bias: -1.0,
    };
    let frames = [[0.1, 5.0], [1.5, 4.0], [2.0, 6.0], [-0.5, 5.5], [1.0, 4.5]];

    let mut state = PoolingState::new(2);
    println!("frame  weight   mean            std");
    for (t, f) in frames.iter().enumerate() {
        let w = params.frame_weight(f);
        state = pool_step(&state, f, &params)?;
        let stats = pool_finalize(&state)?;
        println!(
            "{t:>5}  {w:.3}    [{:.3}, {:.3}]  [{:.3}, {:.3}]",
            stats[0], stats[1], stats[2], stats[3]
        );
    }
    Ok(())
}
