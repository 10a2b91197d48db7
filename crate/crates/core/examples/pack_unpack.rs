//! Packing query/key/value triplets into one flat embedding and back.

use attscore::{pack, unpack, LayoutConfig, PackedEmbedding, UnpackedRepresentation};

fn main() -> attscore::Result<()> {
    // Two pairs, 2-dim queries and keys, 3-dim values.
    let independent = LayoutConfig::independent(2, 2, 3)?;
    let tied = LayoutConfig::tied(2, 2, 3)?;
    println!("independent layout: {} floats per utterance", independent.total_dim());
    println!("tied layout:        {} floats per utterance", tied.total_dim());

    let flat: Vec<f64> = (0..independent.total_dim()).map(|i| i as f64).collect();
    let rep = unpack(&PackedEmbedding::new("utt1", flat), &independent)?;
    for m in 0..independent.num_pairs {
        println!(
            "pair {m}: q={:?} k={:?} v={:?}",
            rep.queries[m], rep.keys[m], rep.values[m]
        );
    }

    // In a tied layout one block serves as both query and key.
    let rep = UnpackedRepresentation {
        queries: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        keys: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        values: vec![vec![0.5, 0.5, 0.5], vec![-1.0, 2.0, 0.0]],
    };
    let packed = pack(&rep, &tied, "utt2")?;
    println!("tied packed: {:?}", packed.vec);
    assert_eq!(unpack(&packed, &tied)?, rep);
    Ok(())
}
