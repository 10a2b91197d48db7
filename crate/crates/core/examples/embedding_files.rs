//! Writing and reading embedding files, trial lists and score files.

use attscore::io::{format_scores, join_scores, parse_scores, parse_trials, EmbeddingFile};
use attscore::{compute_eer, score_trial, LayoutConfig, NormMode, PackedEmbedding, ScoringConfig};

fn main() -> attscore::Result<()> {
    let dir = std::env::temp_dir().join("attscore-embedding-files");
    std::fs::create_dir_all(&dir).map_err(|e| attscore::Error::Io {
        context: "creating temp dir".into(),
        source: e,
    })?;
    let layout = LayoutConfig::tied(1, 2, 2)?;

    // Enrollment ids are `speaker:utterance`; records of a speaker are pooled.
    let enroll = EmbeddingFile::new(
        layout,
        vec![
            PackedEmbedding::new("alice:0", vec![1.0, 0.0, 1.0, 0.2]),
            PackedEmbedding::new("alice:1", vec![0.9, 0.1, 0.8, 0.1]),
            PackedEmbedding::new("bob:0", vec![0.0, 1.0, -0.3, 1.0]),
        ],
    )?;
    let test = EmbeddingFile::new(
        layout,
        vec![
            PackedEmbedding::new("x1", vec![1.0, 0.1, 0.9, 0.0]),
            PackedEmbedding::new("x2", vec![0.1, 1.0, -0.2, 0.9]),
        ],
    )?;
    let path = dir.join("enroll.atsf");
    enroll.write(&path)?;
    let back = EmbeddingFile::read(&path)?;
    // Values are stored as f32, so compare the serialized forms.
    let bytes = back.to_bytes()?;
    println!(
        "{} records, {} bytes, round trip exact: {}",
        back.embeddings.len(),
        bytes.len(),
        bytes == enroll.to_bytes()?
    );

    let trials = parse_trials("# enroll\ttest\tlabel\nalice\tx1\ttgt\nalice\tx2\tnon\nbob\tx1\tnon\nbob\tx2\ttgt\n")?;
    let cfg = ScoringConfig::attentive(layout, NormMode::KeyValueL2);
    let models = back.enrollments(cfg.enroll_agg)?;
    let scores: Vec<f64> = trials
        .iter()
        .map(|t| {
            let model = models
                .iter()
                .find(|m| m.speaker_id == t.enroll_speaker_id)
                .expect("speaker");
            score_trial(test.get(&t.test_utterance_id).expect("test"), model, &cfg)
        })
        .collect::<attscore::Result<_>>()?;
    let text = format_scores(&trials, &scores)?;
    print!("{text}");
    let set = join_scores(&trials, &parse_scores(&text)?)?;
    println!("EER {:.2}%", 100.0 * compute_eer(&set)?.eer);
    Ok(())
}
