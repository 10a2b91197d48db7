//! Parameter-free attentive scoring of packed speaker embeddings.
//!
//! Each utterance embedding packs `M` query/key/value triplets
//! ([`layout`]). A test utterance is scored against an enrollment model by a
//! softmax-weighted sum of value dot products ([`score`]), optionally with
//! one of several normalizations ([`normalize`]). The crate also provides
//! analytic gradients ([`grad`]), attentive temporal pooling ([`pooling`]),
//! EER evaluation ([`eval`]), a synthetic-speaker trainer ([`train`]),
//! ablation runs ([`ablation`]), and the file formats ([`io`]) and
//! file-level workflows ([`pipeline`]) behind the `attscore` command-line
//! tool.

pub mod ablation;
pub mod enroll;
pub mod error;
pub mod eval;
pub mod grad;
pub mod io;
pub mod layout;
pub mod normalize;
pub mod pipeline;
pub mod pooling;
pub mod score;
pub mod train;

pub use enroll::{build_enrollment, enrollment_footprint, EnrollAgg, EnrollmentModel};
pub use error::{Error, ErrorClass, Result};
pub use eval::{compute_det_points, compute_eer, EerResult, ScoreSet, Trial, TrialLabel};
pub use grad::{compare_gradients, fd_gradient, score_grad, GradCheck, ScoreGradient};
pub use io::{EmbeddingFile, RunConfig, ScoringSection};
pub use layout::{pack, unpack, LayoutConfig, PackedEmbedding, UnpackedRepresentation};
pub use normalize::{l2_normalize, layer_normalize, LayerNormParams, NormMode};
pub use pooling::{pool_finalize, pool_step, PoolingParams, PoolingState};
pub use score::{
    score_attentive, score_cosine_baseline, score_global_l2, score_trial, softmax_weights, EnrollSide, ScoreMethod,
    ScoringConfig, TestSide, WeightMatrix,
};
pub use train::{
    batch_loss, ge2e_xs_loss, synth_generate, train, BatchSpec, Dataset, InitSpec, SynthSpec, ToyModel, TrainConfig,
    TrainOutcome,
};
