//! Multi-vector late-interaction retrieval over text and image tokens.
//!
//! Queries are a question's token embeddings plus image features projected
//! into the same token space by a small mapping network. Documents are token
//! matrices. Relevance is MaxSim: every query token takes its best-matching
//! document token, and the matches are summed.
//!
//! ```
//! use mvret::{maxsim, TokenMatrix};
//!
//! let q = TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
//! let d = TokenMatrix::from_rows(&[[0.9f32, 0.1], [0.2, 0.8]]).unwrap();
//! assert!((maxsim(&q, &d).unwrap().value() - 1.7).abs() < 1e-6);
//! ```

pub mod compose;
pub mod error;
pub mod index;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scorer;
pub mod store;
pub mod train;

pub use compose::{
    apply_roi_selection, compose_document, compose_query, map_visual, select_rois, ComposeOptions,
};
pub use error::{Error, Result};
pub use index::{search_centroid, search_exact, CentroidIndex, ExactIndex, Hit, Index};
pub use metrics::{
    doc_hit, evaluate, exact_match, hit_success_rate, pr_recall_at_k, vqa_score, MatchPolicy,
    MetricReport,
};
pub use model::{
    BBox, CandidateAnswer, Dims, DocumentRecord, EvalRecord, FeatureKind, MappingNetwork,
    QueryBundle, TokenLabel, TokenMatrix, Validate, ValidationContext, VisualFeature,
};
pub use pipeline::{joint_select, retrieval_probs, run_retrieval, RetrievalResult};
pub use scorer::{dpr_pool, dpr_score, maxsim, maxsim_batch, Aggregation, Score};
pub use train::{contrastive_loss, loss_gradients, train_alignment, BatchScores, TrainConfig};
