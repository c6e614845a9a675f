//! Quality-controllable text-to-image retrieval.
//!
//! The crate is organised around the retrieval pipeline:
//!
//! - [`gallery`]: records with unit-norm embeddings, captions and quality scores,
//!   plus the binary embedding format and directory persistence.
//! - [`quantile`]: the percentile function and score-to-level discretization.
//! - [`search`]: cosine scoring and exact top-η selection.
//! - [`completer`]: quality-conditioned query completion and the mock text embedder.
//! - [`evalharness`]: condition-grid evaluation, the rerank baseline and report output.
//! - [`ranklab`]: numerical verification of the rank-increase result for
//!   perturbed query embeddings.
//!
//! Numeric kernels are generic over the scalar type (see [`num::Scalar`] and
//! [`ranklab::RankScalar`]); the aliases below fix the concrete types used by
//! the gallery and the service layer.

pub mod completer;
pub mod evalharness;
pub mod gallery;
pub mod num;
pub mod quantile;
pub mod ranklab;
pub mod search;

pub use completer::{
    build_instruction, mock_embed, CompletionCandidate, CompletionSource, Completer,
    CorpusCompleter, EndpointConfig, ExternalCompleter, IdentityCompleter, MockEmbedder,
    QualityCondition, RandomCompleter, TextEmbedder,
};
pub use evalharness::{EvalConfig, EvalReport, Method};
pub use gallery::{Gallery, GalleryRecord, SchemePair};
pub use num::Scalar;
pub use search::{RetrievalResult, ScoreMatrix};

/// Level scheme over `f64` scores, the type stored on a [`Gallery`].
pub type LevelScheme = quantile::LevelScheme<f64>;

/// Rank-perturbation instance in double precision.
pub type PerturbationInstance = ranklab::PerturbationInstance<f64>;

/// Block decomposition in double precision.
pub type BlockDecomposition = ranklab::BlockDecomposition<f64>;

/// Single-precision variants, mostly useful for checking how the rank
/// verdicts degrade with the working precision.
pub type PerturbationInstanceF32 = ranklab::PerturbationInstance<f32>;
pub type BlockDecompositionF32 = ranklab::BlockDecomposition<f32>;
