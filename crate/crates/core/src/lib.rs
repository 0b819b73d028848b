//! Neuron explanations over activation ranges.
//!
//! A neuron's non-zero activations are clustered into disjoint ranges; each
//! range is binarized into per-sample masks, and a beam search over logical
//! formulas of dataset concepts (OR, AND, AND NOT) looks for the formula whose
//! annotation masks best overlap the range by intersection over union.
//! Admissible upper bounds on IoU let the search skip exact evaluations.

/// Version of this engine, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod cluster;
pub mod formula;
pub mod heuristics;
pub mod mask;
pub mod metrics;
pub mod range;
pub mod record;
pub mod search;
pub mod store;
pub mod synth;

pub use cluster::{
    cluster_thresholds, kmeans_1d, quantile_interval, ClusterError, ClusterSet, KMeansConfig, ThresholdInterval,
};
pub use formula::{Formula, FormulaError, Op};
pub use heuristics::{HeuristicEstimate, HeuristicKind, ImsCache, TermStats};
pub use mask::{binarize, eval_formula, max_extension, min_extension, rect_overlap_area, BitMask, MaskError, Rect};
pub use metrics::MetricSuite;
pub use range::RangeMasks;
pub use record::ExplanationRecord;
pub use search::{
    beam_search, clustered_compositional, coex_beam, explain_neurons, legacy_mode, netdissect, BeamOutcome, Objective,
    RangeMode, SearchConfig, SearchError,
};
pub use store::{ActivationArchive, ConceptStore, MaskStats, StoreError};
pub use synth::{generate, RandomCorpusSpec, SynthCorpus, SynthError, SynthSpec};
