//! Exhaustive atomic search, heuristic-pruned beam search over formulas, and
//! the per-cluster explanation driver.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_thresholds, quantile_interval, ClusterError, KMeansConfig, ThresholdInterval};
use crate::formula::{Formula, FormulaError, DEFAULT_MAX_ARITY};
use crate::heuristics::{estimate, HeuristicError, HeuristicKind, ImsCache, TermStats};
use crate::mask::{eval_formula, MaskError};
use crate::metrics::{iou_from_totals, metric_suite, FormulaCounts, MaskedSet, MetricsError};
use crate::range::RangeMasks;
use crate::record::{finite_or_none, ExplanationRecord};
use crate::store::{ActivationArchive, ConceptStore, StoreError};

pub const DEFAULT_BEAM_WIDTH: usize = 10;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Iou,
    DetAcc,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Iou => "iou",
            Objective::DetAcc => "detacc",
        }
    }

    /// Score from dataset totals `Σ|M∩S|`, `Σ|S|` and `Σ|M|`.
    pub fn score(self, inter: u64, label: u64, m_total: u64) -> f64 {
        match self {
            Objective::Iou => iou_from_totals(inter, label, m_total),
            Objective::DetAcc => {
                if label == 0 {
                    0.0
                } else {
                    inter as f64 / label as f64
                }
            }
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iou" => Ok(Objective::Iou),
            "detacc" => Ok(Objective::DetAcc),
            _ => Err(format!("unknown objective `{s}` (expected iou or detacc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub max_arity: usize,
    pub heuristic: HeuristicKind,
    pub objective: Objective,
    pub n_cls: usize,
    pub seed: u64,
    #[serde(skip)]
    pub kmeans: KMeansConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_arity: DEFAULT_MAX_ARITY,
            heuristic: HeuristicKind::Mmesh,
            objective: Objective::Iou,
            n_cls: crate::cluster::DEFAULT_N_CLUSTERS,
            seed: 0,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.beam_width == 0 {
            return Err(SearchError::InvalidConfig("beam width must be at least 1".into()));
        }
        if self.max_arity == 0 {
            return Err(SearchError::InvalidConfig("max arity must be at least 1".into()));
        }
        if self.n_cls == 0 {
            return Err(SearchError::InvalidConfig("number of clusters must be at least 1".into()));
        }
        Ok(())
    }

    /// Bounds are only proven for IoU, so other objectives search unpruned.
    pub fn effective_heuristic(&self) -> HeuristicKind {
        match self.objective {
            Objective::Iou => self.heuristic,
            Objective::DetAcc => HeuristicKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamCandidate {
    pub formula: Formula,
    pub exact_score: Option<f64>,
    pub upper_bound: f64,
    pub ims_by_sample: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    pub best: BeamCandidate,
    /// Exact objective evaluations, level 1 included.
    pub visited_labels: u64,
    pub visited_per_level: Vec<u64>,
}

impl BeamOutcome {
    pub fn score(&self) -> f64 {
        self.best.exact_score.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetDissect {
    /// Exact IoU of every atom, by label index.
    pub scores: Vec<f64>,
    pub best: usize,
}

/// Exact IoU of every atomic concept; ties go to the lower label index.
pub fn netdissect(
    archive: &ActivationArchive,
    store: &ConceptStore,
    neuron: usize,
    interval: ThresholdInterval,
) -> Result<NetDissect, SearchError> {
    store.check_compatible(archive)?;
    let range = RangeMasks::new(archive, neuron, interval)?;
    Ok(netdissect_range(&range, store, &ImsCache::for_range(&range, store)))
}

pub fn netdissect_range(range: &RangeMasks, store: &ConceptStore, cache: &ImsCache) -> NetDissect {
    let scores: Vec<f64> = (0..store.n_labels())
        .map(|l| {
            let inter = cache.atom_ims(l).iter().sum();
            let label = (0..store.n_samples()).map(|x| store.stats(x, l).cardinality).sum();
            iou_from_totals(inter, label, range.total())
        })
        .collect();
    let mut best = 0;
    for (l, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = l;
        }
    }
    NetDissect { scores, best }
}

/// A scored formula inside a level's ranking.
struct Ranked {
    score: f64,
    key: String,
    candidate: BeamCandidate,
}

/// Higher score first, then lexicographically smaller canonical string.
fn rank_order(a_score: f64, a_key: &str, b_score: f64, b_key: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_key.cmp(b_key))
}

fn push_ranked(top: &mut Vec<Ranked>, item: Ranked, width: usize) {
    let pos = top.partition_point(|r| rank_order(r.score, &r.key, item.score, &item.key) == Ordering::Less);
    if pos < width {
        top.insert(pos, item);
        top.truncate(width);
    }
}

fn evaluate(
    formula: Formula,
    upper_bound: f64,
    range: &RangeMasks,
    store: &ConceptStore,
    objective: Objective,
) -> Result<(f64, BeamCandidate), SearchError> {
    let counts = FormulaCounts::compute(&formula, range, store)?;
    let score = objective.score(counts.total_inter(), counts.total_label(), range.total());
    let candidate = BeamCandidate { formula, exact_score: Some(score), upper_bound, ims_by_sample: counts.inter };
    Ok((score, candidate))
}

/// Beam search over formulas for one activation range.
///
/// Level 1 scores every atom exactly. Each later level expands every beam
/// member by one atom, bounds the candidates with the configured heuristic,
/// and evaluates them exactly in decreasing-bound order. A candidate is
/// skipped once its bound falls below the score it would have to beat:
/// the current `b`-th best of the level on intermediate levels (so the next
/// beam is exactly the unpruned one), and the best score found so far on
/// the last level. The answer is the best exact score across levels; a
/// longer formula replaces a shorter one only if it scores strictly higher.
pub fn beam_search(range: &RangeMasks, store: &ConceptStore, cfg: &SearchConfig) -> Result<BeamOutcome, SearchError> {
    cfg.validate()?;
    let labels = store.labels();
    let n_labels = store.n_labels();
    if n_labels == 0 {
        return Err(SearchError::InvalidConfig("concept store has no labels".into()));
    }
    let heuristic = cfg.effective_heuristic();
    let mut cache = ImsCache::for_range(range, store);
    let all_atoms: Vec<usize> = (0..n_labels).collect();

    let mut level: Vec<Ranked> = Vec::with_capacity(cfg.beam_width + 1);
    for (l, label) in labels.iter().enumerate() {
        let (score, candidate) = evaluate(Formula::Atom(l), f64::INFINITY, range, store, cfg.objective)?;
        push_ranked(&mut level, Ranked { score, key: label.clone(), candidate }, cfg.beam_width);
    }
    let mut visited_per_level = vec![n_labels as u64];
    let mut best = (level[0].score, level[0].candidate.clone());

    for arity in 2..=cfg.max_arity {
        let last_level = arity == cfg.max_arity;
        let mut candidates = Vec::new();
        for member in &level {
            let f = &member.candidate.formula;
            if !f.is_atom() && heuristic != HeuristicKind::None && cache.get(f).is_none() {
                let masks = (0..store.n_samples()).map(|x| eval_formula(f, store, x)).collect::<Result<Vec<_>, _>>()?;
                cache.insert(f.clone(), TermStats::from_masks(range, &masks));
            }
            for c in f.expand(&all_atoms, cfg.max_arity)? {
                let bound = estimate(heuristic, &c, &cache, store)?.iou_upper;
                let key = c.canonical_string(labels);
                candidates.push((bound, key, c));
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| rank_order(a.0, &a.1, b.0, &b.1));

        let mut next: Vec<Ranked> = Vec::with_capacity(cfg.beam_width + 1);
        let mut visited = 0u64;
        for (bound, key, formula) in candidates {
            let threshold = if last_level {
                next.first().map_or(best.0, |r| r.score.max(best.0))
            } else if next.len() == cfg.beam_width {
                next[cfg.beam_width - 1].score
            } else {
                f64::NEG_INFINITY
            };
            if bound < threshold {
                break;
            }
            let (score, candidate) = evaluate(formula, bound, range, store, cfg.objective)?;
            visited += 1;
            push_ranked(&mut next, Ranked { score, key, candidate }, cfg.beam_width);
        }
        visited_per_level.push(visited);
        if next.is_empty() {
            break;
        }
        if next[0].score > best.0 {
            best = (next[0].score, next[0].candidate.clone());
        }
        level = next;
    }

    Ok(BeamOutcome { best: best.1, visited_labels: visited_per_level.iter().sum(), visited_per_level })
}

/// [`beam_search`] on the binarized range `[interval.lo, interval.hi]` of `neuron`.
pub fn coex_beam(
    archive: &ActivationArchive,
    store: &ConceptStore,
    neuron: usize,
    interval: ThresholdInterval,
    cfg: &SearchConfig,
) -> Result<BeamOutcome, SearchError> {
    store.check_compatible(archive)?;
    let range = RangeMasks::new(archive, neuron, interval)?;
    beam_search(&range, store, cfg)
}

/// Search one range and attach the metric suite.
pub fn explain_range(
    archive: &ActivationArchive,
    store: &ConceptStore,
    neuron: usize,
    cluster_index: usize,
    interval: ThresholdInterval,
    cfg: &SearchConfig,
    masked: Option<&MaskedSet>,
) -> Result<ExplanationRecord, SearchError> {
    let start = Instant::now();
    let range = RangeMasks::new(archive, neuron, interval)?;
    let outcome = beam_search(&range, store, cfg)?;
    let formula = &outcome.best.formula;
    let m = metric_suite(formula, &range, store, neuron, archive, masked)?;
    Ok(ExplanationRecord {
        neuron,
        cluster_index,
        interval_lo: interval.lo,
        interval_hi: finite_or_none(interval.hi),
        formula: formula.canonical_string(store.labels()),
        iou: m.iou,
        detacc: m.detacc,
        samplecov: m.samplecov,
        actcov: m.actcov,
        explcov: m.explcov,
        labmask: m.labmask,
        visited_labels: outcome.visited_labels,
        wall_time_ms: Some(start.elapsed().as_millis() as u64),
    })
}

/// One record per activation cluster, lowest activations first.
pub fn clustered_compositional(
    archive: &ActivationArchive,
    store: &ConceptStore,
    neuron: usize,
    cfg: &SearchConfig,
    masked: Option<&MaskedSet>,
) -> Result<Vec<ExplanationRecord>, SearchError> {
    cfg.validate()?;
    store.check_compatible(archive)?;
    let set = cluster_thresholds(archive, neuron, cfg.n_cls, cfg.seed, cfg.kmeans)?;
    set.intervals
        .iter()
        .enumerate()
        .map(|(i, iv)| explain_range(archive, store, neuron, i + 1, *iv, cfg, masked))
        .collect()
}

/// The single top-quantile range `[v_q, +inf)`; with `max_arity = 1` this is
/// plain network dissection.
pub fn legacy_mode(
    archive: &ActivationArchive,
    store: &ConceptStore,
    neuron: usize,
    q: f64,
    cfg: &SearchConfig,
    masked: Option<&MaskedSet>,
) -> Result<ExplanationRecord, SearchError> {
    cfg.validate()?;
    store.check_compatible(archive)?;
    let interval = quantile_interval(archive, neuron, q)?;
    explain_range(archive, store, neuron, 0, interval, cfg, masked)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeMode {
    Clustered,
    TopQuantile(f64),
}

/// Explain many neurons on the current rayon pool.
///
/// Clustering runs per neuron, then every (neuron, range) pair is an
/// independent task. Results come back in (neuron, cluster) order whatever
/// the scheduling.
pub fn explain_neurons(
    archive: &ActivationArchive,
    store: &ConceptStore,
    neurons: &[usize],
    mode: RangeMode,
    cfg: &SearchConfig,
    masked: Option<&MaskedSet>,
) -> Result<Vec<ExplanationRecord>, SearchError> {
    cfg.validate()?;
    store.check_compatible(archive)?;
    let tasks: Vec<(usize, usize, ThresholdInterval)> = neurons
        .par_iter()
        .map(|&n| -> Result<Vec<_>, SearchError> {
            Ok(match mode {
                RangeMode::Clustered => cluster_thresholds(archive, n, cfg.n_cls, cfg.seed, cfg.kmeans)?
                    .intervals
                    .into_iter()
                    .enumerate()
                    .map(|(i, iv)| (n, i + 1, iv))
                    .collect(),
                RangeMode::TopQuantile(q) => vec![(n, 0, quantile_interval(archive, n, q)?)],
            })
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    tasks.par_iter().map(|&(n, ci, iv)| explain_range(archive, store, n, ci, iv, cfg, masked)).collect()
}
