//! Upper bounds on the IoU of a candidate formula, computed from per-sample
//! counts and extension rectangles only.
//!
//! Every bound here is admissible: it never falls below the exact IoU, which
//! is what lets the beam search skip exact evaluations without changing its
//! answer. The estimates for a formula `left OP right` need:
//!
//! * `|M(x)|` per sample and `Σ|M|` for the activation range,
//! * `IMS(x, t) = |M(x) ∩ S(x, t)|` for the left formula and the right atom,
//!   filled in while the previous search level was evaluated exactly,
//! * `|S(x, t)|` and the min/max extension rectangles for both sides.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Formula, Op};
use crate::mask::{max_extension, min_extension, rect_overlap_area, BitMask, Rect};
use crate::range::RangeMasks;
use crate::store::ConceptStore;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeuristicError {
    #[error("no cached intersections for the left side of the candidate")]
    MissingCache,
    #[error("heuristics only bound compound formulas")]
    NotCompound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicKind {
    /// Min-max extension per sample.
    Mmesh,
    /// Coordinates-free: drops the label-size estimate.
    Cfh,
    /// Mask sizes only, no cached intersections.
    Areas,
    /// No bound; every candidate is evaluated.
    None,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 4] =
        [HeuristicKind::Mmesh, HeuristicKind::Cfh, HeuristicKind::Areas, HeuristicKind::None];

    pub fn as_str(self) -> &'static str {
        match self {
            HeuristicKind::Mmesh => "mmesh",
            HeuristicKind::Cfh => "cfh",
            HeuristicKind::Areas => "areas",
            HeuristicKind::None => "none",
        }
    }
}

impl std::str::FromStr for HeuristicKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeuristicKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown heuristic `{s}` (expected mmesh, cfh, areas or none)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicEstimate {
    /// Σ over samples of the estimated intersection.
    pub i_hat: u64,
    /// Σ over samples of the estimated label mask size.
    pub s_hat: u64,
    pub iou_upper: f64,
}

/// Per-sample statistics of one exactly evaluated formula.
#[derive(Debug, Clone, PartialEq)]
pub struct TermStats {
    pub ims: Vec<u64>,
    pub card: Vec<u64>,
    pub min_ext: Vec<Option<Rect>>,
    pub max_ext: Vec<Option<Rect>>,
}

impl TermStats {
    /// Statistics of `label_masks[x]` against the range masks.
    pub fn from_masks(range: &RangeMasks, label_masks: &[BitMask]) -> Self {
        let n = label_masks.len();
        let mut stats = TermStats {
            ims: Vec::with_capacity(n),
            card: Vec::with_capacity(n),
            min_ext: Vec::with_capacity(n),
            max_ext: Vec::with_capacity(n),
        };
        for (x, s) in label_masks.iter().enumerate() {
            stats.ims.push(range.mask(x).and_count(s));
            stats.card.push(s.count());
            stats.min_ext.push(min_extension(s));
            stats.max_ext.push(max_extension(s));
        }
        stats
    }
}

/// Cached intersections for one activation range.
#[derive(Debug, Clone)]
pub struct ImsCache {
    m_card: Vec<u64>,
    m_total: u64,
    size: u64,
    /// `atom_ims[label][sample]`
    atom_ims: Vec<Vec<u64>>,
    formulas: HashMap<Formula, TermStats>,
}

impl ImsCache {
    pub fn new(m_card: Vec<u64>, size: u64, atom_ims: Vec<Vec<u64>>) -> Self {
        let m_total = m_card.iter().sum();
        ImsCache { m_card, m_total, size, atom_ims, formulas: HashMap::new() }
    }

    /// Exact intersections of every atom with the range masks.
    pub fn for_range(range: &RangeMasks, store: &ConceptStore) -> Self {
        let atom_ims = (0..store.n_labels())
            .map(|l| (0..range.n_samples()).map(|x| range.mask(x).and_count(store.mask(x, l))).collect())
            .collect();
        Self::new(range.cards().to_vec(), (store.height() * store.width()) as u64, atom_ims)
    }

    pub fn m_card(&self, sample: usize) -> u64 {
        self.m_card[sample]
    }

    pub fn m_total(&self) -> u64 {
        self.m_total
    }

    pub fn n_samples(&self) -> usize {
        self.m_card.len()
    }

    pub fn atom_ims(&self, label: usize) -> &[u64] {
        &self.atom_ims[label]
    }

    pub fn insert(&mut self, formula: Formula, stats: TermStats) {
        self.formulas.insert(formula, stats);
    }

    pub fn get(&self, formula: &Formula) -> Option<&TermStats> {
        self.formulas.get(formula)
    }

    fn side<'a>(&'a self, f: &Formula, store: &'a ConceptStore) -> Result<Side<'a>, HeuristicError> {
        match f {
            Formula::Atom(a) => Ok(Side::Atom { label: *a, ims: &self.atom_ims[*a], store }),
            compound => self.formulas.get(compound).map(Side::Formula).ok_or(HeuristicError::MissingCache),
        }
    }
}

enum Side<'a> {
    Atom { label: usize, ims: &'a [u64], store: &'a ConceptStore },
    Formula(&'a TermStats),
}

impl Side<'_> {
    fn ims(&self, x: usize) -> u64 {
        match self {
            Side::Atom { ims, .. } => ims[x],
            Side::Formula(t) => t.ims[x],
        }
    }

    fn card(&self, x: usize) -> u64 {
        match self {
            Side::Atom { label, store, .. } => store.stats(x, *label).cardinality,
            Side::Formula(t) => t.card[x],
        }
    }

    fn exts(&self, x: usize) -> (Option<&Rect>, Option<&Rect>) {
        match self {
            Side::Atom { label, store, .. } => {
                let st = store.stats(x, *label);
                (st.min_ext.as_ref(), st.max_ext.as_ref())
            }
            Side::Formula(t) => (t.min_ext[x].as_ref(), t.max_ext[x].as_ref()),
        }
    }
}

/// Best-case intersection of `left OP right` with `M(x)`.
pub fn estimate_intersection(op: Op, ims_left: u64, ims_right: u64, m_card: u64) -> u64 {
    match op {
        Op::Or => (ims_left + ims_right).min(m_card),
        Op::And => ims_left.min(ims_right),
        Op::AndNot => ims_left.min(m_card.saturating_sub(ims_right)),
    }
}

/// Worst-case (smallest) size of the label mask of `left OP right`.
pub fn estimate_label(op: Op, s_left: u64, s_right: u64, min_over: u64, max_over: u64, i_hat_x: u64) -> u64 {
    match op {
        Op::Or => s_left.max(s_right).max((s_left + s_right).saturating_sub(max_over)).max(i_hat_x),
        Op::And => min_over.max(i_hat_x),
        Op::AndNot => s_left.saturating_sub(max_over).max(i_hat_x),
    }
}

/// `(min_over, max_over)` for one sample: the overlap of the two sides'
/// inscribed rectangles and of their bounding boxes.
pub fn over_bounds(
    store: &ConceptStore,
    sample: usize,
    right: usize,
    left_min_ext: Option<&Rect>,
    left_max_ext: Option<&Rect>,
) -> (u64, u64) {
    let st = store.stats(sample, right);
    (rect_overlap_area(left_min_ext, st.min_ext.as_ref()), rect_overlap_area(left_max_ext, st.max_ext.as_ref()))
}

fn split(f: &Formula) -> Result<(&Formula, Op, usize), HeuristicError> {
    match f {
        Formula::Compound { left, op, right } => Ok((left, *op, *right)),
        Formula::Atom(_) => Err(HeuristicError::NotCompound),
    }
}

/// `Î / (Σ|M| + Ŝ − Î)`, 0 when the denominator vanishes.
fn extended_iou(i_hat: u64, s_hat: u64, m_total: u64) -> f64 {
    let denom = m_total + s_hat - i_hat;
    if denom == 0 {
        0.0
    } else {
        i_hat as f64 / denom as f64
    }
}

/// `Î / (Σ|M| − Î)`, capped at 1.
fn label_free_iou(i_hat: u64, m_total: u64) -> f64 {
    if i_hat == 0 {
        0.0
    } else if i_hat >= m_total {
        1.0
    } else {
        (i_hat as f64 / (m_total - i_hat) as f64).min(1.0)
    }
}

pub fn mmesh_estimate(
    f: &Formula,
    cache: &ImsCache,
    store: &ConceptStore,
) -> Result<HeuristicEstimate, HeuristicError> {
    let (left, op, right) = split(f)?;
    let l = cache.side(left, store)?;
    let r = cache.side(&Formula::Atom(right), store)?;
    let (mut i_hat, mut s_hat) = (0u64, 0u64);
    for x in 0..cache.n_samples() {
        let i_x = estimate_intersection(op, l.ims(x), r.ims(x), cache.m_card[x]);
        let (l_min, l_max) = l.exts(x);
        let (min_over, max_over) = over_bounds(store, x, right, l_min, l_max);
        let s_x = estimate_label(op, l.card(x), r.card(x), min_over, max_over, i_x);
        i_hat += i_x;
        s_hat += s_x;
    }
    Ok(HeuristicEstimate { i_hat, s_hat, iou_upper: extended_iou(i_hat, s_hat, cache.m_total) })
}

pub fn cfh_estimate(f: &Formula, cache: &ImsCache, store: &ConceptStore) -> Result<HeuristicEstimate, HeuristicError> {
    let (left, op, right) = split(f)?;
    let l = cache.side(left, store)?;
    let r = &cache.atom_ims[right];
    let i_hat = (0..cache.n_samples()).map(|x| estimate_intersection(op, l.ims(x), r[x], cache.m_card[x])).sum();
    Ok(HeuristicEstimate { i_hat, s_hat: 0, iou_upper: label_free_iou(i_hat, cache.m_total) })
}

pub fn areas_estimate(
    f: &Formula,
    cache: &ImsCache,
    store: &ConceptStore,
) -> Result<HeuristicEstimate, HeuristicError> {
    let (left, op, right) = split(f)?;
    let l = cache.side(left, store)?;
    let mut i_hat = 0u64;
    for x in 0..cache.n_samples() {
        let (s_l, s_r) = (l.card(x), store.stats(x, right).cardinality);
        i_hat += match op {
            Op::Or => (s_l + s_r).min(cache.m_card[x]),
            Op::And => s_l.min(s_r),
            Op::AndNot => s_l.min(cache.size.saturating_sub(s_r)),
        };
    }
    Ok(HeuristicEstimate { i_hat, s_hat: 0, iou_upper: label_free_iou(i_hat, cache.m_total) })
}

/// Dispatch by kind; [`HeuristicKind::None`] bounds everything by `+inf`.
pub fn estimate(
    kind: HeuristicKind,
    f: &Formula,
    cache: &ImsCache,
    store: &ConceptStore,
) -> Result<HeuristicEstimate, HeuristicError> {
    match kind {
        HeuristicKind::Mmesh => mmesh_estimate(f, cache, store),
        HeuristicKind::Cfh => cfh_estimate(f, cache, store),
        HeuristicKind::Areas => areas_estimate(f, cache, store),
        HeuristicKind::None => Ok(HeuristicEstimate { i_hat: 0, s_hat: 0, iou_upper: f64::INFINITY }),
    }
}
