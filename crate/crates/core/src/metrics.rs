//! Explanation quality metrics for a (formula, activation range) pair.
//!
//! All ratios with an empty denominator are defined as 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Formula, FormulaError, Op};
use crate::range::RangeMasks;
use crate::store::{ActivationArchive, ConceptStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("masked activations are missing or do not match the activation archive: {0}")]
    MissingMaskedActivations(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub iou: f64,
    pub detacc: f64,
    pub samplecov: f64,
    pub actcov: f64,
    pub explcov: f64,
    pub labmask: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-sample counts of one formula against one range: `|M ∩ S|` and `|S|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaCounts {
    pub inter: Vec<u64>,
    pub label: Vec<u64>,
}

impl FormulaCounts {
    /// Evaluates the formula word by word without materialising its masks.
    pub fn compute(f: &Formula, range: &RangeMasks, store: &ConceptStore) -> Result<Self, FormulaError> {
        let atoms = f.atoms();
        if let Some(&bad) = atoms.iter().find(|&&a| a >= store.n_labels()) {
            return Err(FormulaError::UnknownLabel(format!("#{bad}")));
        }
        let ops = ops_of(f);
        let n = range.n_samples();
        let mut inter = Vec::with_capacity(n);
        let mut label = Vec::with_capacity(n);
        for x in 0..n {
            let m = range.mask(x).words();
            let first = store.mask(x, atoms[0]).words();
            let rest: Vec<&[u64]> = atoms[1..].iter().map(|&a| store.mask(x, a).words()).collect();
            let (mut i_x, mut s_x) = (0u64, 0u64);
            for (wi, &w0) in first.iter().enumerate() {
                let mut w = w0;
                for (op, r) in ops.iter().zip(&rest) {
                    w = match op {
                        Op::Or => w | r[wi],
                        Op::And => w & r[wi],
                        Op::AndNot => w & !r[wi],
                    };
                }
                s_x += w.count_ones() as u64;
                i_x += (w & m[wi]).count_ones() as u64;
            }
            inter.push(i_x);
            label.push(s_x);
        }
        Ok(FormulaCounts { inter, label })
    }

    pub fn total_inter(&self) -> u64 {
        self.inter.iter().sum()
    }

    pub fn total_label(&self) -> u64 {
        self.label.iter().sum()
    }
}

/// Operators in application order.
fn ops_of(f: &Formula) -> Vec<Op> {
    match f {
        Formula::Atom(_) => vec![],
        Formula::Compound { left, op, .. } => {
            let mut v = ops_of(left);
            v.push(*op);
            v
        }
    }
}

/// `Σ|M∩S| / Σ|M∪S|` from totals.
pub fn iou_from_totals(inter: u64, label: u64, m_total: u64) -> f64 {
    ratio(inter, m_total + label - inter)
}

pub fn iou(counts: &FormulaCounts, range: &RangeMasks) -> f64 {
    iou_from_totals(counts.total_inter(), counts.total_label(), range.total())
}

pub fn detection_accuracy(counts: &FormulaCounts) -> f64 {
    ratio(counts.total_inter(), counts.total_label())
}

pub fn samples_coverage(counts: &FormulaCounts) -> f64 {
    let hit = counts.inter.iter().filter(|&&i| i > 0).count() as u64;
    let with_label = counts.label.iter().filter(|&&s| s > 0).count() as u64;
    ratio(hit, with_label)
}

pub fn activation_coverage(counts: &FormulaCounts, range: &RangeMasks) -> f64 {
    ratio(counts.total_inter(), range.total())
}

pub fn explanation_coverage(counts: &FormulaCounts, range: &RangeMasks) -> f64 {
    let hit = counts.inter.iter().filter(|&&i| i > 0).count() as u64;
    let active = range.cards().iter().filter(|&&m| m > 0).count() as u64;
    ratio(hit, active)
}

/// Mean over activated samples of the cosine similarity between the neuron's
/// in-range activations on the original and on the label-masked input.
pub fn label_masking(
    range: &RangeMasks,
    neuron: usize,
    archive: &ActivationArchive,
    masked: &ActivationArchive,
) -> Result<f64, MetricsError> {
    if masked.n_samples() != archive.n_samples()
        || masked.n_neurons() != archive.n_neurons()
        || masked.height() != archive.height()
        || masked.width() != archive.width()
    {
        return Err(MetricsError::MissingMaskedActivations(format!(
            "masked archive `{}` has shape {}x{}x{}x{}, expected {}x{}x{}x{}",
            masked.source_id(),
            masked.n_samples(),
            masked.n_neurons(),
            masked.height(),
            masked.width(),
            archive.n_samples(),
            archive.n_neurons(),
            archive.height(),
            archive.width()
        )));
    }
    let mut sum = 0.0;
    let mut active = 0u64;
    for x in 0..range.n_samples() {
        if range.card(x) == 0 {
            continue;
        }
        active += 1;
        let m = range.mask(x);
        let (orig, mask_in) = (archive.plane(x, neuron), masked.plane(x, neuron));
        let (mut dot, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for (r, c) in m.iter_ones() {
            let i = r * archive.width() + c;
            let (a, b) = (mask_in[i] as f64, orig[i] as f64);
            dot += a * b;
            n1 += a * a;
            n2 += b * b;
        }
        if n1 > 0.0 && n2 > 0.0 {
            sum += (dot / (n1.sqrt() * n2.sqrt())).clamp(-1.0, 1.0);
        }
    }
    Ok(if active == 0 { 0.0 } else { sum / active as f64 })
}

/// Label-masked activation archives keyed by the canonical formula string
/// they were produced for (the archive's `source_id`).
#[derive(Debug, Clone, Default)]
pub struct MaskedSet {
    by_label: HashMap<String, ActivationArchive>,
}

impl MaskedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, archive: ActivationArchive) {
        self.by_label.insert(archive.source_id().to_string(), archive);
    }

    pub fn get(&self, label: &str) -> Option<&ActivationArchive> {
        self.by_label.get(label)
    }

    pub fn len(&self) -> usize {
        self.by_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_label.is_empty()
    }
}

/// Full metric suite. `labmask` is present only when a masked archive for the
/// formula is available.
pub fn metric_suite(
    f: &Formula,
    range: &RangeMasks,
    store: &ConceptStore,
    neuron: usize,
    archive: &ActivationArchive,
    masked: Option<&MaskedSet>,
) -> Result<MetricSuite, MetricsError> {
    let counts = FormulaCounts::compute(f, range, store)?;
    let labmask = match masked.and_then(|set| set.get(&f.canonical_string(store.labels()))) {
        Some(m) => Some(label_masking(range, neuron, archive, m)?),
        None => None,
    };
    Ok(MetricSuite {
        iou: iou(&counts, range),
        detacc: detection_accuracy(&counts),
        samplecov: samples_coverage(&counts),
        actcov: activation_coverage(&counts, range),
        explcov: explanation_coverage(&counts, range),
        labmask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ThresholdInterval;
    use crate::mask::BitMask;

    fn store_one_label(h: usize, w: usize, masks: Vec<BitMask>) -> ConceptStore {
        let n = masks.len();
        ConceptStore::new(n, h, w, vec!["a".into()], masks).unwrap()
    }

    fn range(masks: Vec<BitMask>) -> RangeMasks {
        RangeMasks::from_masks(ThresholdInterval::new(0.0, f64::INFINITY), masks)
    }

    #[test]
    fn aligned_and_disjoint() {
        let a = BitMask::from_fn(4, 4, |r, _| r < 2);
        let store = store_one_label(4, 4, vec![a.clone()]);
        let f = Formula::atom(0);
        let s = metric_suite(&f, &range(vec![a.clone()]), &store, 0, &dummy(1, 4, 4), None).unwrap();
        assert_eq!((s.iou, s.detacc, s.actcov, s.samplecov, s.explcov), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(s.labmask, None);

        let other = BitMask::from_fn(4, 4, |r, _| r >= 2);
        let s = metric_suite(&f, &range(vec![other]), &store, 0, &dummy(1, 4, 4), None).unwrap();
        assert_eq!(s.iou, 0.0);
        assert_eq!(s.samplecov, 0.0);
    }

    fn dummy(n: usize, h: usize, w: usize) -> ActivationArchive {
        ActivationArchive::new(n, 1, h, w, "d", vec![1.0; n * h * w]).unwrap()
    }

    #[test]
    fn ratio_examples() {
        // |S| = 8 (rows 0-1), |M| = 5, overlap 4
        let s = BitMask::from_fn(4, 4, |r, _| r < 2);
        let m = BitMask::from_fn(4, 4, |r, c| (r == 1) || (r == 2 && c == 0));
        let store = store_one_label(4, 4, vec![s]);
        let rg = range(vec![m]);
        let counts = FormulaCounts::compute(&Formula::atom(0), &rg, &store).unwrap();
        assert_eq!((counts.total_inter(), counts.total_label(), rg.total()), (4, 8, 5));
        assert!((iou(&counts, &rg) - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(detection_accuracy(&counts), 0.5);
        assert_eq!(activation_coverage(&counts, &rg), 0.8);
        assert!((iou_from_totals(4, 8, 8) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_denominators() {
        let store = store_one_label(2, 2, vec![BitMask::empty(2, 2)]);
        let rg = range(vec![BitMask::empty(2, 2)]);
        let counts = FormulaCounts::compute(&Formula::atom(0), &rg, &store).unwrap();
        assert_eq!(detection_accuracy(&counts), 0.0);
        assert_eq!(samples_coverage(&counts), 0.0);
        assert_eq!(activation_coverage(&counts, &rg), 0.0);
        assert_eq!(explanation_coverage(&counts, &rg), 0.0);
        assert_eq!(iou(&counts, &rg), 0.0);
    }

    #[test]
    fn sample_level_coverages() {
        // 4 label-bearing samples, overlap in 2 -> samplecov 0.5
        // 4 activated samples, overlap in 3 -> explcov 0.75
        let px = |r, c| BitMask::from_pixels(2, 2, &[(r, c)]);
        let labels = vec![px(0, 0), px(0, 0), px(0, 0), px(0, 0), px(1, 1)];
        let ms = vec![px(0, 0), px(0, 0), px(1, 1), BitMask::empty(2, 2), px(1, 1)];
        let store = store_one_label(2, 2, labels);
        let rg = range(ms);
        let counts = FormulaCounts::compute(&Formula::atom(0), &rg, &store).unwrap();
        assert_eq!(samples_coverage(&counts), 3.0 / 5.0);
        assert_eq!(explanation_coverage(&counts, &rg), 0.75);

        let labels = vec![px(0, 0), px(0, 0), px(0, 0), px(0, 0)];
        let ms = vec![px(0, 0), px(0, 0), px(1, 1), px(1, 1)];
        let rg = range(ms);
        let counts = FormulaCounts::compute(&Formula::atom(0), &rg, &store_one_label(2, 2, labels)).unwrap();
        assert_eq!(samples_coverage(&counts), 0.5);
    }

    #[test]
    fn label_masking_cases() {
        let m = BitMask::from_pixels(2, 2, &[(0, 0), (0, 1)]);
        let rg = range(vec![m]);
        let orig = ActivationArchive::new(1, 1, 2, 2, "orig", vec![1.0, 1.0, 5.0, 5.0]).unwrap();
        assert!((label_masking(&rg, 0, &orig, &orig).unwrap() - 1.0).abs() < 1e-15);

        // inside M: masked (1, 0) vs original (1, 1)
        let masked = ActivationArchive::new(1, 1, 2, 2, "a", vec![1.0, 0.0, 9.0, 9.0]).unwrap();
        let expect = 1.0 / (2.0f64).sqrt();
        assert!((label_masking(&rg, 0, &orig, &masked).unwrap() - expect).abs() < 1e-12);

        let zeros = ActivationArchive::new(1, 1, 2, 2, "a", vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        assert_eq!(label_masking(&rg, 0, &orig, &zeros).unwrap(), 0.0);

        let wrong = ActivationArchive::new(1, 1, 1, 4, "a", vec![0.0; 4]).unwrap();
        assert!(matches!(label_masking(&rg, 0, &orig, &wrong), Err(MetricsError::MissingMaskedActivations(_))));
    }

    #[test]
    fn suite_picks_masked_archive_by_name() {
        let a = BitMask::from_fn(2, 2, |r, _| r == 0);
        let store = store_one_label(2, 2, vec![a.clone()]);
        let orig = ActivationArchive::new(1, 1, 2, 2, "orig", vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let mut set = MaskedSet::new();
        set.insert(ActivationArchive::new(1, 1, 2, 2, "a", vec![1.0, 2.0, 0.0, 0.0]).unwrap());
        let s = metric_suite(&Formula::atom(0), &range(vec![a]), &store, 0, &orig, Some(&set)).unwrap();
        assert!((s.labmask.unwrap() - 1.0).abs() < 1e-15);
    }
}
