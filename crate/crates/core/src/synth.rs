//! Deterministic synthetic corpora with planted neuron/concept alignments.
//!
//! Concepts come in two families. *Objects* behave like a segmentation: each
//! sample is painted with a few object rectangles in turn, later ones
//! covering earlier ones, so objects never overlap within a sample.
//! *Attributes* (think textures) are free-floating blobs that overlap objects.
//!
//! A neuron plan assigns an optional formula to every activation cluster.
//! Pixels inside a planted formula's mask get a value from that cluster's
//! band; unplanted clusters draw their pixels from the leftover background.
//! Bands sit at `1, 2, ..., n_cls` with a spread of `2 * BAND_JITTER`, far
//! below the gap between bands, so K-Means recovers them exactly.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::formula::{Formula, Op};
use crate::mask::{eval_formula, BitMask};
use crate::store::{ActivationArchive, ConceptStore, StoreError};

pub const BAND_JITTER: f32 = 0.001;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible plan for neuron {neuron}: {reason}")]
    InfeasiblePlan { neuron: usize, reason: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_cls: usize,
    /// One entry per neuron, each `n_cls` long.
    pub plan: Vec<Vec<Option<Formula>>>,
    /// Probability that a free pixel fires in some unplanted cluster.
    pub background_rate: f64,
    /// Probability that a planted pixel is silenced.
    pub dropout: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn n_atoms(&self) -> usize {
        self.n_objects + self.n_attributes
    }

    pub fn n_neurons(&self) -> usize {
        self.plan.len()
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_objects)
            .map(|i| format!("obj{i:02}"))
            .chain((0..self.n_attributes).map(|i| format!("tex{i:02}")))
            .collect()
    }

    pub fn is_object(&self, atom: usize) -> bool {
        atom < self.n_objects
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlantedEntry {
    pub neuron: usize,
    /// 1-based, matching explanation records.
    pub cluster_index: usize,
    pub formula: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub archive: ActivationArchive,
    pub store: ConceptStore,
    pub truth: Vec<PlantedEntry>,
}

impl SynthCorpus {
    /// Writes `activations.nlaa`, `concepts.nlcm` and `ground_truth.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.archive.write(dir.join("activations.nlaa"))?;
        self.store.write(dir.join("concepts.nlcm"))?;
        let json = serde_json::to_string_pretty(&self.truth).expect("ground truth serializes");
        std::fs::write(dir.join("ground_truth.json"), json)?;
        Ok(())
    }
}

fn random_rect_fill(rng: &mut ChaCha8Rng, h: usize, w: usize, max_frac: f64) -> (usize, usize, usize, usize) {
    let max_h = ((h as f64 * max_frac).ceil() as usize).clamp(1, h);
    let max_w = ((w as f64 * max_frac).ceil() as usize).clamp(1, w);
    let rh = rng.random_range(1..=max_h);
    let rw = rng.random_range(1..=max_w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    (top, left, top + rh - 1, left + rw - 1)
}

/// Concept masks only: objects painted as a segmentation, attributes as blobs.
pub fn generate_concepts(
    n_samples: usize,
    height: usize,
    width: usize,
    n_objects: usize,
    n_attributes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<BitMask>> {
    let n_atoms = n_objects + n_attributes;
    (0..n_samples)
        .map(|_| {
            let mut owner: Vec<Option<usize>> = vec![None; height * width];
            if n_objects > 0 {
                let k = rng.random_range(1..=n_objects.min(6));
                let present = sample_indices(rng, n_objects, k).into_vec();
                for (i, &obj) in present.iter().enumerate() {
                    let (t, l, b, r) = if i == 0 && rng.random_bool(0.5) {
                        (0, 0, height - 1, width - 1)
                    } else {
                        random_rect_fill(rng, height, width, 0.6)
                    };
                    for y in t..=b {
                        for x in l..=r {
                            owner[y * width + x] = Some(obj);
                        }
                    }
                }
            }
            let mut masks: Vec<BitMask> = (0..n_atoms).map(|_| BitMask::empty(height, width)).collect();
            for (i, o) in owner.iter().enumerate() {
                if let Some(obj) = o {
                    masks[*obj].set(i / width, i % width, true);
                }
            }
            for a in 0..n_attributes {
                if !rng.random_bool(0.35) {
                    continue;
                }
                for _ in 0..rng.random_range(1..=3) {
                    let (t, l, b, r) = random_rect_fill(rng, height, width, 0.5);
                    for y in t..=b {
                        for x in l..=r {
                            masks[n_objects + a].set(y, x, true);
                        }
                    }
                }
            }
            masks
        })
        .collect()
}

fn band_value(rng: &mut ChaCha8Rng, cluster: usize) -> f32 {
    (cluster + 1) as f32 + rng.random_range(-BAND_JITTER..=BAND_JITTER)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    let (n, h, w) = (spec.n_samples, spec.height, spec.width);
    if n == 0 || h == 0 || w == 0 || spec.n_cls == 0 || spec.n_atoms() == 0 {
        return Err(SynthError::InvalidSpec("all sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_sample = generate_concepts(n, h, w, spec.n_objects, spec.n_attributes, &mut rng);
    let store = ConceptStore::new(n, h, w, spec.labels(), per_sample.into_iter().flatten().collect())?;

    let plane = h * w;
    let n_neurons = spec.n_neurons();
    let mut data = vec![0.0f32; n * n_neurons * plane];
    let mut truth = Vec::new();

    for (neuron, clusters) in spec.plan.iter().enumerate() {
        let infeasible = |reason: String| SynthError::InfeasiblePlan { neuron, reason };
        if clusters.len() != spec.n_cls {
            return Err(infeasible(format!("plan has {} clusters, expected {}", clusters.len(), spec.n_cls)));
        }
        for f in clusters.iter().flatten() {
            if let Some(&a) = f.atoms().iter().find(|&&a| a >= spec.n_atoms()) {
                return Err(infeasible(format!("unknown atom {a}")));
            }
        }
        let unplanted: Vec<usize> = (0..spec.n_cls).filter(|&k| clusters[k].is_none()).collect();
        let mut fired = vec![0u64; spec.n_cls];
        for x in 0..n {
            let base = (x * n_neurons + neuron) * plane;
            let mut claimed = BitMask::empty(h, w);
            for (k, f) in clusters.iter().enumerate() {
                let Some(f) = f else { continue };
                let m = eval_formula(f, &store, x).expect("atoms checked above");
                if claimed.and_count(&m) > 0 {
                    return Err(infeasible(format!("planted masks overlap on sample {x}")));
                }
                claimed.or_assign(&m);
                for (r, c) in m.iter_ones() {
                    if spec.dropout > 0.0 && rng.random_bool(spec.dropout) {
                        continue;
                    }
                    data[base + r * w + c] = band_value(&mut rng, k);
                    fired[k] += 1;
                }
            }
            if unplanted.is_empty() {
                continue;
            }
            for i in 0..plane {
                if claimed.get(i / w, i % w) || !rng.random_bool(spec.background_rate) {
                    continue;
                }
                let k = unplanted[rng.random_range(0..unplanted.len())];
                data[base + i] = band_value(&mut rng, k);
                fired[k] += 1;
            }
        }
        // every band needs at least one pixel for the clustering to see it
        for k in 0..spec.n_cls {
            if fired[k] > 0 {
                continue;
            }
            if clusters[k].is_some() {
                return Err(infeasible(format!("planted formula for cluster {} is empty everywhere", k + 1)));
            }
            let slot = (0..n).find_map(|x| {
                let base = (x * n_neurons + neuron) * plane;
                (0..plane).find(|&i| data[base + i] == 0.0 && !planted_at(clusters, &store, x, i, w)).map(|i| base + i)
            });
            match slot {
                Some(i) => data[i] = band_value(&mut rng, k),
                None => return Err(infeasible(format!("no free pixel for cluster {}", k + 1))),
            }
        }
        for (k, f) in clusters.iter().enumerate() {
            truth.push(PlantedEntry {
                neuron,
                cluster_index: k + 1,
                formula: f.as_ref().map(|f| f.canonical_string(store.labels())),
            });
        }
    }

    let archive = ActivationArchive::new(n, n_neurons, h, w, format!("synth-{}", spec.seed), data)?;
    Ok(SynthCorpus { archive, store, truth })
}

fn planted_at(clusters: &[Option<Formula>], store: &ConceptStore, x: usize, i: usize, w: usize) -> bool {
    clusters.iter().flatten().any(|f| eval_formula(f, store, x).map(|m| m.get(i / w, i % w)).unwrap_or(false))
}

/// Pick a plan of non-overlapping formulas for `n_neurons` neurons.
///
/// Each planted cluster gets either one object, `(obj OR obj)`,
/// `(obj AND attr)` or `(obj AND NOT attr)`, always on objects unused by the
/// neuron's other clusters, so planted masks are disjoint. Compound formulas
/// are only kept when both sides matter somewhere: the result differs from
/// its left side alone, and the left side is not just the right atom.
pub fn random_plan(store: &ConceptStore, spec: &RandomCorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Option<Formula>>> {
    let RandomCorpusSpec { n_objects, n_attributes, n_neurons, n_cls, planted_per_neuron, .. } = *spec;
    let max_arity = spec.max_plant_arity;
    (0..n_neurons)
        .map(|_| {
            let mut clusters = vec![None; n_cls];
            let slots = sample_indices(rng, n_cls, planted_per_neuron.min(n_cls)).into_vec();
            let mut free_objects: Vec<usize> = (0..n_objects).collect();
            for k in slots {
                for _attempt in 0..20 {
                    if free_objects.is_empty() {
                        break;
                    }
                    let oi = rng.random_range(0..free_objects.len());
                    let a = free_objects[oi];
                    let shape = if max_arity < 2 { 0 } else { rng.random_range(0..4) };
                    let candidate = match shape {
                        1 if free_objects.len() >= 2 => {
                            let mut b = free_objects[rng.random_range(0..free_objects.len())];
                            while b == a {
                                b = free_objects[rng.random_range(0..free_objects.len())];
                            }
                            let (lo, hi) = (a.min(b), a.max(b));
                            Formula::atom(lo).or(hi)
                        }
                        2 if n_attributes > 0 => Formula::atom(a).and(n_objects + rng.random_range(0..n_attributes)),
                        3 if n_attributes > 0 => {
                            Formula::atom(a).and_not(n_objects + rng.random_range(0..n_attributes))
                        }
                        _ => Formula::atom(a),
                    };
                    if plantable(&candidate, store) {
                        free_objects.retain(|o| !candidate.contains_atom(*o));
                        clusters[k] = Some(candidate);
                        break;
                    }
                }
            }
            clusters
        })
        .collect()
}

/// Non-empty somewhere, and for compounds, not equal to either side alone on
/// every sample.
fn plantable(f: &Formula, store: &ConceptStore) -> bool {
    let masks: Vec<BitMask> = (0..store.n_samples()).map(|x| eval_formula(f, store, x).unwrap()).collect();
    let total: u64 = masks.iter().map(BitMask::count).sum();
    if total == 0 {
        return false;
    }
    match f {
        Formula::Atom(_) => true,
        Formula::Compound { left, op, right } => {
            let same_as = |g: &Formula| (0..store.n_samples()).all(|x| eval_formula(g, store, x).unwrap() == masks[x]);
            let differs_from_left = !same_as(left);
            let differs_from_right = *op == Op::AndNot || !same_as(&Formula::atom(*right));
            differs_from_left && differs_from_right
        }
    }
}

/// Corpus with random planted plans, the usual entry point for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCorpusSpec {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_neurons: usize,
    pub n_cls: usize,
    pub planted_per_neuron: usize,
    pub max_plant_arity: usize,
    pub background_rate: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl RandomCorpusSpec {
    /// Concepts are generated once to pick a feasible plan; [`generate`]
    /// regenerates the identical concepts from the same seed.
    pub fn to_spec(&self) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let per_sample =
            generate_concepts(self.n_samples, self.height, self.width, self.n_objects, self.n_attributes, &mut rng);
        let labels = (0..self.n_objects + self.n_attributes).map(|i| i.to_string()).collect();
        let store = ConceptStore::new(
            self.n_samples,
            self.height,
            self.width,
            labels,
            per_sample.into_iter().flatten().collect(),
        )
        .expect("generated concepts are well formed");
        let mut plan_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let plan = random_plan(&store, self, &mut plan_rng);
        SynthSpec {
            n_samples: self.n_samples,
            height: self.height,
            width: self.width,
            n_objects: self.n_objects,
            n_attributes: self.n_attributes,
            n_cls: self.n_cls,
            plan,
            background_rate: self.background_rate,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn generate(&self) -> Result<SynthCorpus, SynthError> {
        generate(&self.to_spec())
    }
}
