//! Activation and concept-mask archives.
//!
//! Both formats share a framing: a five-byte magic, a little-endian `u32`
//! header length, a compact UTF-8 JSON header, then the raw payload.
//!
//! * `NLAA1` activations: `f32` little-endian, ordered sample, neuron, row, col.
//! * `NLCM1` concept masks: one bit-packed mask per (sample, label), sample
//!   major, each mask MSB-first row-major and padded to a whole byte.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{max_extension, min_extension, BitMask, Rect};

pub const ACTIVATION_MAGIC: &[u8; 5] = b"NLAA1";
pub const CONCEPT_MAGIC: &[u8; 5] = b"NLCM1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite activation at sample {sample}, neuron {neuron}, row {row}, col {col}")]
    NonFiniteValue { sample: usize, neuron: usize, row: usize, col: usize },
    #[error("duplicate concept label `{0}`")]
    DuplicateLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ActivationHeader {
    n_samples: usize,
    n_neurons: usize,
    height: usize,
    width: usize,
    source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ConceptHeader {
    n_samples: usize,
    height: usize,
    width: usize,
    labels: Vec<String>,
}

/// Spatial activation maps for every (sample, neuron) pair. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationArchive {
    n_samples: usize,
    n_neurons: usize,
    height: usize,
    width: usize,
    source_id: String,
    data: Vec<f32>,
}

impl ActivationArchive {
    pub fn new(
        n_samples: usize,
        n_neurons: usize,
        height: usize,
        width: usize,
        source_id: impl Into<String>,
        data: Vec<f32>,
    ) -> Result<Self, StoreError> {
        let expected = n_samples * n_neurons * height * width;
        if height == 0 || width == 0 {
            return Err(StoreError::DimMismatch("height and width must be positive".into()));
        }
        if data.len() != expected {
            return Err(StoreError::DimMismatch(format!(
                "header claims {expected} values, payload has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let plane = height * width;
            return Err(StoreError::NonFiniteValue {
                sample: i / (n_neurons * plane),
                neuron: (i / plane) % n_neurons,
                row: (i % plane) / width,
                col: i % width,
            });
        }
        Ok(ActivationArchive { n_samples, n_neurons, height, width, source_id: source_id.into(), data })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `height * width` activation map of `neuron` on `sample`.
    pub fn plane(&self, sample: usize, neuron: usize) -> &[f32] {
        let plane = self.height * self.width;
        let start = (sample * self.n_neurons + neuron) * plane;
        &self.data[start..start + plane]
    }

    /// Every activation of `neuron`, sample-major.
    pub fn neuron_values(&self, neuron: usize) -> impl Iterator<Item = f32> + '_ {
        (0..self.n_samples).flat_map(move |s| self.plane(s, neuron).iter().copied())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let (header, payload): (ActivationHeader, _) = split_frame(bytes, ACTIVATION_MAGIC, "NLAA1")?;
        if payload.len() % 4 != 0 {
            return Err(StoreError::DimMismatch(format!(
                "payload of {} bytes is not a whole number of f32 values",
                payload.len()
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(header.n_samples, header.n_neurons, header.height, header.width, header.source_id, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ActivationHeader {
            n_samples: self.n_samples,
            n_neurons: self.n_neurons,
            height: self.height,
            width: self.width,
            source_id: self.source_id.clone(),
        };
        let mut out = frame(ACTIVATION_MAGIC, &header, self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

/// Cached geometry for one (sample, label) mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskStats {
    pub cardinality: u64,
    pub min_ext: Option<Rect>,
    pub max_ext: Option<Rect>,
}

impl MaskStats {
    pub fn of(mask: &BitMask) -> Self {
        MaskStats { cardinality: mask.count(), min_ext: min_extension(mask), max_ext: max_extension(mask) }
    }
}

/// Binary annotation masks for every (sample, atomic label) pair, with
/// cardinality and extensions computed once at construction.
#[derive(Debug, Clone)]
pub struct ConceptStore {
    n_samples: usize,
    height: usize,
    width: usize,
    labels: Vec<String>,
    masks: Vec<BitMask>,
    stats: Vec<MaskStats>,
}

impl ConceptStore {
    /// `masks` is sample-major: `masks[sample * labels.len() + label]`.
    pub fn new(
        n_samples: usize,
        height: usize,
        width: usize,
        labels: Vec<String>,
        masks: Vec<BitMask>,
    ) -> Result<Self, StoreError> {
        if height == 0 || width == 0 {
            return Err(StoreError::DimMismatch("height and width must be positive".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(StoreError::DuplicateLabel(l.clone()));
            }
        }
        if masks.len() != n_samples * labels.len() {
            return Err(StoreError::DimMismatch(format!(
                "expected {} masks, got {}",
                n_samples * labels.len(),
                masks.len()
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.height() != height || m.width() != width) {
            return Err(StoreError::DimMismatch(format!(
                "mask is {}x{}, store is {height}x{width}",
                m.height(),
                m.width()
            )));
        }
        let stats = masks.iter().map(MaskStats::of).collect();
        Ok(ConceptStore { n_samples, height, width, labels, masks, stats })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn mask(&self, sample: usize, label: usize) -> &BitMask {
        &self.masks[sample * self.labels.len() + label]
    }

    pub fn stats(&self, sample: usize, label: usize) -> &MaskStats {
        &self.stats[sample * self.labels.len() + label]
    }

    /// Check that an activation archive can be paired with this store.
    pub fn check_compatible(&self, archive: &ActivationArchive) -> Result<(), StoreError> {
        if archive.n_samples() != self.n_samples || archive.height() != self.height || archive.width() != self.width {
            return Err(StoreError::DimMismatch(format!(
                "activations are {} samples of {}x{}, concepts are {} samples of {}x{}",
                archive.n_samples(),
                archive.height(),
                archive.width(),
                self.n_samples,
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let (header, payload): (ConceptHeader, _) = split_frame(bytes, CONCEPT_MAGIC, "NLCM1")?;
        let mask_bytes = (header.height * header.width).div_ceil(8);
        let n_masks = header.n_samples * header.labels.len();
        if payload.len() != n_masks * mask_bytes {
            return Err(StoreError::DimMismatch(format!(
                "header claims {n_masks} masks of {mask_bytes} bytes, payload has {} bytes",
                payload.len()
            )));
        }
        let masks = if mask_bytes == 0 {
            vec![BitMask::empty(header.height, header.width); n_masks]
        } else {
            payload.chunks_exact(mask_bytes).map(|c| BitMask::from_packed_msb(header.height, header.width, c)).collect()
        };
        Self::new(header.n_samples, header.height, header.width, header.labels, masks)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ConceptHeader {
            n_samples: self.n_samples,
            height: self.height,
            width: self.width,
            labels: self.labels.clone(),
        };
        let mask_bytes = (self.height * self.width).div_ceil(8);
        let mut out = frame(CONCEPT_MAGIC, &header, self.masks.len() * mask_bytes);
        for m in &self.masks {
            out.extend_from_slice(&m.to_packed_msb());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

fn split_frame<'a, H: for<'de> Deserialize<'de>>(
    bytes: &'a [u8],
    magic: &[u8; 5],
    name: &'static str,
) -> Result<(H, &'a [u8]), StoreError> {
    if bytes.len() < 5 || &bytes[..5] != magic {
        return Err(StoreError::BadMagic { expected: name });
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| StoreError::Header("truncated header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes.get(9..9 + header_len).ok_or_else(|| StoreError::Header("truncated header".into()))?;
    let header = serde_json::from_slice(header_bytes).map_err(|e| StoreError::Header(e.to_string()))?;
    Ok((header, &bytes[9 + header_len..]))
}

fn frame<H: Serialize>(magic: &[u8; 5], header: &H, payload_len: usize) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialization is infallible");
    let mut out = Vec::with_capacity(9 + json.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}
