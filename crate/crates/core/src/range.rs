//! Binarized activation masks of one neuron over one activation range.

use crate::cluster::ThresholdInterval;
use crate::mask::{binarize, BitMask, MaskError};
use crate::store::ActivationArchive;

/// `M(x)` for every sample, with per-sample and total cardinalities.
#[derive(Debug, Clone)]
pub struct RangeMasks {
    pub interval: ThresholdInterval,
    masks: Vec<BitMask>,
    cards: Vec<u64>,
    total: u64,
}

impl RangeMasks {
    pub fn new(archive: &ActivationArchive, neuron: usize, interval: ThresholdInterval) -> Result<Self, MaskError> {
        let masks = (0..archive.n_samples())
            .map(|s| binarize(archive.plane(s, neuron), archive.height(), archive.width(), interval.lo, interval.hi))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_masks(interval, masks))
    }

    pub fn from_masks(interval: ThresholdInterval, masks: Vec<BitMask>) -> Self {
        let cards: Vec<u64> = masks.iter().map(BitMask::count).collect();
        let total = cards.iter().sum();
        RangeMasks { interval, masks, cards, total }
    }

    pub fn n_samples(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, sample: usize) -> &BitMask {
        &self.masks[sample]
    }

    pub fn masks(&self) -> &[BitMask] {
        &self.masks
    }

    pub fn card(&self, sample: usize) -> u64 {
        self.cards[sample]
    }

    pub fn cards(&self) -> &[u64] {
        &self.cards
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}
