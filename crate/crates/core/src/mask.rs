//! Binary mask set algebra and extension geometry.
//!
//! Masks are stored row-major as packed `u64` words, bit `r * width + c`.
//! Bits past `height * width` in the last word are always zero, so word-wise
//! popcounts are exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Formula, FormulaError, Op};
use crate::store::ConceptStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("invalid interval: lo ({lo}) > hi ({hi})")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("mask dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
}

/// Axis-aligned rectangle of pixels, all bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        debug_assert!(top <= bottom && left <= right);
        Rect { top, left, bottom, right }
    }

    pub fn area(&self) -> u64 {
        ((self.bottom - self.top + 1) * (self.right - self.left + 1)) as u64
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }

    /// Geometric intersection, `None` when disjoint.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = self.bottom.min(other.bottom);
        let right = self.right.min(other.right);
        (top <= bottom && left <= right).then_some(Rect { top, left, bottom, right })
    }

    /// Smallest rectangle covering both.
    pub fn bounding_union(&self, other: &Rect) -> Rect {
        Rect {
            top: self.top.min(other.top),
            left: self.left.min(other.left),
            bottom: self.bottom.max(other.bottom),
            right: self.right.max(other.right),
        }
    }
}

/// Area of the geometric intersection of two rectangles; 0 if either is absent.
pub fn rect_overlap_area(a: Option<&Rect>, b: Option<&Rect>) -> u64 {
    match (a, b) {
        (Some(a), Some(b)) => a.intersection(b).map_or(0, |r| r.area()),
        _ => 0,
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    height: usize,
    width: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BitMask {}x{} (card {})", self.height, self.width, self.count())?;
        for r in 0..self.height {
            let row: String = (0..self.width).map(|c| if self.get(r, c) { '#' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

#[inline]
fn n_words(len: usize) -> usize {
    len.div_ceil(64)
}

impl BitMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BitMask { height, width, words: vec![0; n_words(height * width)] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let mut m = BitMask { height, width, words: vec![u64::MAX; n_words(height * width)] };
        m.clear_tail();
        m
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    /// Build from a list of `(row, col)` pixels.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    fn clear_tail(&mut self) {
        let len = self.height * self.width;
        let rem = len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels in the grid.
    pub fn size(&self) -> usize {
        self.height * self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        let i = row * self.width + col;
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = row * self.width + col;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Cardinality (popcount).
    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &BitMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_dims(&self, other: &BitMask) -> Result<(), MaskError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(MaskError::DimMismatch(self.height, self.width, other.height, other.width))
        }
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let width = self.width;
        self.words.iter().enumerate().flat_map(move |(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + b;
                Some((i / width, i % width))
            })
        })
    }

    pub fn or_assign(&mut self, other: &BitMask) {
        debug_assert!(self.same_dims(other));
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a |= b);
    }

    pub fn and_assign(&mut self, other: &BitMask) {
        debug_assert!(self.same_dims(other));
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a &= b);
    }

    pub fn and_not_assign(&mut self, other: &BitMask) {
        debug_assert!(self.same_dims(other));
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a &= !b);
    }

    /// `|self ∩ other|` without the dimension check.
    #[inline]
    pub fn and_count(&self, other: &BitMask) -> u64 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum()
    }

    /// Unpack from MSB-first row-major bytes (one mask, padded to a whole byte).
    pub fn from_packed_msb(height: usize, width: usize, bytes: &[u8]) -> Self {
        let mut m = Self::empty(height, width);
        for i in 0..height * width {
            if (bytes[i / 8] >> (7 - i % 8)) & 1 == 1 {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        m
    }

    /// Pack to MSB-first row-major bytes, `ceil(h*w/8)` long.
    pub fn to_packed_msb(&self) -> Vec<u8> {
        let len = self.height * self.width;
        let mut out = vec![0u8; len.div_ceil(8)];
        for i in 0..len {
            if (self.words[i / 64] >> (i % 64)) & 1 == 1 {
                out[i / 8] |= 1 << (7 - i % 8);
            }
        }
        out
    }
}

/// Bit set iff `lo <= value <= hi`.
pub fn binarize(plane: &[f32], height: usize, width: usize, lo: f64, hi: f64) -> Result<BitMask, MaskError> {
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(MaskError::InvalidInterval { lo, hi });
    }
    assert_eq!(plane.len(), height * width, "plane length must equal height * width");
    let mut m = BitMask::empty(height, width);
    for (i, &v) in plane.iter().enumerate() {
        let v = v as f64;
        if lo <= v && v <= hi {
            m.words[i / 64] |= 1 << (i % 64);
        }
    }
    Ok(m)
}

pub fn intersect_card(a: &BitMask, b: &BitMask) -> Result<u64, MaskError> {
    a.check_dims(b)?;
    Ok(a.and_count(b))
}

pub fn union_card(a: &BitMask, b: &BitMask) -> Result<u64, MaskError> {
    a.check_dims(b)?;
    Ok(a.words.iter().zip(&b.words).map(|(x, y)| (x | y).count_ones() as u64).sum())
}

/// Tight bounding box of all one-pixels.
pub fn max_extension(mask: &BitMask) -> Option<Rect> {
    let mut it = mask.iter_ones();
    let (r0, c0) = it.next()?;
    let mut rect = Rect::new(r0, c0, r0, c0);
    for (r, c) in it {
        rect.top = rect.top.min(r);
        rect.bottom = rect.bottom.max(r);
        rect.left = rect.left.min(c);
        rect.right = rect.right.max(c);
    }
    Some(rect)
}

/// Largest axis-aligned rectangle made only of one-pixels.
///
/// Runs the largest-rectangle-in-histogram sweep once per row. Every
/// maximum-area rectangle is maximal in all four directions, so it shows up
/// as the candidate of its bottom row and its lowest column; picking the
/// smallest `(top, left, bottom, right)` among the largest candidates
/// therefore gives the lexicographically smallest optimum.
pub fn min_extension(mask: &BitMask) -> Option<Rect> {
    let (h, w) = (mask.height, mask.width);
    let mut heights = vec![0usize; w];
    let mut left = vec![0usize; w];
    let mut right = vec![0usize; w];
    let mut stack: Vec<usize> = Vec::with_capacity(w);
    let mut best: Option<(u64, Rect)> = None;

    for row in 0..h {
        for (col, ht) in heights.iter_mut().enumerate() {
            *ht = if mask.get(row, col) { *ht + 1 } else { 0 };
        }
        // nearest strictly lower bar on each side
        stack.clear();
        for col in 0..w {
            while stack.last().is_some_and(|&j| heights[j] >= heights[col]) {
                stack.pop();
            }
            left[col] = stack.last().map_or(0, |&j| j + 1);
            stack.push(col);
        }
        stack.clear();
        for col in (0..w).rev() {
            while stack.last().is_some_and(|&j| heights[j] >= heights[col]) {
                stack.pop();
            }
            right[col] = stack.last().map_or(w - 1, |&j| j - 1);
            stack.push(col);
        }
        for col in 0..w {
            let ht = heights[col];
            if ht == 0 {
                continue;
            }
            let rect = Rect::new(row + 1 - ht, left[col], row, right[col]);
            let area = rect.area();
            let better = match &best {
                None => true,
                Some((a, r)) => area > *a || (area == *a && rect < *r),
            };
            if better {
                best = Some((area, rect));
            }
        }
    }
    best.map(|(_, r)| r)
}

/// Evaluate a formula on one sample: OR is union, AND intersection, AND NOT
/// left minus right.
pub fn eval_formula(f: &Formula, store: &ConceptStore, sample: usize) -> Result<BitMask, FormulaError> {
    let atom = |a: usize| {
        if a < store.n_labels() {
            Ok(store.mask(sample, a))
        } else {
            Err(FormulaError::UnknownLabel(format!("#{a}")))
        }
    };
    match f {
        Formula::Atom(a) => atom(*a).cloned(),
        Formula::Compound { left, op, right } => {
            let mut m = eval_formula(left, store, sample)?;
            let r = atom(*right)?;
            match op {
                Op::Or => m.or_assign(r),
                Op::And => m.and_assign(r),
                Op::AndNot => m.and_not_assign(r),
            }
            Ok(m)
        }
    }
}
