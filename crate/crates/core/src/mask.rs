//! Binary masks stored as uncompressed alternating run lengths.
//!
//! Runs cover the pixels in row-major order and always start with a
//! background run, which is the only run allowed to be empty. The text form
//! is `"<width>x<height>:<run>,<run>,..."`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::BBox;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask grid is empty")]
    EmptyGrid,
    #[error("ragged grid: row {row} has {found} cells, expected {expected}")]
    RaggedGrid { row: usize, expected: usize, found: usize },
    #[error("corrupt mask: runs sum to {sum}, expected {expected}")]
    Corrupt { sum: u64, expected: u64 },
    #[error("corrupt mask: run {index} is zero (only the first run may be empty)")]
    ZeroRun { index: usize },
    #[error("mask dimensions {a_w}x{a_h} and {b_w}x{b_h} differ")]
    DimensionMismatch { a_w: u32, a_h: u32, b_w: u32, b_h: u32 },
    #[error("invalid mask_rle string {0:?}")]
    Syntax(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

/// Intersection/union pixel counts and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

impl BinaryMask {
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyGrid);
        }
        let expected = u64::from(width) * u64::from(height);
        let sum: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if sum != expected || runs.is_empty() {
            return Err(MaskError::Corrupt { sum, expected });
        }
        if let Some(index) = runs.iter().skip(1).position(|&r| r == 0) {
            return Err(MaskError::ZeroRun { index: index + 1 });
        }
        Ok(Self { width, height, runs })
    }

    /// Builds a mask from a flat row-major pixel slice of length `width * height`.
    pub fn from_pixels(width: u32, height: u32, pixels: &[bool]) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyGrid);
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(MaskError::Corrupt { sum: pixels.len() as u64, expected: expected as u64 });
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &p in pixels {
            if p == current {
                len += 1;
            } else {
                runs.push(len);
                current = p;
                len = 1;
            }
        }
        runs.push(len);
        Ok(Self { width, height, runs })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Result<Self, MaskError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::from_pixels(width, height, &pixels)
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::from_runs(width, height, vec![width * height])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// Foreground runs as half-open `[start, end)` pixel intervals.
    pub fn foreground_intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += u64::from(r);
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let idx = u64::from(y) * u64::from(self.width) + u64::from(x);
        self.foreground_intervals().any(|(s, e)| s <= idx && idx < e)
    }

    pub fn complement(&self) -> Self {
        let runs = if self.runs[0] == 0 {
            self.runs[1..].to_vec()
        } else {
            let mut r = Vec::with_capacity(self.runs.len() + 1);
            r.push(0);
            r.extend_from_slice(&self.runs);
            r
        };
        Self { width: self.width, height: self.height, runs }
    }

    /// Pixel-wise OR of two equally sized masks.
    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let a = rle_decode(self);
        let b = rle_decode(other);
        let px: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x || *y).collect();
        Self::from_pixels(self.width, self.height, &px)
    }

    fn check_dims(&self, other: &Self) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch {
                a_w: self.width,
                a_h: self.height,
                b_w: other.width,
                b_h: other.height,
            });
        }
        Ok(())
    }
}

impl fmt::Display for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.width, self.height)?;
        for (i, r) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

fn parse_decimal(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

impl FromStr for BinaryMask {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MaskError::Syntax(s.to_string());
        let (dims, runs) = s.split_once(':').ok_or_else(bad)?;
        let (w, h) = dims.split_once('x').ok_or_else(bad)?;
        let width = parse_decimal(w).ok_or_else(bad)?;
        let height = parse_decimal(h).ok_or_else(bad)?;
        let runs = runs
            .split(',')
            .map(|r| parse_decimal(r).ok_or_else(bad))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_runs(width, height, runs)
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Encodes a row-major grid given as rows of equal length.
pub fn rle_encode(rows: &[Vec<bool>]) -> Result<BinaryMask, MaskError> {
    let width = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || width == 0 {
        return Err(MaskError::EmptyGrid);
    }
    if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(MaskError::RaggedGrid { row, expected: width, found: r.len() });
    }
    let flat: Vec<bool> = rows.iter().flatten().copied().collect();
    BinaryMask::from_pixels(width as u32, rows.len() as u32, &flat)
}

/// Expands a mask into `width * height` row-major cells.
pub fn rle_decode(mask: &BinaryMask) -> Vec<bool> {
    let mut out = Vec::with_capacity(mask.pixel_count() as usize);
    for (i, &r) in mask.runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    out
}

pub fn foreground_count(mask: &BinaryMask) -> u64 {
    mask.runs.iter().skip(1).step_by(2).map(|&r| u64::from(r)).sum()
}

/// Exact-count IoU computed by merging the foreground intervals of both masks.
/// Two empty masks have IoU 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<IouCounts, MaskError> {
    a.check_dims(b)?;
    let ia: Vec<(u64, u64)> = a.foreground_intervals().collect();
    let ib: Vec<(u64, u64)> = b.foreground_intervals().collect();
    let (mut i, mut j) = (0, 0);
    let mut intersection = 0u64;
    while i < ia.len() && j < ib.len() {
        let lo = ia[i].0.max(ib[j].0);
        let hi = ia[i].1.min(ib[j].1);
        if hi > lo {
            intersection += hi - lo;
        }
        if ia[i].1 < ib[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = foreground_count(a) + foreground_count(b) - intersection;
    let iou = if union == 0 { 1.0 } else { intersection as f64 / union as f64 };
    Ok(IouCounts { intersection, union, iou })
}

/// Tightest box around the foreground, `None` for an all-background mask.
pub fn bbox_of_mask(mask: &BinaryMask) -> Option<BBox> {
    let w = u64::from(mask.width);
    let mut min_x = u64::MAX;
    let mut max_x = 0u64;
    let mut min_y = u64::MAX;
    let mut max_y = 0u64;
    for (s, e) in mask.foreground_intervals() {
        let (r0, r1) = (s / w, (e - 1) / w);
        let (x0, x1) = if r0 == r1 { (s % w, (e - 1) % w) } else { (0, w - 1) };
        min_x = min_x.min(x0);
        max_x = max_x.max(x1);
        min_y = min_y.min(r0);
        max_y = max_y.max(r1);
    }
    (min_x != u64::MAX).then(|| {
        BBox::new(min_x as f64, min_y as f64, (max_x - min_x + 1) as f64, (max_y - min_y + 1) as f64)
            .expect("mask-derived box is valid")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_iou(a: &BinaryMask, b: &BinaryMask) -> (u64, u64) {
        let (pa, pb) = (rle_decode(a), rle_decode(b));
        let inter = pa.iter().zip(&pb).filter(|(x, y)| **x && **y).count() as u64;
        let uni = pa.iter().zip(&pb).filter(|(x, y)| **x || **y).count() as u64;
        (inter, uni)
    }

    #[test]
    fn encode_examples() {
        assert_eq!(rle_encode(&[vec![false; 2], vec![false; 2]]).unwrap().runs(), &[4]);
        assert_eq!(rle_encode(&[vec![true; 2], vec![true; 2]]).unwrap().runs(), &[0, 4]);
        assert_eq!(rle_encode(&[vec![false, true, false]]).unwrap().runs(), &[1, 1, 1]);
    }

    #[test]
    fn ragged_grid_rejected() {
        let err = rle_encode(&[vec![true, false], vec![true]]).unwrap_err();
        assert_eq!(err, MaskError::RaggedGrid { row: 1, expected: 2, found: 1 });
        assert_eq!(rle_encode(&[]).unwrap_err(), MaskError::EmptyGrid);
    }

    #[test]
    fn decode_examples() {
        let m = BinaryMask::from_runs(2, 2, vec![4]).unwrap();
        assert_eq!(rle_decode(&m), vec![false; 4]);
        let m = BinaryMask::from_runs(2, 2, vec![0, 4]).unwrap();
        assert_eq!(rle_decode(&m), vec![true; 4]);
        let m = BinaryMask::from_runs(2, 2, vec![1, 2, 1]).unwrap();
        assert_eq!(rle_decode(&m), vec![false, true, true, false]);
    }

    #[test]
    fn corrupt_runs_rejected() {
        assert!(matches!(BinaryMask::from_runs(2, 2, vec![1, 2]), Err(MaskError::Corrupt { sum: 3, expected: 4 })));
        assert!(matches!(BinaryMask::from_runs(2, 2, vec![2, 0, 2]), Err(MaskError::ZeroRun { index: 1 })));
    }

    #[test]
    fn text_form() {
        let m: BinaryMask = "2x2:0,4".parse().unwrap();
        assert_eq!(foreground_count(&m), 4);
        assert_eq!(m.to_string(), "2x2:0,4");
        for bad in ["2x2:0,4 ", "2x2:0,4,", "2x2:0,4x", "2x2", "x2:4", "2x2:+4", "2x2:", "2X2:4", " 2x2:4"] {
            assert!(bad.parse::<BinaryMask>().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(4, 4, |x, y| y == 0 && x < 4).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap().iou, 1.0);
        let b = BinaryMask::from_fn(4, 4, |_, y| y == 3).unwrap();
        assert_eq!(mask_iou(&a, &b).unwrap().iou, 0.0);
        // 4 px each, overlap 2
        let c = BinaryMask::from_fn(4, 4, |x, y| y == 0 && x >= 2 || y == 1 && x < 2).unwrap();
        let r = mask_iou(&a, &c).unwrap();
        assert_eq!((r.intersection, r.union), (2, 6));
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap().iou, 1.0);
        let other = BinaryMask::empty(3, 4).unwrap();
        assert!(matches!(mask_iou(&e, &other), Err(MaskError::DimensionMismatch { .. })));
    }

    #[test]
    fn bbox_examples() {
        assert!(bbox_of_mask(&BinaryMask::empty(8, 8).unwrap()).is_none());
        let m = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (3, 5)).unwrap();
        assert_eq!(bbox_of_mask(&m).unwrap(), BBox::new(3.0, 5.0, 1.0, 1.0).unwrap());
        let m = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (1, 1) || (x, y) == (4, 2)).unwrap();
        assert_eq!(bbox_of_mask(&m).unwrap(), BBox::new(1.0, 1.0, 4.0, 2.0).unwrap());
    }

    #[test]
    fn foreground_examples() {
        assert_eq!(foreground_count(&BinaryMask::empty(10, 10).unwrap()), 0);
        assert_eq!(foreground_count(&BinaryMask::from_runs(7, 3, vec![0, 21]).unwrap()), 21);
        assert_eq!(foreground_count(&BinaryMask::from_runs(10, 1, vec![5, 3, 2]).unwrap()), 3);
    }

    fn arb_mask(max: u32) -> impl Strategy<Value = (u32, u32, Vec<bool>)> {
        (1..=max, 1..=max).prop_flat_map(|(w, h)| {
            // Blocky patterns exercise long runs; density varies per mask.
            (Just(w), Just(h), prop::collection::vec(any::<bool>(), (w * h) as usize))
        })
    }

    proptest! {
        #[test]
        fn roundtrip_bit_exact((w, h, px) in arb_mask(256)) {
            let m = BinaryMask::from_pixels(w, h, &px).unwrap();
            prop_assert_eq!(rle_decode(&m), px);
            let reparsed: BinaryMask = m.to_string().parse().unwrap();
            prop_assert_eq!(reparsed, m);
        }

        #[test]
        fn iou_matches_pixel_loop((w, h, pa) in arb_mask(24), seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let pb: Vec<bool> = (0..pa.len()).map(|_| rng.below(3) == 0).collect();
            let a = BinaryMask::from_pixels(w, h, &pa).unwrap();
            let b = BinaryMask::from_pixels(w, h, &pb).unwrap();
            let r = mask_iou(&a, &b).unwrap();
            prop_assert_eq!((r.intersection, r.union), brute_iou(&a, &b));
            prop_assert_eq!(r.iou, mask_iou(&b, &a).unwrap().iou);
            prop_assert_eq!(foreground_count(&a) + foreground_count(&a.complement()), u64::from(w * h));
        }

        #[test]
        fn bbox_matches_pixel_scan((w, h, px) in arb_mask(20)) {
            let m = BinaryMask::from_pixels(w, h, &px).unwrap();
            let fg: Vec<(u32, u32)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| px[(y * w + x) as usize]).collect();
            match bbox_of_mask(&m) {
                None => prop_assert!(fg.is_empty()),
                Some(b) => {
                    let x0 = fg.iter().map(|p| p.0).min().unwrap();
                    let x1 = fg.iter().map(|p| p.0).max().unwrap();
                    let y0 = fg.iter().map(|p| p.1).min().unwrap();
                    let y1 = fg.iter().map(|p| p.1).max().unwrap();
                    prop_assert_eq!(b, BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64).unwrap());
                }
            }
        }
    }
}
