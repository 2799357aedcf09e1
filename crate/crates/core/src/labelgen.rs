//! Body/boundary label decomposition.
//!
//! A ground-truth mask is split into a thin boundary band (foreground pixels
//! within `alpha` of the background) and the remaining interior body. The two
//! parts are disjoint and their union is the original mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel binary mask stored row-major, one byte (0 or 1) per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "mask must be at least 1x1, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(Error::Parameter(format!(
                "mask pixels must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x) as u8);
            }
        }
        Self::new(height, width, pixels)
    }

    /// Binarize arbitrary values: anything strictly above `threshold` is foreground.
    pub fn from_threshold<T: Copy + PartialOrd>(
        height: usize,
        width: usize,
        values: &[T],
        threshold: T,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| (v > threshold) as u8).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.pixels[y * self.width + x] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn is_full(&self) -> bool {
        self.pixels.iter().all(|&p| p != 0)
    }

    fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask dims differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize> {
        self.check_same_dims(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count())
    }

    /// `true` when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(&a, &b)| a <= b)
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| 1 - p).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
            .expect("dims preserved")
    }

    /// Translate by (dy, dx); pixels shifted in from outside are background.
    pub fn shifted(&self, dy: isize, dx: isize) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            sy >= 0
                && sx >= 0
                && (sy as usize) < self.height
                && (sx as usize) < self.width
                && self.get(sy as usize, sx as usize)
        })
        .expect("dims preserved")
    }

    /// Nearest-neighbour resampling, `src = floor(dst * in / out)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "cannot resize mask to {height}x{width}"
            )));
        }
        let h0 = self.height;
        let w0 = self.width;
        Self::from_fn(height, width, |y, x| {
            let sy = (y * h0 / height).min(h0 - 1);
            let sx = (x * w0 / width).min(w0 - 1);
            self.get(sy, sx)
        })
    }

    /// Pixels as `f32` 0.0 / 1.0, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32).collect()
    }

    /// Foreground pixels with at least one 4-neighbour outside the mask.
    /// Pixels on the grid edge count as touching background.
    pub fn boundary(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(h, w, |y, x| {
            if !self.get(y, x) {
                return false;
            }
            y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !self.get(y - 1, x)
                || !self.get(y + 1, x)
                || !self.get(y, x - 1)
                || !self.get(y, x + 1)
        })
        .expect("dims preserved")
    }
}

/// Distance used when measuring how far a foreground pixel is from background.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    CityBlock,
    Chessboard,
}

/// Row-major grid of per-pixel distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Euclidean distance from every foreground pixel to the nearest background
/// pixel. Background maps to 0; with no background at all, every foreground
/// pixel maps to `f64::INFINITY`.
pub fn distance_map(mask: &BinaryMask) -> DistanceMap {
    distance_map_with(mask, DistanceMetric::Euclidean)
}

pub fn distance_map_with(mask: &BinaryMask, metric: DistanceMetric) -> DistanceMap {
    let values = match metric {
        DistanceMetric::Euclidean => {
            let sq = squared_edt(mask, (1.0, 1.0));
            sq.into_iter().map(f64::sqrt).collect()
        }
        DistanceMetric::CityBlock => chamfer(mask, false),
        DistanceMetric::Chessboard => chamfer(mask, true),
    };
    DistanceMap {
        height: mask.height(),
        width: mask.width(),
        values,
    }
}

/// Exact squared Euclidean distance transform with per-axis pixel spacing
/// `(dy, dx)`; separable lower-envelope-of-parabolas algorithm.
pub(crate) fn squared_edt(mask: &BinaryMask, spacing: (f64, f64)) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut grid: Vec<f64> = mask
        .pixels()
        .iter()
        .map(|&p| if p == 0 { 0.0 } else { f64::INFINITY })
        .collect();

    let mut column = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = grid[y * w + x];
        }
        let out = edt_1d(&column, spacing.0);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let out = edt_1d(&grid[y * w..(y + 1) * w], spacing.1);
        grid[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    grid
}

/// `d(p) = min_q (s*(p - q))^2 + f(q)` over the finite samples of `f`.
fn edt_1d(f: &[f64], spacing: f64) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let pos = |q: usize| q as f64 * spacing;
    // Lower envelope: parabola roots `v` and boundaries `z` between them.
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &sites[1..] {
        loop {
            let r = *v.last().unwrap();
            let (pq, pr) = (pos(q), pos(r));
            let s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            // z[0] is -inf, so the envelope never empties.
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                *z.last_mut().unwrap() = s;
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pp = pos(p);
        while z[k + 1] < pp {
            k += 1;
        }
        let d = pp - pos(v[k]);
        *o = d * d + f[v[k]];
    }
    out
}

/// Two-pass chamfer transform; exact for city-block (4-neighbour) and
/// chessboard (8-neighbour) distances.
fn chamfer(mask: &BinaryMask, diagonal: bool) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut d: Vec<f64> = mask
        .pixels()
        .iter()
        .map(|&p| if p == 0 { 0.0 } else { f64::INFINITY })
        .collect();
    let idx = |y: usize, x: usize| y * w + x;
    for y in 0..h {
        for x in 0..w {
            let mut best = d[idx(y, x)];
            if y > 0 {
                best = best.min(d[idx(y - 1, x)] + 1.0);
                if diagonal && x > 0 {
                    best = best.min(d[idx(y - 1, x - 1)] + 1.0);
                }
                if diagonal && x + 1 < w {
                    best = best.min(d[idx(y - 1, x + 1)] + 1.0);
                }
            }
            if x > 0 {
                best = best.min(d[idx(y, x - 1)] + 1.0);
            }
            d[idx(y, x)] = best;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = d[idx(y, x)];
            if y + 1 < h {
                best = best.min(d[idx(y + 1, x)] + 1.0);
                if diagonal && x > 0 {
                    best = best.min(d[idx(y + 1, x - 1)] + 1.0);
                }
                if diagonal && x + 1 < w {
                    best = best.min(d[idx(y + 1, x + 1)] + 1.0);
                }
            }
            if x + 1 < w {
                best = best.min(d[idx(y, x + 1)] + 1.0);
            }
            d[idx(y, x)] = best;
        }
    }
    d
}

/// Final mask plus its disjoint boundary/body decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub final_mask: BinaryMask,
    pub body: BinaryMask,
    pub bound: BinaryMask,
    pub alpha: f64,
}

impl LabelSet {
    /// Checks disjointness, union and equal dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.body.dims() != self.final_mask.dims() || self.bound.dims() != self.final_mask.dims()
        {
            return Err(Error::Shape("label set dims differ".into()));
        }
        if self.body.intersection_count(&self.bound)? != 0 {
            return Err(Error::Parameter("body and bound overlap".into()));
        }
        if self.body.or(&self.bound)? != self.final_mask {
            return Err(Error::Parameter("body | bound != final".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_ALPHA: f64 = 1.0;

pub fn split_labels(mask: &BinaryMask, alpha: f64) -> Result<LabelSet> {
    split_labels_with(mask, alpha, DistanceMetric::Euclidean)
}

/// Foreground pixels at distance `<= alpha` from background form the
/// boundary; the rest of the foreground is body.
pub fn split_labels_with(
    mask: &BinaryMask,
    alpha: f64,
    metric: DistanceMetric,
) -> Result<LabelSet> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    let dist = distance_map_with(mask, metric);
    let (h, w) = mask.dims();
    let mut body = vec![0u8; h * w];
    let mut bound = vec![0u8; h * w];
    for (i, &p) in mask.pixels().iter().enumerate() {
        if p == 0 {
            continue;
        }
        if dist.values[i] <= alpha {
            bound[i] = 1;
        } else {
            body[i] = 1;
        }
    }
    Ok(LabelSet {
        final_mask: mask.clone(),
        body: BinaryMask::new(h, w, body)?,
        bound: BinaryMask::new(h, w, bound)?,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(mask: &BinaryMask) -> Vec<f64> {
        let (h, w) = mask.dims();
        let bg: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| !mask.get(y, x))
            .collect();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                out[y * w + x] = bg
                    .iter()
                    .map(|&(by, bx)| {
                        let dy = by as f64 - y as f64;
                        let dx = bx as f64 - x as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
            }
        }
        out
    }

    fn center_pixel() -> BinaryMask {
        BinaryMask::from_fn(3, 3, |y, x| y == 1 && x == 1).unwrap()
    }

    #[test]
    fn single_center_pixel_distance() {
        let d = distance_map(&center_pixel());
        assert_eq!(d.values, brute_force(&center_pixel()));
        assert_eq!(d.get(1, 1), 1.0);
        assert_eq!(d.values.iter().filter(|&&v| v == 0.0).count(), 8);
    }

    #[test]
    fn all_zero_mask_is_zero_map() {
        let m = BinaryMask::zeros(4, 6).unwrap();
        assert!(distance_map(&m).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_foreground_is_infinite() {
        let m = BinaryMask::new(5, 5, vec![1; 25]).unwrap();
        assert!(distance_map(&m).values.iter().all(|v| v.is_infinite()));
        let ls = split_labels(&m, 1.0).unwrap();
        assert_eq!(ls.body, m);
        assert!(ls.bound.is_empty());
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(matches!(BinaryMask::new(0, 3, vec![]), Err(Error::Dimension(_))));
        assert!(matches!(BinaryMask::new(2, 2, vec![0, 1, 2, 0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(matches!(split_labels(&center_pixel(), -0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_pixel_is_all_boundary() {
        let ls = split_labels(&center_pixel(), 1.0).unwrap();
        assert_eq!(ls.bound, center_pixel());
        assert!(ls.body.is_empty());
    }

    #[test]
    fn square_splits_into_perimeter_and_core() {
        let m = BinaryMask::from_fn(7, 7, |y, x| (1..=5).contains(&y) && (1..=5).contains(&x)).unwrap();
        let ls = split_labels(&m, 1.0).unwrap();
        let core = BinaryMask::from_fn(7, 7, |y, x| (2..=4).contains(&y) && (2..=4).contains(&x)).unwrap();
        assert_eq!(ls.body, core);
        assert_eq!(ls.bound.count(), 16);
        assert_eq!(ls.bound, m.and_not(&core).unwrap());
        ls.validate().unwrap();
    }

    #[test]
    fn other_metrics_match_definitions() {
        let m = BinaryMask::from_fn(9, 9, |y, x| (1..8).contains(&y) && (1..8).contains(&x)).unwrap();
        let l1 = distance_map_with(&m, DistanceMetric::CityBlock);
        let linf = distance_map_with(&m, DistanceMetric::Chessboard);
        for y in 0..9 {
            for x in 0..9 {
                if !m.get(y, x) {
                    continue;
                }
                let mut best1 = f64::INFINITY;
                let mut bestinf = f64::INFINITY;
                for by in 0..9usize {
                    for bx in 0..9usize {
                        if m.get(by, bx) {
                            continue;
                        }
                        let dy = by.abs_diff(y) as f64;
                        let dx = bx.abs_diff(x) as f64;
                        best1 = best1.min(dy + dx);
                        bestinf = bestinf.min(dy.max(dx));
                    }
                }
                assert_eq!(l1.get(y, x), best1);
                assert_eq!(linf.get(y, x), bestinf);
            }
        }
    }

    #[test]
    fn boundary_uses_four_connectivity() {
        let m = BinaryMask::from_fn(5, 5, |y, x| (1..=3).contains(&y) && (1..=3).contains(&x)).unwrap();
        let b = m.boundary();
        assert_eq!(b.count(), 8);
        assert!(!b.get(2, 2));
    }

    #[test]
    fn resize_nearest_downsamples_by_stride() {
        let m = BinaryMask::from_fn(4, 4, |y, x| y % 2 == 0 && x % 2 == 0).unwrap();
        let r = m.resize_nearest(2, 2).unwrap();
        assert!(r.is_full());
    }
}
