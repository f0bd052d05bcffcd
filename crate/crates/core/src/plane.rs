//! Single-channel rasters and binary masks.
//!
//! [`Plane`] is the pixel container used everywhere in the crate: images,
//! noise fields, predicted noise, anomaly maps. Storage is row-major `f64`.
//! [`Mask`] is its boolean counterpart.

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Plane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Plane")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Side length of a square plane.
    pub fn side(&self) -> Result<usize> {
        if self.height != self.width {
            return Err(Error::Contract(format!(
                "expected a square plane, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(self.height)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn ensure_same_shape(&self, other: &Plane) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two planes of identical shape.
    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Result<Plane> {
        self.ensure_same_shape(other)?;
        Ok(Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn flip_horizontal(&self) -> Plane {
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            out.extend(self.row(r).iter().rev());
        }
        Plane {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Copies a window that lies fully inside the plane.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Plane> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Contract(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{} plane",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.row(r)[left..left + width]);
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    /// Copies a window that may extend past the borders; outside pixels are 0.
    pub fn crop_zero_padded(&self, top: isize, left: isize, height: usize, width: usize) -> Plane {
        Plane::from_fn(height, width, |r, c| {
            let sr = top + r as isize;
            let sc = left + c as isize;
            if sr < 0 || sc < 0 || sr >= self.height as isize || sc >= self.width as isize {
                0.0
            } else {
                self.get(sr as usize, sc as usize)
            }
        })
    }

    /// Writes `patch` with its top-left corner at (`top`, `left`).
    pub fn paste(&mut self, patch: &Plane, top: usize, left: usize) -> Result<()> {
        if top + patch.height > self.height || left + patch.width > self.width {
            return Err(Error::Contract(format!(
                "paste {}x{}@({top},{left}) exceeds {}x{} plane",
                patch.height, patch.width, self.height, self.width
            )));
        }
        for r in 0..patch.height {
            let dst = (top + r) * self.width + left;
            self.data[dst..dst + patch.width].copy_from_slice(patch.row(r));
        }
        Ok(())
    }

    pub fn clamp01(&self) -> Plane {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// (min, max) over all pixels; `None` for an empty plane.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn max(&self) -> f64 {
        self.min_max().map_or(0.0, |(_, hi)| hi)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().copied().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zeroes every pixel outside `mask`.
    pub fn masked(&self, mask: &Mask) -> Result<Plane> {
        if mask.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: mask.shape(),
            });
        }
        Ok(Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(mask.as_slice())
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        })
    }

    pub fn mse(&self, other: &Plane) -> Result<f64> {
        self.ensure_same_shape(other)?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// A binary raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("count", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Pixels strictly above `threshold`.
    pub fn above(plane: &Plane, threshold: f64) -> Self {
        Self {
            height: plane.height(),
            width: plane.width(),
            data: plane.as_slice().iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Pixels at or above one half; the inverse of [`Mask::to_plane`].
    pub fn from_plane(plane: &Plane) -> Self {
        Self {
            height: plane.height(),
            width: plane.width(),
            data: plane.as_slice().iter().map(|&v| v >= 0.5).collect(),
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Row-major coordinates of set pixels.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Tight bounding box as (top, left, height, width).
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut top = usize::MAX;
        let mut left = usize::MAX;
        let mut bottom = 0;
        let mut right = 0;
        for (r, c) in self.coords() {
            top = top.min(r);
            left = left.min(c);
            bottom = bottom.max(r);
            right = right.max(c);
        }
        (top != usize::MAX).then(|| (top, left, bottom - top + 1, right - left + 1))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn to_plane(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |r, c| if self.get(r, c) { 1.0 } else { 0.0 })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| self.get(top + r, left + c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_paste_round_trip() {
        let p = Plane::from_fn(6, 5, |r, c| (r * 10 + c) as f64);
        let window = p.crop(1, 2, 3, 2).unwrap();
        assert_eq!(window.get(0, 0), 12.0);
        assert_eq!(window.get(2, 1), 33.0);
        let mut q = Plane::zeros(6, 5);
        q.paste(&window, 1, 2).unwrap();
        assert_eq!(q.get(3, 3), 33.0);
        assert!(p.crop(4, 0, 3, 1).is_err());
    }

    #[test]
    fn zero_padded_crop_fills_outside() {
        let p = Plane::filled(3, 3, 1.0);
        let w = p.crop_zero_padded(-1, -1, 3, 3);
        assert_eq!(w.get(0, 0), 0.0);
        assert_eq!(w.get(1, 1), 1.0);
        assert_eq!(w.get(2, 2), 1.0);
    }

    #[test]
    fn flip_is_an_involution() {
        let p = Plane::from_fn(4, 7, |r, c| (r * 7 + c) as f64 * 0.1);
        assert_eq!(p.flip_horizontal().flip_horizontal(), p);
        assert_eq!(p.flip_horizontal().get(0, 0), p.get(0, 6));
    }

    #[test]
    fn mask_bbox_is_tight() {
        let mut m = Mask::empty(8, 8);
        m.set(2, 3, true);
        m.set(5, 1, true);
        assert_eq!(m.bbox(), Some((2, 1, 4, 3)));
        assert_eq!(Mask::empty(2, 2).bbox(), None);
    }
}
