//! Raw grayscale image to training-ready plane plus breast-tissue mask.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};

/// Fraction of the Otsu threshold used to binarize the blurred image.
pub const OTSU_FRACTION: f64 = 0.175;
/// Side of the erosion element at the reference resolution.
pub const REFERENCE_ERODE_SIDE: usize = 20;
pub const REFERENCE_IMAGE_SIDE: usize = 3328;
const HIST_BINS: usize = 256;
const MAX_ORIENT_PASSES: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientedImage {
    pub plane: Plane,
    pub was_inverted: bool,
    pub was_flipped: bool,
    pub pad: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreastMask {
    pub mask: Mask,
    pub area_px: usize,
    /// (top, left, height, width)
    pub bbox: (usize, usize, usize, usize),
}

impl BreastMask {
    pub fn from_mask(mask: Mask) -> Result<Self> {
        let bbox = mask.bbox().ok_or(Error::EmptyMask)?;
        Ok(Self {
            area_px: mask.count(),
            bbox,
            mask,
        })
    }
}

/// Intermediate masks of [`breast_mask`], each a subset of the previous.
#[derive(Debug, Clone)]
pub struct MaskStages {
    pub binarized: Mask,
    pub largest: Mask,
    pub eroded: Mask,
}

pub fn min_max_normalize(raw: &Plane) -> Result<Plane> {
    if raw.is_empty() {
        return Err(Error::DegenerateInput("empty image".into()));
    }
    if !raw.all_finite() {
        return Err(Error::DegenerateInput("image contains non-finite values".into()));
    }
    let (lo, hi) = raw.min_max().expect("nonempty");
    if lo == hi {
        return Err(Error::DegenerateInput(format!("constant image (value {lo})")));
    }
    let (lo, span) = (lo, hi - lo);
    Ok(raw.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// Mean of the outermost ring of pixels.
pub fn border_mean(p: &Plane) -> f64 {
    let (h, w) = p.shape();
    if h == 0 || w == 0 {
        return 0.0;
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                sum += p.get(r, c);
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Blur kernel side for an image: `round(side / 50)`, made odd.
pub fn blur_kernel_side(image_side: usize) -> usize {
    let k = ((image_side as f64) / 50.0).round() as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Erosion element side: `round(20 * side / 3328)`, at least 3.
pub fn erosion_side(image_side: usize) -> usize {
    let k = (REFERENCE_ERODE_SIDE as f64 * image_side as f64 / REFERENCE_IMAGE_SIDE as f64).round() as usize;
    k.max(3)
}

/// Normalized Gaussian taps `w[0..=radius]` (centre first).
fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || radius == 0 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (0..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur_1d(src: &[f64], dst: &mut [f64], n: usize, stride: usize, taps: &[f64]) {
    let at = |i: isize| src[(i.clamp(0, n as isize - 1) as usize) * stride];
    for i in 0..n {
        let ii = i as isize;
        // Symmetric pairs are summed first so the result is exactly mirror-equivariant.
        let mut acc = taps[0] * at(ii);
        for (j, &w) in taps.iter().enumerate().skip(1) {
            let j = j as isize;
            acc += w * (at(ii - j) + at(ii + j));
        }
        dst[i * stride] = acc;
    }
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(p: &Plane, radius: usize, sigma: f64) -> Plane {
    let taps = gaussian_taps(radius, sigma);
    if taps.len() == 1 {
        return p.clone();
    }
    let (h, w) = p.shape();
    let mut tmp = vec![0.0f64; h * w];
    let src = p.as_slice();
    for r in 0..h {
        blur_1d(&src[r * w..(r + 1) * w], &mut tmp[r * w..(r + 1) * w], w, 1, &taps);
    }
    let mut out = vec![0.0f64; h * w];
    for c in 0..w {
        blur_1d(&tmp[c..], &mut out[c..], h, w, &taps);
    }
    Plane::from_vec(h, w, out).expect("shape preserved")
}

/// Blur with the kernel side convention of the mask pipeline
/// (`sigma = side / 6`).
pub fn gaussian_blur_kernel(p: &Plane, kernel_side: usize) -> Plane {
    gaussian_blur(p, kernel_side / 2, kernel_side as f64 / 6.0)
}

/// Blur with a radius of `ceil(3 sigma)`.
pub fn gaussian_blur_sigma(p: &Plane, sigma: f64) -> Plane {
    gaussian_blur(p, (3.0 * sigma).ceil().max(0.0) as usize, sigma)
}

pub(crate) fn histogram_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Otsu threshold on a 256-bin histogram over [0, 1].
///
/// Candidate `k` separates bins `< k` from bins `>= k`; the result is
/// `k / 256`. Ties go to the smaller `k`.
pub fn otsu_threshold(p: &Plane) -> Result<f64> {
    let mut distinct = p.as_slice().iter().copied().filter(|v| v.is_finite());
    let first = distinct.next();
    if first.is_none() || !distinct.any(|v| Some(v) != first) {
        return Err(Error::DegenerateInput("Otsu needs at least two distinct values".into()));
    }
    let mut hist = [0u64; HIST_BINS];
    for &v in p.as_slice() {
        hist[histogram_bin(v)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (1usize, -1.0f64);
    for k in 1..HIST_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            if best.1 < 0.0 {
                best = (k, 0.0);
            }
            continue;
        }
        let m0 = s0 as f64 / n0 as f64;
        let m1 = (sum_all - s0) as f64 / n1 as f64;
        let var = (n0 as f64 / total as f64) * (n1 as f64 / total as f64) * (m0 - m1) * (m0 - m1);
        if var > best.1 {
            best = (k, var);
        }
    }
    Ok(best.0 as f64 / HIST_BINS as f64)
}

/// Largest 4-connected component; equal areas go to the component whose
/// bounding box is topmost, then leftmost.
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    let mut label = vec![0u32; h * w];
    let mut best: Option<(usize, (usize, usize), u32)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.as_slice()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let (mut area, mut top, mut left) = (0usize, usize::MAX, usize::MAX);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            area += 1;
            top = top.min(r);
            left = left.min(c);
            let mut visit = |j: usize| {
                if mask.as_slice()[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        let better = match best {
            None => true,
            Some((a, corner, _)) => area > a || (area == a && (top, left) < corner),
        };
        if better {
            best = Some((area, (top, left), next));
        }
    }
    match best {
        None => Mask::empty(h, w),
        Some((_, _, id)) => Mask::from_fn(h, w, |r, c| label[r * w + c] == id),
    }
}

/// Runs of `true` of length `side` along one axis; out-of-range samples count
/// as set. The window for index `i` is `[i - side/2, i - side/2 + side)`.
fn erode_1d(src: &[bool], n: usize, stride: usize, side: usize, dst: &mut [bool]) {
    let anchor = side / 2;
    // prefix[i] = number of unset samples in 0..i
    let mut prefix = vec![0u32; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + u32::from(!src[i * stride]);
    }
    for i in 0..n {
        let lo = i.saturating_sub(anchor);
        let hi = (i + side - anchor).min(n);
        dst[i * stride] = prefix[hi] - prefix[lo] == 0;
    }
}

/// Erosion by a `side x side` all-ones element; pixels beyond the border
/// count as foreground.
pub fn erode(mask: &Mask, side: usize) -> Mask {
    if side <= 1 {
        return mask.clone();
    }
    let (h, w) = mask.shape();
    let src = mask.as_slice();
    let mut tmp = vec![false; h * w];
    for r in 0..h {
        erode_1d(&src[r * w..(r + 1) * w], w, 1, side, &mut tmp[r * w..(r + 1) * w]);
    }
    let mut out = vec![false; h * w];
    for c in 0..w {
        erode_1d(&tmp[c..], h, w, side, &mut out[c..]);
    }
    Mask::from_fn(h, w, |r, c| out[r * w + c])
}

fn image_side(p: &Plane) -> usize {
    p.height().max(p.width())
}

fn binarize_for_mask(p: &Plane) -> Mask {
    let blurred = gaussian_blur_kernel(p, blur_kernel_side(image_side(p)));
    let thr = match otsu_threshold(&blurred) {
        Ok(t) => OTSU_FRACTION * t,
        Err(_) => 0.0,
    };
    Mask::above(&blurred, thr)
}

pub fn breast_mask_stages(p: &Plane) -> MaskStages {
    let binarized = binarize_for_mask(p);
    let largest = largest_component(&binarized);
    let eroded = largest_component(&erode(&largest, erosion_side(image_side(p))));
    MaskStages {
        binarized,
        largest,
        eroded,
    }
}

/// Blur, binarize at a fraction of the Otsu threshold, keep the largest blob
/// and erode it.
pub fn breast_mask(p: &Plane) -> Result<BreastMask> {
    BreastMask::from_mask(breast_mask_stages(p).eroded)
}

/// Left-half versus right-half mask pixel counts (the centre column of an odd
/// width belongs to neither).
fn is_right_heavy(mask: &Mask) -> bool {
    let w = mask.width();
    let (mut left, mut right) = (0usize, 0usize);
    for (_, c) in mask.coords() {
        if 2 * c + 1 < w {
            left += 1;
        } else if 2 * c + 1 > w {
            right += 1;
        }
    }
    right > left
}

/// Normalize to [0, 1], undo negative polarity, zero the background and put
/// the breast on the left. Passes repeat until the image stops changing, so
/// the result is a fixed point of this function.
pub fn normalize_and_orient(raw: &Plane) -> Result<OrientedImage> {
    let mut p = min_max_normalize(raw)?;
    let (mut inverted, mut flipped) = (false, false);
    for _ in 0..MAX_ORIENT_PASSES {
        let before = p.clone();
        if border_mean(&p) > 0.5 {
            p = p.map(|v| 1.0 - v);
            inverted = !inverted;
        }
        let blob = largest_component(&binarize_for_mask(&p));
        if blob.is_empty() {
            return Err(Error::EmptyMask);
        }
        p = p.masked(&blob)?;
        if is_right_heavy(&blob) {
            p = p.flip_horizontal();
            flipped = !flipped;
        }
        p = match min_max_normalize(&p) {
            Ok(n) => n,
            Err(_) => return Err(Error::EmptyMask),
        };
        if p == before {
            break;
        }
    }
    Ok(OrientedImage {
        plane: p,
        was_inverted: inverted,
        was_flipped: flipped,
        pad: Padding::default(),
    })
}

fn round_up(v: usize, s: usize) -> usize {
    v.div_ceil(s) * s
}

/// Zero-pads right and bottom to multiples of `s`, then squares the image:
/// a short height is padded symmetrically (extra row at the bottom), a short
/// width on the right only so the breast stays against the left edge.
pub fn pad_to_multiple(img: &OrientedImage, s: usize) -> Result<OrientedImage> {
    if s == 0 {
        return Err(Error::Config("padding multiple must be >= 1".into()));
    }
    let (h, w) = img.plane.shape();
    let (h1, w1) = (round_up(h, s), round_up(w, s));
    let side = h1.max(w1);
    let mut pad = Padding {
        bottom: h1 - h,
        right: w1 - w,
        ..Padding::default()
    };
    if h1 < side {
        let extra = side - h1;
        pad.top = extra / 2;
        pad.bottom += extra - extra / 2;
    }
    if w1 < side {
        pad.right += side - w1;
    }
    let mut out = Plane::zeros(side, side);
    out.paste(&img.plane, pad.top, pad.left)?;
    let acc = img.pad;
    Ok(OrientedImage {
        plane: out,
        was_inverted: img.was_inverted,
        was_flipped: img.was_flipped,
        pad: Padding {
            top: acc.top + pad.top,
            bottom: acc.bottom + pad.bottom,
            left: acc.left + pad.left,
            right: acc.right + pad.right,
        },
    })
}

/// Removes all recorded padding.
pub fn unpad(img: &OrientedImage) -> Result<Plane> {
    let (h, w) = img.plane.shape();
    let p = img.pad;
    if p.top + p.bottom > h || p.left + p.right > w {
        return Err(Error::Contract("padding exceeds image size".into()));
    }
    img.plane.crop(p.top, p.left, h - p.top - p.bottom, w - p.left - p.right)
}

/// Full preprocessing: orient, pad to a multiple of `s`, compute the mask.
pub fn preprocess(raw: &Plane, s: usize) -> Result<(OrientedImage, BreastMask)> {
    let oriented = normalize_and_orient(raw)?;
    let padded = pad_to_multiple(&oriented, s)?;
    let mask = breast_mask(&padded.plane)?;
    Ok((padded, mask))
}
