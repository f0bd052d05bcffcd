//! Synthetic images for demos and tests: breast-shaped scenes with striped
//! texture, and lesion phantoms on a Gaussian-field background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::GaussianField;
use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};

/// Half-ellipse "breast" against the left edge, filled with oriented
/// stripes of random period and phase. Values lie in [0, 1].
pub fn striped_breast(side: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side as f64;
    let ry = n * rng.random_range(0.36..0.46);
    let rx = n * rng.random_range(0.55..0.75);
    let cy = n * rng.random_range(0.45..0.55);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let period = n * rng.random_range(0.06..0.12);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    Plane::from_fn(side, side, |r, col| {
        let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
        let e = ((y - cy) / ry).powi(2) + (x / rx).powi(2);
        if e >= 1.0 {
            return 0.0;
        }
        let wave = ((x * c + y * s) * std::f64::consts::TAU / period + phase).sin();
        let fade = 1.0 - 0.4 * e;
        (fade * (0.55 + 0.25 * wave)).clamp(0.0, 1.0)
    })
}

/// A raw-looking mammogram: `striped_breast` with an optional mirror and
/// inversion and a linear intensity offset, for exercising preprocessing.
pub fn raw_mammogram(height: usize, width: usize, seed: u64, flipped: bool, inverted: bool) -> Plane {
    let side = height.max(width);
    let sq = striped_breast(side, seed);
    let mut p = sq.crop(0, 0, height, width).expect("crop within square");
    if flipped {
        p = p.flip_horizontal();
    }
    if inverted {
        p = p.map(|v| 1.0 - v);
    }
    p.map(|v| 100.0 + 3000.0 * v)
}

/// Smooth bright blob on a dark background: the mean of the healthy
/// phantom prior.
pub fn blob_mean(side: usize) -> Plane {
    let n = side as f64;
    let (cy, cx, r) = (0.5 * n, 0.4 * n, 0.42 * n);
    Plane::from_fn(side, side, |row, col| {
        let (y, x) = (row as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
        let d = (y * y + x * x).sqrt() / r;
        0.05 + 0.45 / (1.0 + (8.0 * (d - 1.0)).exp())
    })
}

/// A disc-shaped lesion added to a smooth healthy background.
#[derive(Debug, Clone)]
pub struct LesionPhantom {
    pub image: Plane,
    pub background: Plane,
    pub lesion: Mask,
}

/// Disc mask with `area_px` pixels (approximately) centred at `(cy, cx)`.
pub fn disc_mask(side: usize, (cy, cx): (f64, f64), area_px: f64) -> Mask {
    let r2 = area_px / std::f64::consts::PI;
    Mask::from_fn(side, side, |r, c| {
        let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        dy * dy + dx * dx <= r2
    })
}

/// Draws a background from `field`, places a disc of `area_px` at a random
/// position inside the central region and adds `contrast` to it.
pub fn lesion_phantom(field: &GaussianField, area_px: f64, contrast: f64, rng: &mut impl Rng) -> Result<LesionPhantom> {
    let side = field.mean().side()?;
    let radius = (area_px / std::f64::consts::PI).sqrt();
    let margin = radius + side as f64 * 0.15;
    if 2.0 * margin >= side as f64 {
        return Err(Error::Config(format!("disc of area {area_px} does not fit a {side}px phantom")));
    }
    let background = field.sample_prior(rng);
    let cy = rng.random_range(margin..side as f64 - margin);
    let cx = rng.random_range(margin..side as f64 - margin);
    let lesion = disc_mask(side, (cy, cx), area_px);
    let mut image = background.clone();
    for (r, c) in lesion.coords() {
        image.set(r, c, image.get(r, c) + contrast);
    }
    Ok(LesionPhantom { image, background, lesion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::normalize_and_orient;
    use crate::schedule::NoiseSchedule;

    #[test]
    fn striped_breast_is_bounded_and_left_heavy() {
        let p = striped_breast(96, 3);
        assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let left: f64 = (0..96).map(|r| p.row(r)[..48].iter().sum::<f64>()).sum();
        let right: f64 = (0..96).map(|r| p.row(r)[48..].iter().sum::<f64>()).sum();
        assert!(left > right);
        assert_ne!(striped_breast(96, 4), p);
    }

    #[test]
    fn raw_mammogram_orientation_recovered() {
        let o = normalize_and_orient(&raw_mammogram(80, 64, 5, true, true)).unwrap();
        assert!(o.was_flipped && o.was_inverted);
    }

    #[test]
    fn disc_area_close_to_request() {
        for area in [50.0, 100.0, 700.0] {
            let m = disc_mask(64, (32.0, 32.0), area);
            assert!((m.count() as f64 - area).abs() / area < 0.15, "{area} {}", m.count());
        }
    }

    #[test]
    fn phantom_lesion_raises_disc_only() {
        let s = NoiseSchedule::reference();
        let f = GaussianField::smooth(Plane::filled(48, 48, 0.4), 0.002, 4.0, &s, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ph = lesion_phantom(&f, 60.0, 0.3, &mut rng).unwrap();
        for i in 0..48 * 48 {
            let d = ph.image.as_slice()[i] - ph.background.as_slice()[i];
            let inside = ph.lesion.as_slice()[i];
            assert!(if inside { (d - 0.3).abs() < 1e-6 } else { d == 0.0 });
        }
        assert!(lesion_phantom(&f, 2000.0, 0.3, &mut rng).is_err());
    }
}
