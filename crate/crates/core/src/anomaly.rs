//! Anomaly segmentation with a model trained on healthy images only: renoise
//! for `lambda` steps, denoise, match histograms, and threshold the
//! difference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};
use crate::preprocess::{gaussian_blur_sigma, histogram_bin, BreastMask};
use crate::sampler::{patch_rng, reverse_from, standard_normal_plane};
use crate::schedule::{forward_noise, NoiseSchedule};

/// Operating point in steps of the 1000-step reference schedule.
pub const REFERENCE_LAMBDA: usize = 700;

/// Median lesion area (pixels at a 256-pixel side) and mean IoU of each
/// size bucket reported for the reference operating point.
pub const REFERENCE_BUCKETS: [(f64, f64); 6] = [
    (64.0, 0.019),
    (128.0, 0.069),
    (222.0, 0.125),
    (521.0, 0.280),
    (951.0, 0.423),
    (2187.0, 0.393),
];

pub const REFERENCE_SIDE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyConfig {
    /// Forward noising steps of the model's own schedule.
    pub lambda: usize,
    pub blur_sigma: f64,
    pub threshold_frac: f64,
    pub binarize_eps: f64,
    /// Lesions darker than the tissue: the difference is negated.
    pub dark_lesions: bool,
}

impl AnomalyConfig {
    /// Defaults for an `side x side` input.
    pub fn new(lambda: usize, side: usize) -> Self {
        Self {
            lambda,
            blur_sigma: side as f64 / 64.0,
            threshold_frac: 0.30,
            binarize_eps: 0.05,
            dark_lesions: false,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.lambda >= sched.steps() {
            return Err(Error::Config(format!(
                "lambda must be below T = {}, got {}",
                sched.steps(),
                self.lambda
            )));
        }
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return Err(Error::Config(format!("threshold_frac must be in (0, 1), got {}", self.threshold_frac)));
        }
        if !(self.binarize_eps >= 0.0 && self.binarize_eps < 1.0) {
            return Err(Error::Config(format!("binarize_eps must be in [0, 1), got {}", self.binarize_eps)));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Step of `sched` whose cumulative signal level is closest to that of step
/// `reference_lambda` of the 1000-step reference schedule.
pub fn native_lambda(reference_lambda: usize, sched: &NoiseSchedule) -> Result<usize> {
    let reference = NoiseSchedule::reference();
    if reference_lambda >= reference.steps() {
        return Err(Error::Config(format!(
            "reference lambda must be below {}, got {reference_lambda}",
            reference.steps()
        )));
    }
    if reference_lambda == 0 {
        return Ok(0);
    }
    let target = reference.alpha_bar(reference_lambda).ln();
    let best = (1..sched.steps())
        .min_by(|&a, &b| {
            let da = (sched.alpha_bar(a).ln() - target).abs();
            let db = (sched.alpha_bar(b).ln() - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(1);
    Ok(best)
}

/// Noises `img` to level `lambda` and runs the ancestral sampler back to 0.
/// `lambda = 0` returns the input.
pub fn renoise_denoise_with_rng(
    img: &Plane,
    net: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &AnomalyConfig,
    rng: &mut impl Rng,
) -> Result<Plane> {
    cfg.validate(sched)?;
    if cfg.lambda == 0 {
        return Ok(img.clone());
    }
    let (h, w) = img.shape();
    let eps = standard_normal_plane(h, w, rng);
    let x = forward_noise(img, cfg.lambda, &eps, sched)?;
    let traj: Vec<(usize, usize)> = (1..=cfg.lambda).rev().map(|t| (t, t - 1)).collect();
    reverse_from(net, x, &[], &traj, sched, true, None, rng)
}

pub fn renoise_denoise(
    img: &Plane,
    net: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &AnomalyConfig,
    seed: u64,
) -> Result<Plane> {
    renoise_denoise_with_rng(img, net, sched, cfg, &mut patch_rng(seed, 0))
}

/// Remaps the in-mask values of `src` so their 256-bin distribution follows
/// the in-mask values of `reference`. Each source bin goes to the
/// reference's lower empirical quantile at the bin's mid-rank. Pixels
/// outside the mask are untouched.
pub fn histogram_match(src: &Plane, reference: &Plane, mask: &BreastMask) -> Result<Plane> {
    src.ensure_same_shape(reference)?;
    if mask.mask.shape() != src.shape() {
        return Err(Error::ShapeMismatch {
            expected: src.shape(),
            found: mask.mask.shape(),
        });
    }
    if mask.mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let inside = mask.mask.as_slice();
    let mut counts = [0usize; 256];
    for (&v, _) in src.as_slice().iter().zip(inside).filter(|(_, &m)| m) {
        counts[histogram_bin(v)] += 1;
    }
    let mut sorted: Vec<f64> = reference
        .as_slice()
        .iter()
        .zip(inside)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    sorted.sort_by(f64::total_cmp);
    let (n, m) = (mask.mask.count() as f64, sorted.len() as f64);
    let mut lut = [0.0f64; 256];
    let mut below = 0usize;
    for (b, &c) in counts.iter().enumerate() {
        let f = (below as f64 + 0.5 * c as f64) / n;
        let idx = ((f * m).ceil() as usize).clamp(1, sorted.len()) - 1;
        lut[b] = sorted[idx];
        below += c;
    }
    let mut out = src.clone();
    for (v, _) in out.as_mut_slice().iter_mut().zip(inside).filter(|(_, &m)| m) {
        *v = lut[histogram_bin(*v)];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyResult {
    #[serde(skip)]
    pub map: Plane,
    #[serde(skip)]
    pub mask: Mask,
    pub iou: Option<f64>,
    /// Ground-truth lesion area when given, otherwise the predicted area.
    pub lesion_area_px: usize,
    pub bucket_id: usize,
}

/// `|a & b| / |a | b|`, and 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Index of the reference bucket whose median area (rescaled to `side`) is
/// nearest to `area` on a log scale.
pub fn bucket_for_area(area: usize, side: usize) -> usize {
    let scale = (side as f64 / REFERENCE_SIDE as f64).powi(2);
    let a = (area.max(1) as f64).ln();
    (0..REFERENCE_BUCKETS.len())
        .min_by(|&i, &j| {
            let di = ((REFERENCE_BUCKETS[i].0 * scale).ln() - a).abs();
            let dj = ((REFERENCE_BUCKETS[j].0 * scale).ln() - a).abs();
            di.total_cmp(&dj)
        })
        .unwrap_or(0)
}

/// Difference map and binary prediction from an image and its healthy
/// reconstruction. With `truth`, the IoU against it is filled in.
pub fn build_anomaly_map(
    original: &Plane,
    denoised: &Plane,
    mask: &BreastMask,
    cfg: &AnomalyConfig,
    truth: Option<&Mask>,
) -> Result<AnomalyResult> {
    original.ensure_same_shape(denoised)?;
    let matched = histogram_match(denoised, original, mask)?;
    let inside = mask.mask.as_slice();
    let sign = if cfg.dark_lesions { -1.0 } else { 1.0 };
    let mut d = original.zip_map(&matched, |o, m| (sign * (o - m)).max(0.0))?;
    for (v, &m) in d.as_mut_slice().iter_mut().zip(inside) {
        if !m {
            *v = 0.0;
        }
    }
    let peak = d.max();
    let (h, w) = d.shape();
    let (map, predicted) = if peak > 0.0 {
        let floor = cfg.threshold_frac * peak;
        let d = d.map(|v| if v < floor { 0.0 } else { v });
        let mut blurred = gaussian_blur_sigma(&d, cfg.blur_sigma);
        for (v, &m) in blurred.as_mut_slice().iter_mut().zip(inside) {
            if !m {
                *v = 0.0;
            }
        }
        let cut = cfg.binarize_eps * blurred.max();
        let predicted = Mask::above(&blurred, cut);
        (blurred, predicted)
    } else {
        (Plane::zeros(h, w), Mask::empty(h, w))
    };
    let iou = truth.map(|t| iou(&predicted, t)).transpose()?;
    let lesion_area_px = truth.map_or(predicted.count(), Mask::count);
    Ok(AnomalyResult {
        bucket_id: bucket_for_area(lesion_area_px, h.max(w)),
        map,
        mask: predicted,
        iou,
        lesion_area_px,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: usize,
    pub count: usize,
    pub median_area: f64,
    pub min_area: usize,
    pub max_area: usize,
    pub mean_iou: f64,
}

/// Sorts results by lesion area and splits them into `buckets` groups of
/// `ceil(n / buckets)` (the last group takes the remainder).
pub fn evaluate_buckets(results: &[AnomalyResult], buckets: usize) -> Result<Vec<BucketRow>> {
    if results.is_empty() {
        return Err(Error::Contract("no results to bucket".into()));
    }
    if buckets == 0 {
        return Err(Error::Config("bucket count must be positive".into()));
    }
    let mut rows: Vec<(usize, f64)> = results
        .iter()
        .map(|r| {
            r.iou
                .map(|i| (r.lesion_area_px, i))
                .ok_or_else(|| Error::Contract("result has no ground-truth IoU".into()))
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|&(a, _)| a);
    let size = rows.len().div_ceil(buckets);
    Ok(rows
        .chunks(size)
        .enumerate()
        .map(|(bucket, chunk)| {
            let areas: Vec<usize> = chunk.iter().map(|&(a, _)| a).collect();
            let mid = areas.len() / 2;
            let median_area = if areas.len() % 2 == 1 {
                areas[mid] as f64
            } else {
                (areas[mid - 1] + areas[mid]) as f64 / 2.0
            };
            BucketRow {
                bucket,
                count: chunk.len(),
                median_area,
                min_area: areas[0],
                max_area: areas[areas.len() - 1],
                mean_iou: chunk.iter().map(|&(_, i)| i).sum::<f64>() / chunk.len() as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticGaussian;
    use crate::schedule::VarianceKind;
    use proptest::prelude::*;

    fn full(side: usize) -> BreastMask {
        BreastMask::from_mask(Mask::full(side, side)).unwrap()
    }

    #[test]
    fn identity_match_within_bin() {
        let p = Plane::from_fn(20, 20, |r, c| ((r * 37 + c * 11) % 97) as f64 / 97.0);
        let m = histogram_match(&p, &p, &full(20)).unwrap();
        for (a, b) in p.as_slice().iter().zip(m.as_slice()) {
            assert_eq!(histogram_bin(*a), histogram_bin(*b));
        }
    }

    #[test]
    fn constant_source_goes_to_median() {
        let src = Plane::filled(4, 4, 0.7);
        let reference = Plane::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 16.0);
        let m = histogram_match(&src, &reference, &full(4)).unwrap();
        // 16 values, lower median is the 8th smallest.
        assert!(m.as_slice().iter().all(|&v| v == 7.0 / 16.0));
    }

    #[test]
    fn two_level_match() {
        let src = Plane::from_fn(4, 4, |r, _| if r < 2 { 0.2 } else { 0.8 });
        let reference = Plane::from_fn(4, 4, |_, c| if c % 2 == 0 { 0.3 } else { 0.9 });
        let m = histogram_match(&src, &reference, &full(4)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), if r < 2 { 0.3 } else { 0.9 });
            }
        }
    }

    #[test]
    fn outside_mask_unchanged_and_empty_mask_rejected() {
        let src = Plane::from_fn(6, 6, |r, c| (r + c) as f64 / 12.0);
        let reference = src.map(|v| v * 0.5);
        let mask = BreastMask::from_mask(Mask::from_fn(6, 6, |r, _| r < 3)).unwrap();
        let m = histogram_match(&src, &reference, &mask).unwrap();
        for r in 3..6 {
            assert_eq!(m.row(r), src.row(r));
        }
        let empty = BreastMask {
            mask: Mask::empty(6, 6),
            area_px: 0,
            bbox: (0, 0, 0, 0),
        };
        assert!(matches!(histogram_match(&src, &reference, &empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn identical_images_give_empty_map() {
        let p = Plane::from_fn(16, 16, |r, c| (r * c) as f64 / 256.0);
        let res = build_anomaly_map(&p, &p, &full(16), &AnomalyConfig::new(10, 16), Some(&Mask::empty(16, 16))).unwrap();
        assert!(res.mask.is_empty());
        assert!(res.map.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(res.iou, Some(1.0));
    }

    #[test]
    fn faint_pixel_below_threshold_is_dropped() {
        let mut original = Plane::filled(32, 32, 0.5);
        original.set(5, 5, 1.5);
        original.set(20, 20, 0.7);
        let denoised = Plane::filled(32, 32, 0.5);
        let mut cfg = AnomalyConfig::new(10, 32);
        cfg.blur_sigma = 0.0;
        let res = build_anomaly_map(&original, &denoised, &full(32), &cfg, None).unwrap();
        assert!(res.mask.get(5, 5));
        assert!(!res.mask.get(20, 20));
        assert_eq!(res.mask.count(), 1);
    }

    #[test]
    fn dark_mode_negates() {
        let mut original = Plane::filled(16, 16, 0.5);
        original.set(8, 8, 0.1);
        let denoised = Plane::filled(16, 16, 0.5);
        let mut cfg = AnomalyConfig::new(10, 16);
        cfg.blur_sigma = 0.0;
        assert!(build_anomaly_map(&original, &denoised, &full(16), &cfg, None).unwrap().mask.is_empty());
        cfg.dark_lesions = true;
        assert!(build_anomaly_map(&original, &denoised, &full(16), &cfg, None).unwrap().mask.get(8, 8));
    }

    #[test]
    fn map_confined_to_breast() {
        let original = Plane::from_fn(24, 24, |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0);
        let denoised = Plane::filled(24, 24, 0.3);
        let mask = BreastMask::from_mask(Mask::from_fn(24, 24, |_, c| c < 12)).unwrap();
        let res = build_anomaly_map(&original, &denoised, &mask, &AnomalyConfig::new(10, 24), None).unwrap();
        assert!(res.mask.is_subset_of(&mask.mask));
        for (r, c) in Mask::from_fn(24, 24, |_, c| c >= 12).coords() {
            assert_eq!(res.map.get(r, c), 0.0);
        }
    }

    #[test]
    fn iou_cases() {
        let a = Mask::from_fn(4, 4, |r, c| r == 0 && c < 2);
        let b = Mask::from_fn(4, 4, |r, c| r == 0 && (1..3).contains(&c));
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &Mask::empty(4, 4)).unwrap(), 0.0);
        assert_eq!(iou(&Mask::empty(4, 4), &Mask::empty(4, 4)).unwrap(), 1.0);
    }

    fn result(area: usize, iou: f64) -> AnomalyResult {
        AnomalyResult {
            map: Plane::zeros(1, 1),
            mask: Mask::empty(1, 1),
            iou: Some(iou),
            lesion_area_px: area,
            bucket_id: 0,
        }
    }

    #[test]
    fn bucket_sizes_for_107() {
        let results: Vec<_> = (0..107).map(|i| result(1000 - i, 1.0)).collect();
        let rows = evaluate_buckets(&results, 6).unwrap();
        let counts: Vec<usize> = rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![18, 18, 18, 18, 18, 17]);
        assert!(rows.iter().all(|r| r.mean_iou == 1.0));
        assert!(rows.windows(2).all(|w| w[0].max_area <= w[1].min_area));
        assert!(evaluate_buckets(&[], 6).is_err());
    }

    #[test]
    fn reference_buckets_map_to_themselves() {
        for (i, &(area, _)) in REFERENCE_BUCKETS.iter().enumerate() {
            assert_eq!(bucket_for_area(area as usize, 256), i);
            assert_eq!(bucket_for_area((area / 4.0) as usize, 128), i);
        }
    }

    #[test]
    fn lambda_mapping() {
        let desk = NoiseSchedule::linear_matched(200, VarianceKind::Beta).unwrap();
        let reference = NoiseSchedule::reference();
        assert_eq!(native_lambda(700, &reference).unwrap(), 700);
        let l = native_lambda(700, &desk).unwrap();
        assert!((130..=150).contains(&l), "{l}");
        assert_eq!(native_lambda(0, &desk).unwrap(), 0);
        assert!(native_lambda(1000, &desk).is_err());
    }

    #[test]
    fn renoise_identity_and_range() {
        let s = NoiseSchedule::linear_matched(50, VarianceKind::Beta).unwrap();
        let net = AnalyticGaussian::uniform(8, 8, 0.5, 0.01, &s, 1).unwrap();
        let img = Plane::from_fn(8, 8, |r, c| (r + c) as f64 / 16.0);
        assert_eq!(renoise_denoise(&img, &net, &s, &AnomalyConfig::new(0, 8), 1).unwrap(), img);
        assert!(renoise_denoise(&img, &net, &s, &AnomalyConfig::new(50, 8), 1).is_err());
        let a = renoise_denoise(&img, &net, &s, &AnomalyConfig::new(20, 8), 1).unwrap();
        assert_eq!(a, renoise_denoise(&img, &net, &s, &AnomalyConfig::new(20, 8), 1).unwrap());
    }

    #[test]
    fn background_error_grows_with_lambda() {
        // Pixel std 3 against unit noise keeps the data weight of the
        // posterior well away from 0 and 1 across the sweep.
        use rand::SeedableRng;
        let s = NoiseSchedule::reference();
        let net = AnalyticGaussian::uniform(16, 16, 0.5, 9.0, &s, 1).unwrap();
        let mut prev = 0.0;
        for lambda in (100..=900).step_by(200) {
            let mut err = 0.0;
            for seed in 0..32u64 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let img = standard_normal_plane(16, 16, &mut rng).map(|z| 0.5 + 3.0 * z);
                let out = renoise_denoise(&img, &net, &s, &AnomalyConfig::new(lambda, 16), seed).unwrap();
                err += out.mse(&img).unwrap();
            }
            assert!(err > prev, "lambda {lambda}: {err} <= {prev}");
            prev = err;
        }
    }

    proptest! {
        #[test]
        fn match_is_monotone(vals in proptest::collection::vec(0.0f64..1.0, 36), refs in proptest::collection::vec(0.0f64..1.0, 36)) {
            let src = Plane::from_vec(6, 6, vals).unwrap();
            let reference = Plane::from_vec(6, 6, refs).unwrap();
            let m = histogram_match(&src, &reference, &full(6)).unwrap();
            for i in 0..36 {
                for j in 0..36 {
                    if src.as_slice()[i] < src.as_slice()[j] {
                        prop_assert!(m.as_slice()[i] <= m.as_slice()[j]);
                    }
                }
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 25), b in proptest::collection::vec(any::<bool>(), 25)) {
            let ma = Mask::from_fn(5, 5, |r, c| a[r * 5 + c]);
            let mb = Mask::from_fn(5, 5, |r, c| b[r * 5 + c]);
            let x = iou(&ma, &mb).unwrap();
            prop_assert_eq!(x, iou(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(iou(&ma, &ma).unwrap(), 1.0);
        }

        #[test]
        fn map_nonnegative(vals in proptest::collection::vec(0.0f64..1.0, 64), den in proptest::collection::vec(0.0f64..1.0, 64)) {
            let o = Plane::from_vec(8, 8, vals).unwrap();
            let d = Plane::from_vec(8, 8, den).unwrap();
            let res = build_anomaly_map(&o, &d, &full(8), &AnomalyConfig::new(5, 8), None).unwrap();
            prop_assert!(res.map.as_slice().iter().all(|&v| v >= 0.0));
        }
    }
}
