//! Training samples for the three stages: crops, contexts and the area
//! downscaling operator.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::ChannelStack;
use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};
use crate::preprocess::BreastMask;

/// Patch side `s`, context ratio `k`, full side `n`, stitching `overlap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub s: usize,
    pub k: usize,
    pub n: usize,
    pub overlap: usize,
}

impl GeometryConfig {
    pub fn desk() -> Self {
        Self {
            s: 32,
            k: 3,
            n: 288,
            overlap: 4,
        }
    }

    pub fn paper() -> Self {
        Self {
            s: 256,
            k: 3,
            n: 3840,
            overlap: 32,
        }
    }

    /// Overlap for a patch side, proportional to 32 px at `s = 256`, at least 2.
    pub fn scaled_overlap(s: usize) -> usize {
        ((32.0 * s as f64 / 256.0).round() as usize).max(2)
    }

    pub fn mid_side(&self) -> usize {
        self.n / self.k
    }

    /// Side of the full-resolution window a local context covers.
    pub fn context_side(&self) -> usize {
        self.k * self.s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.s == 0 || self.k == 0 || self.n == 0 {
            return bad(format!("geometry sides must be positive: {self:?}"));
        }
        if !self.n.is_multiple_of(self.s) {
            return bad(format!("N = {} is not divisible by s = {}", self.n, self.s));
        }
        if !self.n.is_multiple_of(self.k) {
            return bad(format!("N = {} is not divisible by k = {}", self.n, self.k));
        }
        if self.overlap >= self.s {
            return bad(format!("overlap {} must be below s = {}", self.overlap, self.s));
        }
        if self.mid_side() < self.s {
            return bad(format!("mid side N/k = {} is smaller than s = {}", self.mid_side(), self.s));
        }
        Ok(())
    }
}

/// Per-axis weights of area averaging from `n_in` to `n_out` samples:
/// output `i` covers `[i n_in / n_out, (i + 1) n_in / n_out)`.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            // Integer endpoints keep integer ratios exact.
            let (a_num, b_num) = (i * n_in, (i + 1) * n_in);
            let (a, b) = (a_num as f64 / n_out as f64, b_num as f64 / n_out as f64);
            let first = a_num / n_out;
            let last = b_num.div_ceil(n_out);
            (first..last)
                .filter_map(|j| {
                    let lo = a.max(j as f64);
                    let hi = b.min((j + 1) as f64);
                    (hi > lo).then(|| (j, (hi - lo) / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging reduction to `out_h x out_w`.
pub fn downscale_to(p: &Plane, out_h: usize, out_w: usize) -> Result<Plane> {
    let (h, w) = p.shape();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Contract(format!(
            "downscale from {h}x{w} to {out_h}x{out_w} is not a reduction"
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(p.clone());
    }
    let wx = area_weights(w, out_w);
    let wy = area_weights(h, out_h);
    let mut rows = vec![0.0f64; h * out_w];
    for r in 0..h {
        let src = p.row(r);
        for (c, taps) in wx.iter().enumerate() {
            rows[r * out_w + c] = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
        }
    }
    let mut out = vec![0.0f64; out_h * out_w];
    for (r, taps) in wy.iter().enumerate() {
        for c in 0..out_w {
            out[r * out_w + c] = taps.iter().map(|&(j, wt)| wt * rows[j * out_w + c]).sum::<f64>();
        }
    }
    Plane::from_vec(out_h, out_w, out)
}

pub fn downscale(p: &Plane, out_side: usize) -> Result<Plane> {
    downscale_to(p, out_side, out_side)
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale_nearest(p: &Plane, factor: usize) -> Plane {
    let (h, w) = p.shape();
    Plane::from_fn(h * factor, w * factor, |r, c| p.get(r / factor, c / factor))
}

/// Top-left of a `size` window centred on `center`, translated inward so it
/// lies inside `[0, extent)`.
pub fn clamp_window(center: usize, size: usize, extent: usize) -> usize {
    center.saturating_sub(size / 2).min(extent.saturating_sub(size))
}

/// Clean channels for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    /// Stage 3: the full-resolution patch. Stage 2: the downscaled context crop.
    pub patch: Plane,
    /// Stage 3: downscaled context around the patch. Stage 2: shifted global.
    pub local_ctx: Plane,
    pub global_ctx: Plane,
    /// Effective centre after clamping, in full-resolution pixels.
    pub center: (usize, usize),
}

impl TrainingTriple {
    pub fn to_stack(&self) -> ChannelStack {
        ChannelStack::new(vec![self.patch.clone(), self.local_ctx.clone(), self.global_ctx.clone()])
            .expect("channels share the patch shape")
    }
}

fn check_full(full: &Plane, g: &GeometryConfig) -> Result<()> {
    g.validate()?;
    if full.shape() != (g.n, g.n) {
        return Err(Error::ShapeMismatch {
            expected: (g.n, g.n),
            found: full.shape(),
        });
    }
    Ok(())
}

/// Stage-3 example: the patch at `center`, a downscaled `(k s)^2` window
/// concentric with it (zero outside the image), and the downscaled image.
pub fn extract_stage3_triple(full: &Plane, center: (usize, usize), g: &GeometryConfig) -> Result<TrainingTriple> {
    check_full(full, g)?;
    let s = g.s;
    let top = clamp_window(center.0, s, g.n);
    let left = clamp_window(center.1, s, g.n);
    let patch = full.crop(top, left, s, s)?;
    let local_src = local_context_source(full, top, left, g);
    Ok(TrainingTriple {
        patch,
        local_ctx: downscale(&local_src, s)?,
        global_ctx: downscale(full, s)?,
        center: (top + s / 2, left + s / 2),
    })
}

/// The `(k s)^2` full-resolution window whose centre `s x s` block is the
/// patch at `(top, left)`.
pub fn local_context_source(full: &Plane, top: usize, left: usize, g: &GeometryConfig) -> Plane {
    let margin = ((g.k - 1) * g.s / 2) as isize;
    let cs = g.context_side();
    full.crop_zero_padded(top as isize - margin, left as isize - margin, cs, cs)
}

/// Translate so `center` lands on the image centre (zero fill), then
/// downscale to `out_side`.
pub fn shift_global(full: &Plane, center: (usize, usize), out_side: usize) -> Result<Plane> {
    let (h, w) = full.shape();
    if center.0 >= h || center.1 >= w {
        return Err(Error::Contract(format!("centre {center:?} outside {h}x{w}")));
    }
    let dr = center.0 as isize - (h / 2) as isize;
    let dc = center.1 as isize - (w / 2) as isize;
    let shifted = full.crop_zero_padded(dr, dc, h, w);
    downscale_to(&shifted, out_side, out_side * w / h)
}

/// Stage-2 example: the downscaled `(k s)^2` crop at `center`, the shifted
/// global context and the plain global context.
pub fn extract_stage2_pair(full: &Plane, center: (usize, usize), g: &GeometryConfig) -> Result<TrainingTriple> {
    check_full(full, g)?;
    let cs = g.context_side();
    if cs > g.n {
        return Err(Error::Config(format!("context side {cs} exceeds N = {}", g.n)));
    }
    let top = clamp_window(center.0, cs, g.n);
    let left = clamp_window(center.1, cs, g.n);
    let eff = (top + cs / 2, left + cs / 2);
    Ok(TrainingTriple {
        patch: downscale(&full.crop(top, left, cs, cs)?, g.s)?,
        local_ctx: shift_global(full, eff, g.s)?,
        global_ctx: downscale(full, g.s)?,
        center: eff,
    })
}

/// A mask pixel drawn uniformly.
pub fn sample_center_with(mask: &Mask, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let pick = rng.random_range(0..n);
    Ok(mask.coords().nth(pick).expect("pick < count"))
}

pub fn sample_patch_center(mask: &BreastMask, seed: u64) -> Result<(usize, usize)> {
    sample_center_with(&mask.mask, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Which network a sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Global,
    Local,
    Patch,
}

impl Stage {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Stage::Global),
            2 => Ok(Stage::Local),
            3 => Ok(Stage::Patch),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Stage::Global => 1,
            Stage::Local => 2,
            Stage::Patch => 3,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Stage::Global => 1,
            _ => 3,
        }
    }
}

/// Deterministic sample source: the sample for an index depends only on
/// `(seed, index)`, never on call order.
pub trait SampleSource: Sync {
    fn arity(&self) -> usize;
    fn sample(&self, index: u64) -> Result<ChannelStack>;
}

/// Preprocessed full-resolution images with their masks, cut into stage
/// samples on demand.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Vec<(Plane, Mask)>,
    globals: Vec<Plane>,
    geometry: GeometryConfig,
    stage: Stage,
    seed: u64,
}

impl ImageSet {
    pub fn new(images: Vec<(Plane, Mask)>, geometry: GeometryConfig, stage: Stage, seed: u64) -> Result<Self> {
        geometry.validate()?;
        if images.is_empty() {
            return Err(Error::DegenerateInput("training set is empty".into()));
        }
        let mut globals = Vec::with_capacity(images.len());
        for (p, m) in &images {
            if p.shape() != (geometry.n, geometry.n) {
                return Err(Error::ShapeMismatch {
                    expected: (geometry.n, geometry.n),
                    found: p.shape(),
                });
            }
            p.ensure_same_shape(&m.to_plane())?;
            if m.is_empty() {
                return Err(Error::EmptyMask);
            }
            globals.push(downscale(p, geometry.s)?);
        }
        Ok(Self {
            images,
            globals,
            geometry,
            stage,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl SampleSource for ImageSet {
    fn arity(&self) -> usize {
        self.stage.arity()
    }

    fn sample(&self, index: u64) -> Result<ChannelStack> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let which = rng.random_range(0..self.images.len());
        if self.stage == Stage::Global {
            return ChannelStack::new(vec![self.globals[which].clone()]);
        }
        let (full, mask) = &self.images[which];
        let center = sample_center_with(mask, &mut rng)?;
        let triple = match self.stage {
            Stage::Local => extract_stage2_pair(full, center, &self.geometry)?,
            _ => extract_stage3_triple(full, center, &self.geometry)?,
        };
        Ok(triple.to_stack())
    }
}

/// Fixed list of clean stacks, cycled by index.
#[derive(Debug, Clone)]
pub struct StackList(pub Vec<ChannelStack>);

impl SampleSource for StackList {
    fn arity(&self) -> usize {
        self.0.first().map_or(0, ChannelStack::arity)
    }

    fn sample(&self, index: u64) -> Result<ChannelStack> {
        if self.0.is_empty() {
            return Err(Error::DegenerateInput("sample list is empty".into()));
        }
        Ok(self.0[(index % self.0.len() as u64) as usize].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Lesion,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: String,
    pub label: Label,
}

/// Parses `path<TAB>split<TAB>label` lines; blank lines and `#` comments
/// are skipped. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |detail: String| Error::Format {
            kind: "manifest",
            detail: format!("line {}: {detail}", i + 1),
        };
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let label = match fields[2].trim() {
            "healthy" => Label::Healthy,
            "lesion" => Label::Lesion,
            "unknown" => Label::Unknown,
            other => return Err(bad(format!("unknown label {other:?}"))),
        };
        let p = PathBuf::from(fields[0]);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            split: fields[1].to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    fn box_mean(p: &Plane, top: usize, left: usize, size: usize) -> f64 {
        let mut s = 0.0;
        for r in top..top + size {
            for c in left..left + size {
                s += p.get(r, c);
            }
        }
        s / (size * size) as f64
    }

    #[test]
    fn geometry_profiles() {
        GeometryConfig::desk().validate().unwrap();
        GeometryConfig::paper().validate().unwrap();
        assert_eq!(GeometryConfig::desk().mid_side(), 96);
        assert_eq!(GeometryConfig::paper().mid_side(), 1280);
        assert_eq!(GeometryConfig::scaled_overlap(256), 32);
        assert_eq!(GeometryConfig::scaled_overlap(32), 4);
        assert_eq!(GeometryConfig::scaled_overlap(8), 2);
        let mut g = GeometryConfig::desk();
        g.overlap = 32;
        assert!(g.validate().is_err());
        g = GeometryConfig::desk();
        g.n = 290;
        assert!(g.validate().is_err());
    }

    #[test]
    fn downscale_examples() {
        let c = Plane::filled(12, 12, 0.3);
        assert!(downscale(&c, 5).unwrap().as_slice().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let checker = Plane::from_fn(4, 4, |r, c| ((r + c) % 2) as f64);
        assert_eq!(downscale(&checker, 2).unwrap().as_slice(), &[0.5; 4]);
        assert!(matches!(downscale(&c, 13), Err(Error::Contract(_))));
    }

    #[test]
    fn downscale_matches_box_means() {
        let p = random_plane(96, 96, 1);
        let d = downscale(&p, 32).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                assert!((d.get(r, c) as f64 - box_mean(&p, 3 * r, 3 * c, 3)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fractional_downscale_preserves_mean() {
        let p = random_plane(10, 10, 2);
        let d = downscale(&p, 3).unwrap();
        assert!((d.mean() - p.mean()).abs() < 1e-6);
    }

    #[test]
    fn stage3_patch_is_centre_of_context() {
        let g = GeometryConfig::desk();
        let full = random_plane(288, 288, 3);
        for center in [(144, 144), (5, 280), (100, 17), (287, 0)] {
            let t = extract_stage3_triple(&full, center, &g).unwrap();
            let (top, left) = (t.center.0 - 16, t.center.1 - 16);
            let src = local_context_source(&full, top, left, &g);
            assert_eq!(src.crop(32, 32, 32, 32).unwrap(), t.patch);
            for r in 0..32 {
                for c in 0..32 {
                    assert_eq!(t.patch.get(r, c), full.get(top + r, left + c));
                }
            }
        }
    }

    #[test]
    fn stage3_k1_local_equals_patch() {
        let g = GeometryConfig { s: 32, k: 1, n: 96, overlap: 4 };
        let full = random_plane(96, 96, 4);
        let t = extract_stage3_triple(&full, (40, 50), &g).unwrap();
        assert_eq!(t.local_ctx, t.patch);
    }

    #[test]
    fn constant_image_gives_constant_channels() {
        let g = GeometryConfig::desk();
        let full = Plane::filled(288, 288, 0.7);
        let t = extract_stage3_triple(&full, (144, 144), &g).unwrap();
        for ch in [&t.patch, &t.local_ctx, &t.global_ctx] {
            assert!(ch.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
        let t = extract_stage2_pair(&full, (144, 144), &g).unwrap();
        for ch in [&t.patch, &t.local_ctx, &t.global_ctx] {
            assert!(ch.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
    }

    #[test]
    fn shift_global_reindexing() {
        let full = random_plane(16, 16, 5);
        assert_eq!(shift_global(&full, (8, 8), 16).unwrap(), full);
        let shifted = shift_global(&full, (4, 4), 16).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let want = if r >= 4 && c >= 4 { full.get(r - 4, c - 4) } else { 0.0 };
                assert_eq!(shifted.get(r, c), want);
            }
        }
        assert!(shift_global(&Plane::zeros(16, 16), (3, 9), 8).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage2_examples() {
        let g = GeometryConfig::desk();
        let full = random_plane(288, 288, 6);
        let t = extract_stage2_pair(&full, (144, 144), &g).unwrap();
        assert_eq!(t.local_ctx, t.global_ctx);
        let t = extract_stage2_pair(&full, (60, 200), &g).unwrap();
        let (top, left) = (t.center.0 - 48, t.center.1 - 48);
        for r in 0..32 {
            for c in 0..32 {
                let want = box_mean(&full, top + 3 * r, left + 3 * c, 3);
                assert!((t.patch.get(r, c) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn center_sampling() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 3, true);
        let bm = BreastMask::from_mask(m.clone()).unwrap();
        assert_eq!(sample_patch_center(&bm, 9).unwrap(), (2, 3));
        m.set(4, 0, true);
        let bm = BreastMask::from_mask(m).unwrap();
        assert_eq!(sample_patch_center(&bm, 77).unwrap(), sample_patch_center(&bm, 77).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000)
            .filter(|_| sample_center_with(&bm.mask, &mut rng).unwrap() == (2, 3))
            .count();
        assert!((hits as f64 / 1e4 - 0.5).abs() <= 0.02, "{hits}");
        assert!(matches!(sample_center_with(&Mask::empty(3, 3), &mut rng), Err(Error::EmptyMask)));
    }

    #[test]
    fn image_set_is_index_deterministic() {
        let g = GeometryConfig::desk();
        let imgs = vec![(random_plane(288, 288, 7), Mask::full(288, 288))];
        let set = ImageSet::new(imgs, g, Stage::Patch, 3).unwrap();
        assert_eq!(set.sample(5).unwrap(), set.sample(5).unwrap());
        assert_ne!(set.sample(5).unwrap(), set.sample(6).unwrap());
        assert_eq!(set.arity(), 3);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\na.png\ttrain\thealthy\n/abs/b.pgm\ttest\tlesion\n\nc.png\tval\tunknown\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].path, PathBuf::from("/data/a.png"));
        assert_eq!(m[1].path, PathBuf::from("/abs/b.pgm"));
        assert_eq!(m[1].label, Label::Lesion);
        assert!(parse_manifest("a\tb\tsick\n", Path::new(".")).is_err());
        assert!(parse_manifest("a\tb\n", Path::new(".")).is_err());
    }

    proptest! {
        #[test]
        fn downscale_commutes_with_flip(seed in 0u64..1000, side in 4usize..40, out in 1usize..4) {
            let p = random_plane(side, side, seed);
            let o = (side / out).max(1);
            let a = downscale(&p.flip_horizontal(), o).unwrap();
            let b = downscale(&p, o).unwrap().flip_horizontal();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn channels_stay_in_unit_range(seed in 0u64..200, r in 0usize..288, c in 0usize..288) {
            let g = GeometryConfig::desk();
            let full = random_plane(288, 288, seed);
            for t in [extract_stage3_triple(&full, (r, c), &g).unwrap(), extract_stage2_pair(&full, (r, c), &g).unwrap()] {
                for ch in [&t.patch, &t.local_ctx, &t.global_ctx] {
                    prop_assert!(ch.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
