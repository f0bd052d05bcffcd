//! Global image, stitched mid-resolution plane, stitched full-resolution
//! plane; and super-resolution from a supplied low-resolution image.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{downscale, shift_global, upscale_nearest, GeometryConfig};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::sampler::{generate_plane_observed, plan_patch_grid, sample, PatchRecord, SamplerPlan};
use crate::schedule::NoiseSchedule;

/// The three networks plus the shared geometry and sampler settings.
pub struct StageModels<'a> {
    pub global: &'a dyn NoisePredictor,
    pub local: &'a dyn NoisePredictor,
    pub patch: &'a dyn NoisePredictor,
    pub geometry: GeometryConfig,
    pub schedule: &'a NoiseSchedule,
    pub plan: SamplerPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub global: Plane,
    pub mid: Plane,
    pub full: Plane,
}

const STAGE_GLOBAL: u64 = 1;
const STAGE_MID: u64 = 2;
const STAGE_FULL: u64 = 3;

/// Independent seed for one stage of a run.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | stage);
    rng.next_u64()
}

impl StageModels<'_> {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        for (name, net, arity) in [("global", self.global, 1), ("local", self.local, 3), ("patch", self.patch, 3)] {
            if net.arity() != arity {
                return Err(Error::Config(format!(
                    "{name} model takes {} channels, expected {arity}",
                    net.arity()
                )));
            }
        }
        Ok(())
    }

    fn check_side(&self, p: &Plane, side: usize, what: &str) -> Result<()> {
        if p.shape() != (side, side) {
            return Err(Error::Config(format!(
                "{what} must be {side}x{side}, got {}x{}",
                p.height(),
                p.width()
            )));
        }
        Ok(())
    }

    pub fn generate_global(&self, seed: u64) -> Result<Plane> {
        self.validate()?;
        let s = self.geometry.s;
        Ok(sample(self.global, (s, s), &[], self.schedule, self.plan, None, seed)?.clamp01())
    }

    pub fn generate_mid(&self, global: &Plane, seed: u64) -> Result<Plane> {
        self.generate_mid_observed(global, seed, &mut |_| {})
    }

    /// Stage 2 over the `N/k` plane; each patch sees the global context
    /// shifted to its full-resolution centre, and the global context itself.
    pub fn generate_mid_observed(
        &self,
        global: &Plane,
        seed: u64,
        observer: &mut dyn FnMut(&PatchRecord),
    ) -> Result<Plane> {
        self.validate()?;
        let g = self.geometry;
        self.check_side(global, g.s, "global context")?;
        let grid = plan_patch_grid(g.mid_side(), g.s, g.overlap)?;
        let upscaled = upscale_nearest(global, g.n / g.s);
        let mut provider = |_: usize, (top, left): (usize, usize)| -> Result<Vec<Plane>> {
            let center = ((top + g.s / 2) * g.k, (left + g.s / 2) * g.k);
            let center = (center.0.min(g.n - 1), center.1.min(g.n - 1));
            Ok(vec![shift_global(&upscaled, center, g.s)?, global.clone()])
        };
        let mid = generate_plane_observed(self.local, &mut provider, &grid, self.schedule, self.plan, seed, observer)?;
        Ok(mid.clamp01())
    }

    pub fn generate_full(&self, mid: &Plane, global: &Plane, seed: u64) -> Result<Plane> {
        self.generate_full_observed(mid, global, seed, &mut |_| {})
    }

    /// Stage 3 over the `N` plane; each patch sees the `s x s` window of the
    /// mid plane centred on its projection, and the global context.
    pub fn generate_full_observed(
        &self,
        mid: &Plane,
        global: &Plane,
        seed: u64,
        observer: &mut dyn FnMut(&PatchRecord),
    ) -> Result<Plane> {
        self.validate()?;
        stitch_full(self.patch, &self.geometry, self.schedule, self.plan, mid, global, seed, observer)
    }

    pub fn generate_mammogram(&self, seed: u64) -> Result<Generated> {
        let global = self.generate_global(stage_seed(seed, STAGE_GLOBAL))?;
        self.upscale(global, seed)
    }

    /// Stages 2 and 3 with `low_res` (already `s x s`) as the global context.
    pub fn super_resolve(&self, low_res: &Plane, seed: u64) -> Result<Generated> {
        self.check_side(low_res, self.geometry.s, "low-resolution input")?;
        self.upscale(low_res.clone(), seed)
    }

    fn upscale(&self, global: Plane, seed: u64) -> Result<Generated> {
        let mid = self.generate_mid(&global, stage_seed(seed, STAGE_MID))?;
        let full = self.generate_full(&mid, &global, stage_seed(seed, STAGE_FULL))?;
        Ok(Generated { global, mid, full })
    }
}

/// Stage 3 with only the patch model: stitches the `N x N` plane from a mid
/// plane and a global context.
#[allow(clippy::too_many_arguments)]
pub fn stitch_full(
    patch: &dyn NoisePredictor,
    g: &GeometryConfig,
    schedule: &NoiseSchedule,
    plan: SamplerPlan,
    mid: &Plane,
    global: &Plane,
    seed: u64,
    observer: &mut dyn FnMut(&PatchRecord),
) -> Result<Plane> {
    g.validate()?;
    if patch.arity() != 3 {
        return Err(Error::Config(format!("patch model takes {} channels, expected 3", patch.arity())));
    }
    for (p, side, what) in [(global, g.s, "global context"), (mid, g.mid_side(), "mid-resolution plane")] {
        if p.shape() != (side, side) {
            return Err(Error::Config(format!(
                "{what} must be {side}x{side}, got {}x{}",
                p.height(),
                p.width()
            )));
        }
    }
    let grid = plan_patch_grid(g.n, g.s, g.overlap)?;
    let mut provider = |_: usize, (top, left): (usize, usize)| -> Result<Vec<Plane>> {
        Ok(vec![mid_window(mid, (top, left), g), global.clone()])
    };
    let full = generate_plane_observed(patch, &mut provider, &grid, schedule, plan, seed, observer)?;
    Ok(full.clamp01())
}

/// `s x s` window of the mid plane centred on the projection of the
/// full-resolution patch at `(top, left)`, zero outside.
pub fn mid_window(mid: &Plane, (top, left): (usize, usize), g: &GeometryConfig) -> Plane {
    let project = |p: usize| ((p as f64 + g.s as f64 / 2.0) / g.k as f64 - g.s as f64 / 2.0).round() as isize;
    mid.crop_zero_padded(project(top), project(left), g.s, g.s)
}

/// Global and mid contexts taken from a real `N x N` image, for running
/// the later stages on ground-truth conditioning.
pub fn reference_contexts(full: &Plane, g: &GeometryConfig) -> Result<(Plane, Plane)> {
    g.validate()?;
    if full.shape() != (g.n, g.n) {
        return Err(Error::ShapeMismatch {
            expected: (g.n, g.n),
            found: full.shape(),
        });
    }
    Ok((downscale(full, g.s)?, downscale(full, g.mid_side())?))
}

/// Zero-pads a low-resolution image to a square (right and bottom) and
/// reduces it to `s x s`.
pub fn prepare_low_res(img: &Plane, s: usize) -> Result<Plane> {
    let side = img.height().max(img.width());
    if side < s {
        return Err(Error::Contract(format!("input side {side} is below s = {s}")));
    }
    let mut sq = Plane::zeros(side, side);
    sq.paste(img, 0, 0)?;
    downscale(&sq, s)
}
