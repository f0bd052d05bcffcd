//! Reverse-process driver, patch grids and overlap-conditioned stitching.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::denoiser::{ChannelStack, NoisePredictor};
use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};
use crate::schedule::{ddim_step, ddim_timesteps, ddpm_step, NoiseSchedule};

/// Full ancestral sampling or a deterministic DDIM subsequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerPlan {
    Ddpm,
    Ddim(usize),
}

impl SamplerPlan {
    /// `(t, t_prev)` pairs from `T` down to 0.
    pub fn trajectory(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        match *self {
            SamplerPlan::Ddpm => Ok((1..=steps).rev().map(|t| (t, t - 1)).collect()),
            SamplerPlan::Ddim(n) => {
                let ts = ddim_timesteps(steps, n)?;
                Ok(ts.windows(2).map(|w| (w[0], w[1])).collect())
            }
        }
    }
}

impl fmt::Display for SamplerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerPlan::Ddpm => f.write_str("ddpm"),
            SamplerPlan::Ddim(n) => write!(f, "ddim:{n}"),
        }
    }
}

impl FromStr for SamplerPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "ddpm" {
            return Ok(SamplerPlan::Ddpm);
        }
        if let Some(n) = s.strip_prefix("ddim:") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad DDIM step count in {s:?}")))?;
            if n == 0 {
                return Err(Error::Config("DDIM needs at least one step".into()));
            }
            return Ok(SamplerPlan::Ddim(n));
        }
        Err(Error::Config(format!("sampler plan must be \"ddpm\" or \"ddim:<n>\", got {s:?}")))
    }
}

impl Serialize for SamplerPlan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SamplerPlan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pixels of the target already fixed by neighbouring patches.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownRegion {
    pub mask: Mask,
    pub values: Plane,
}

impl KnownRegion {
    fn check(&self, shape: (usize, usize)) -> Result<()> {
        for found in [self.mask.shape(), self.values.shape()] {
            if found != shape {
                return Err(Error::ShapeMismatch { expected: shape, found });
            }
        }
        Ok(())
    }

    /// Overwrite masked pixels of `x` with the known values noised to level `t`.
    fn impose(&self, x: &mut Plane, t: usize, sched: &NoiseSchedule, rng: &mut impl Rng) {
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xs = x.as_mut_slice();
        for (i, (&m, &v)) in self.mask.as_slice().iter().zip(self.values.as_slice()).enumerate() {
            if !m {
                continue;
            }
            xs[i] = if t == 0 {
                v
            } else {
                let e: f64 = rng.sample(StandardNormal);
                a * v + b * e
            };
        }
    }
}

pub fn standard_normal_plane(h: usize, w: usize, rng: &mut impl Rng) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Runs `x` (channel 0, at level `traj[0].0`) down the trajectory with the
/// conditioning held fixed. Draw order per step: ancestral noise, then
/// known-region noise, both row-major.
#[allow(clippy::too_many_arguments)]
pub fn reverse_from(
    net: &dyn NoisePredictor,
    mut x: Plane,
    cond: &[Plane],
    traj: &[(usize, usize)],
    sched: &NoiseSchedule,
    stochastic: bool,
    known: Option<&KnownRegion>,
    rng: &mut impl Rng,
) -> Result<Plane> {
    if cond.len() + 1 != net.arity() {
        return Err(Error::Config(format!(
            "predictor takes {} channels but {} conditioning planes were given",
            net.arity(),
            cond.len()
        )));
    }
    let shape = x.shape();
    if let Some(k) = known {
        k.check(shape)?;
    }
    let mut channels = Vec::with_capacity(cond.len() + 1);
    channels.push(x.clone());
    channels.extend(cond.iter().cloned());
    let mut stack = ChannelStack::new(channels)?;
    for &(t, t_prev) in traj {
        *stack.target_mut() = x;
        let eps = net.predict(&stack, t)?;
        if eps.shape() != shape {
            return Err(Error::ShapeMismatch { expected: shape, found: eps.shape() });
        }
        x = if stochastic {
            let z = if t > 1 {
                standard_normal_plane(shape.0, shape.1, rng)
            } else {
                Plane::zeros(shape.0, shape.1)
            };
            ddpm_step(stack.target(), &eps, t, &z, sched)?
        } else {
            ddim_step(stack.target(), &eps, t, t_prev, sched)?
        };
        if let Some(k) = known {
            k.impose(&mut x, t_prev, sched, rng);
        }
        if !x.all_finite() {
            return Err(Error::Numeric {
                step: t,
                detail: "non-finite value in the reverse trajectory".into(),
            });
        }
    }
    Ok(x)
}

/// Draws a sample of channel 0 from pure noise. The known region, when
/// given, is imposed at the initial level and after every step, so it ends
/// equal to its values.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_rng(
    net: &dyn NoisePredictor,
    shape: (usize, usize),
    cond: &[Plane],
    sched: &NoiseSchedule,
    plan: SamplerPlan,
    known: Option<&KnownRegion>,
    rng: &mut impl Rng,
) -> Result<Plane> {
    let traj = plan.trajectory(sched.steps())?;
    let mut x = standard_normal_plane(shape.0, shape.1, rng);
    if let Some(k) = known {
        k.check(shape)?;
        k.impose(&mut x, sched.steps(), sched, rng);
    }
    reverse_from(net, x, cond, &traj, sched, plan == SamplerPlan::Ddpm, known, rng)
}

pub fn sample(
    net: &dyn NoisePredictor,
    shape: (usize, usize),
    cond: &[Plane],
    sched: &NoiseSchedule,
    plan: SamplerPlan,
    known: Option<&KnownRegion>,
    seed: u64,
) -> Result<Plane> {
    sample_with_rng(net, shape, cond, sched, plan, known, &mut patch_rng(seed, 0))
}

/// Independent stream per patch index.
pub fn patch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    /// Row-major `(top, left)` offsets.
    pub positions: Vec<(usize, usize)>,
    pub stride: usize,
    pub overlap: usize,
    pub plane_side: usize,
    pub patch_side: usize,
}

impl PatchGrid {
    /// Distinct offsets along one axis.
    pub fn offsets(&self) -> Vec<usize> {
        axis_offsets(self.plane_side, self.patch_side, self.stride)
    }
}

fn axis_offsets(plane_side: usize, s: usize, stride: usize) -> Vec<usize> {
    let n = (plane_side - s).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(plane_side - s)).collect()
}

pub fn plan_patch_grid(plane_side: usize, s: usize, overlap: usize) -> Result<PatchGrid> {
    if s == 0 || overlap >= s {
        return Err(Error::Config(format!("overlap {overlap} must be below patch side {s}")));
    }
    if s > plane_side {
        return Err(Error::Config(format!("patch side {s} exceeds plane side {plane_side}")));
    }
    let stride = s - overlap;
    let offs = axis_offsets(plane_side, s, stride);
    let positions = offs.iter().flat_map(|&r| offs.iter().map(move |&c| (r, c))).collect();
    Ok(PatchGrid {
        positions,
        stride,
        overlap,
        plane_side,
        patch_side: s,
    })
}

/// What happened at one grid position.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub known: Option<KnownRegion>,
    pub patch: Plane,
    pub conditioning: Vec<Plane>,
}

/// Generates patches in row-major order, each conditioned on whatever its
/// window shares with patches already written.
#[allow(clippy::too_many_arguments)]
pub fn generate_plane_observed(
    net: &dyn NoisePredictor,
    provider: &mut dyn FnMut(usize, (usize, usize)) -> Result<Vec<Plane>>,
    grid: &PatchGrid,
    sched: &NoiseSchedule,
    plan: SamplerPlan,
    seed: u64,
    observer: &mut dyn FnMut(&PatchRecord),
) -> Result<Plane> {
    let (side, s) = (grid.plane_side, grid.patch_side);
    let mut plane = Plane::zeros(side, side);
    let mut written = Mask::empty(side, side);
    for (index, &(top, left)) in grid.positions.iter().enumerate() {
        let cond = provider(index, (top, left))?;
        let mask = written.crop(top, left, s, s);
        let known = (!mask.is_empty()).then(|| KnownRegion {
            values: plane.crop(top, left, s, s).expect("grid window inside plane"),
            mask,
        });
        let mut rng = patch_rng(seed, index);
        let patch = sample_with_rng(net, (s, s), &cond, sched, plan, known.as_ref(), &mut rng)?;
        plane.paste(&patch, top, left)?;
        for r in top..top + s {
            for c in left..left + s {
                written.set(r, c, true);
            }
        }
        observer(&PatchRecord {
            index,
            top,
            left,
            known,
            patch,
            conditioning: cond,
        });
    }
    Ok(plane)
}

pub fn generate_plane(
    net: &dyn NoisePredictor,
    provider: &mut dyn FnMut(usize, (usize, usize)) -> Result<Vec<Plane>>,
    grid: &PatchGrid,
    sched: &NoiseSchedule,
    plan: SamplerPlan,
    seed: u64,
) -> Result<Plane> {
    generate_plane_observed(net, provider, grid, sched, plan, seed, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGaussian, ConstantPredictor};
    use crate::schedule::VarianceKind;
    use std::sync::Mutex;

    fn desk() -> NoiseSchedule {
        NoiseSchedule::linear_matched(200, VarianceKind::Beta).unwrap()
    }

    struct Recording<P> {
        inner: P,
        seen: Mutex<Vec<Vec<Plane>>>,
    }

    impl<P: NoisePredictor> NoisePredictor for Recording<P> {
        fn arity(&self) -> usize {
            self.inner.arity()
        }
        fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane> {
            self.seen.lock().unwrap().push(input.conditioning().to_vec());
            self.inner.predict(input, t)
        }
    }

    #[test]
    fn plan_parsing() {
        assert_eq!("ddpm".parse::<SamplerPlan>().unwrap(), SamplerPlan::Ddpm);
        assert_eq!("ddim:150".parse::<SamplerPlan>().unwrap(), SamplerPlan::Ddim(150));
        assert!("ddim:0".parse::<SamplerPlan>().is_err());
        assert!("euler".parse::<SamplerPlan>().is_err());
        assert_eq!(SamplerPlan::Ddim(7).to_string(), "ddim:7");
        let traj = SamplerPlan::Ddpm.trajectory(3).unwrap();
        assert_eq!(traj, vec![(3, 2), (2, 1), (1, 0)]);
    }

    #[test]
    fn grid_examples() {
        assert_eq!(plan_patch_grid(32, 32, 4).unwrap().positions, vec![(0, 0)]);
        assert_eq!(plan_patch_grid(96, 32, 4).unwrap().offsets(), vec![0, 28, 56, 64]);
        assert_eq!(plan_patch_grid(96, 32, 0).unwrap().offsets(), vec![0, 32, 64]);
        assert!(matches!(plan_patch_grid(96, 32, 32), Err(Error::Config(_))));
    }

    #[test]
    fn conditioning_untouched_and_known_strip_exact() {
        let sched = desk();
        let net = Recording {
            inner: AnalyticGaussian::uniform(8, 8, 0.5, 0.0025, &sched, 3).unwrap(),
            seen: Mutex::new(Vec::new()),
        };
        let cond = vec![Plane::filled(8, 8, 0.25), Plane::from_fn(8, 8, |r, c| (r * 8 + c) as f64 / 64.0)];
        let mask = Mask::from_fn(8, 8, |_, c| c < 4);
        let known = KnownRegion { mask: mask.clone(), values: Plane::filled(8, 8, 0.6) };
        let out = sample(&net, (8, 8), &cond, &sched, SamplerPlan::Ddpm, Some(&known), 3).unwrap();
        let seen = net.seen.lock().unwrap();
        assert_eq!(seen.len(), 200);
        assert!(seen.iter().all(|c| *c == cond));
        for (r, c) in mask.coords() {
            assert_eq!(out.get(r, c), 0.6);
        }
    }

    #[test]
    fn arity_mismatch_is_config_error() {
        let sched = desk();
        let net = ConstantPredictor::new(0.0, 3);
        let err = sample(&net, (4, 4), &[], &sched, SamplerPlan::Ddpm, None, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn nan_reports_step() {
        let sched = desk();
        let net = ConstantPredictor::new(f64::NAN, 1);
        let err = sample(&net, (4, 4), &[], &sched, SamplerPlan::Ddim(10), None, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 200, .. }));
    }

    #[test]
    fn single_position_grid_equals_single_sample() {
        let sched = desk();
        let net = AnalyticGaussian::uniform(16, 16, 0.4, 0.01, &sched, 1).unwrap();
        let grid = plan_patch_grid(16, 16, 2).unwrap();
        let a = generate_plane(&net, &mut |_, _| Ok(vec![]), &grid, &sched, SamplerPlan::Ddpm, 21).unwrap();
        let b = sample(&net, (16, 16), &[], &sched, SamplerPlan::Ddpm, None, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn saturated_stub_gives_constant_plane() {
        let sched = desk();
        let net = ConstantPredictor::new(-1000.0, 3);
        let grid = plan_patch_grid(40, 16, 4).unwrap();
        let cond = vec![Plane::zeros(16, 16), Plane::zeros(16, 16)];
        let plane = generate_plane(&net, &mut |_, _| Ok(cond.clone()), &grid, &sched, SamplerPlan::Ddim(20), 1)
            .unwrap()
            .clamp01();
        assert!(plane.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn overlap_pixels_match_prior_content() {
        let sched = desk();
        let net = AnalyticGaussian::uniform(16, 16, 0.5, 0.01, &sched, 1).unwrap();
        let grid = plan_patch_grid(40, 16, 4).unwrap();
        let mut snapshot = Plane::zeros(40, 40);
        let mut checked = 0usize;
        let plane = generate_plane_observed(
            &net,
            &mut |_, _| Ok(vec![]),
            &grid,
            &sched,
            SamplerPlan::Ddim(25),
            5,
            &mut |rec| {
                if let Some(k) = &rec.known {
                    for (r, c) in k.mask.coords() {
                        assert_eq!(rec.patch.get(r, c).to_bits(), snapshot.get(rec.top + r, rec.left + c).to_bits());
                        checked += 1;
                    }
                }
                snapshot.paste(&rec.patch, rec.top, rec.left).unwrap();
            },
        )
        .unwrap();
        assert_eq!(plane, snapshot);
        assert!(checked > 0);
    }
}
