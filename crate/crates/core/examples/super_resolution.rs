//! Super-resolution: a real image reduced to the model side replaces the
//! stage-1 sample, and stages 2 and 3 upscale it by N / s.

use mambo::dataset::GeometryConfig;
use mambo::denoiser::{ConstantPredictor, GaussianField};
use mambo::pipeline::{prepare_low_res, StageModels};
use mambo::sampler::SamplerPlan;
use mambo::schedule::{NoiseSchedule, VarianceKind};
use mambo::synth::striped_breast;
use mambo::Plane;

fn main() -> mambo::Result<()> {
    let g = GeometryConfig::desk();
    let sched = NoiseSchedule::linear_matched(200, VarianceKind::Beta)?;
    let low = prepare_low_res(&striped_breast(96, 3), g.s)?;

    let local = GaussianField::smooth(Plane::filled(g.s, g.s, 0.4), 0.01, 3.0, &sched, 3)?;
    let patch = GaussianField::smooth(Plane::filled(g.s, g.s, 0.4), 0.01, 2.0, &sched, 3)?;
    let unused = ConstantPredictor::new(0.0, 1);
    let models = StageModels {
        global: &unused,
        local: &local,
        patch: &patch,
        geometry: g,
        schedule: &sched,
        plan: SamplerPlan::Ddim(10),
    };
    let out = models.super_resolve(&low, 5)?;
    println!("{}x{} -> {}x{} (factor {})", low.height(), low.width(), out.full.height(), out.full.width(), g.n / g.s);
    Ok(())
}
