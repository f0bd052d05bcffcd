//! Sampling with an exact noise predictor: draws from a per-pixel Gaussian
//! prior and compares the sample moments with the prior.

use mambo::denoiser::AnalyticGaussian;
use mambo::sampler::{sample, SamplerPlan};
use mambo::schedule::{NoiseSchedule, VarianceKind};

fn main() -> mambo::Result<()> {
    let sched = NoiseSchedule::linear_matched(200, VarianceKind::Beta)?;
    let net = AnalyticGaussian::uniform(8, 8, 0.5, 0.05f64.powi(2), &sched, 1)?;

    for plan in [SamplerPlan::Ddpm, SamplerPlan::Ddim(50), SamplerPlan::Ddim(10)] {
        let n = 400;
        let (mut sum, mut sq) = (0.0, 0.0);
        for seed in 0..n {
            let x = sample(&net, (8, 8), &[], &sched, plan, None, seed)?;
            sum += x.get(3, 3);
            sq += x.get(3, 3).powi(2);
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        println!("{plan:>8}: pixel (3,3) mean {mean:.4} std {std:.4}  (prior 0.5000 / 0.0500)");
    }
    Ok(())
}
