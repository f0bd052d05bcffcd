//! Patch-by-patch generation of a plane larger than the model's input, with
//! earlier patches imposed on the overlap of later ones. Prints the seam
//! MSE for several overlaps.

use mambo::denoiser::GaussianField;
use mambo::metrics::seam_mse;
use mambo::sampler::{generate_plane, plan_patch_grid, SamplerPlan};
use mambo::schedule::{NoiseSchedule, VarianceKind};
use mambo::Plane;

fn main() -> mambo::Result<()> {
    let sched = NoiseSchedule::linear_matched(200, VarianceKind::Beta)?;
    let s = 32;
    // A smooth prior: neighbouring pixels are strongly correlated, so
    // independent patches disagree visibly at their borders.
    let prior = GaussianField::smooth(Plane::filled(s, s, 0.5), 0.01, 8.0, &sched, 3)?;
    let cond = vec![Plane::zeros(s, s), Plane::zeros(s, s)];

    println!("overlap  patches  seam MSE");
    for overlap in [0, 2, 4, 8] {
        let grid = plan_patch_grid(120, s, overlap)?;
        let mut mse = 0.0;
        for seed in 0..3 {
            let plane = generate_plane(&prior, &mut |_, _| Ok(cond.clone()), &grid, &sched, SamplerPlan::Ddim(20), seed)?;
            mse += seam_mse(&plane, &grid)?.mse / 3.0;
        }
        println!("{overlap:7}  {:7}  {mse:.6}", grid.positions.len());
    }
    Ok(())
}
