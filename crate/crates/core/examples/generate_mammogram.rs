//! The three-stage pipeline end to end: a global image, the mid-resolution
//! plane from local contexts, then full-resolution patches. Smooth Gaussian
//! priors stand in for trained networks so the example runs in seconds;
//! pass checkpoints to use real ones:
//!
//! `cargo run --release --example generate_mammogram -- global.mambo local.mambo patch.mambo`

use std::path::PathBuf;

use mambo::dataset::GeometryConfig;
use mambo::denoiser::{Checkpoint, GaussianField, NoisePredictor};
use mambo::io::{write_image, BitDepth};
use mambo::pipeline::StageModels;
use mambo::sampler::SamplerPlan;
use mambo::schedule::{NoiseSchedule, VarianceKind};
use mambo::synth::blob_mean;

fn main() -> mambo::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let g = GeometryConfig::desk();
    let mut sched = NoiseSchedule::linear_matched(200, VarianceKind::Beta)?;

    let nets: Vec<Box<dyn NoisePredictor>> = if args.len() == 3 {
        let mut v: Vec<Box<dyn NoisePredictor>> = Vec::new();
        for p in &args {
            let ck = Checkpoint::load(p)?;
            sched = ck.schedule.build()?;
            v.push(Box::new(ck.network()?));
        }
        v
    } else {
        vec![
            Box::new(GaussianField::smooth(blob_mean(g.s), 0.002, 3.0, &sched, 1)?),
            Box::new(GaussianField::smooth(blob_mean(g.s), 0.002, 3.0, &sched, 3)?),
            Box::new(GaussianField::smooth(mambo::Plane::filled(g.s, g.s, 0.3), 0.004, 2.0, &sched, 3)?),
        ]
    };
    let models = StageModels {
        global: &nets[0],
        local: &nets[1],
        patch: &nets[2],
        geometry: g,
        schedule: &sched,
        plan: SamplerPlan::Ddim(20),
    };
    let out = models.generate_mammogram(11)?;

    let dir = std::env::temp_dir().join("mambo-generate");
    std::fs::create_dir_all(&dir).map_err(|e| mambo::Error::io(&dir, e))?;
    for (name, p) in [("global.png", &out.global), ("mid.png", &out.mid), ("full.png", &out.full)] {
        write_image(dir.join(name), p, BitDepth::Sixteen)?;
        println!("{name:10} {}x{}", p.height(), p.width());
    }
    println!("wrote {}", dir.display());
    Ok(())
}
