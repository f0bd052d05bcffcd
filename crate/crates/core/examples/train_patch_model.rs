//! A short stage-3 training run on synthetic images, with a checkpoint
//! round trip and a finite-difference check of the gradients.
//!
//! `cargo run --release --example train_patch_model -- 300`

use mambo::cli::{Profile, RunConfig};
use mambo::dataset::{ImageSet, SampleSource, Stage};
use mambo::denoiser::Checkpoint;
use mambo::preprocess::breast_mask;
use mambo::synth::striped_breast;
use mambo::training::{gradient_check, noise_batch, window_mean, Trainer};
use rand::SeedableRng;

fn main() -> mambo::Result<()> {
    let iterations: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let cfg = RunConfig::expand(Profile::Desk);
    let g = cfg.geometry;

    let images = (0..8)
        .map(|i| {
            let p = striped_breast(g.n, i);
            let m = breast_mask(&p)?.mask;
            Ok((p, m))
        })
        .collect::<mambo::Result<Vec<_>>>()?;
    let data = ImageSet::new(images, g, Stage::Patch, 1)?;

    let mut trainer = Trainer::new(cfg.net_config(3), cfg.train_config(3)?, cfg.schedule.build()?)?;
    for chunk in 1..=4 {
        trainer.run_until(&data, iterations * chunk / 4, None)?;
        let n = trainer.log.len();
        println!("iteration {n:5}  mean loss {:.4}", window_mean(&trainer.log, n.saturating_sub(50), n));
    }

    let path = std::env::temp_dir().join("mambo-patch.mambo");
    trainer.checkpoint().save(&path)?;
    let restored = Checkpoint::load(&path)?.network()?;
    println!("checkpoint {} restores {} tensors", path.display(), restored.to_tensors().len());

    let clean = vec![data.sample(10_000)?, data.sample(10_001)?];
    let batch = noise_batch(&clean, &trainer.schedule, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3))?;
    for c in gradient_check(&trainer.net, &batch, 5, 1e-3, 4)? {
        println!("{:>28}[{:5}] analytic {:+.5e} numeric {:+.5e}", c.param, c.index, c.analytic, c.numeric);
    }
    Ok(())
}
