//! Anomaly segmentation on a synthetic lesion: re-noise the image by
//! lambda steps, denoise with a model of healthy tissue, and threshold the
//! difference. Sweeps lambda and prints the IoU with the true lesion.

use mambo::anomaly::{build_anomaly_map, native_lambda, renoise_denoise, AnomalyConfig};
use mambo::denoiser::GaussianField;
use mambo::preprocess::breast_mask;
use mambo::schedule::{NoiseSchedule, VarianceKind};
use mambo::synth::{blob_mean, lesion_phantom};
use rand::SeedableRng;

fn main() -> mambo::Result<()> {
    let side = 128;
    let sched = NoiseSchedule::linear_matched(200, VarianceKind::Beta)?;
    let healthy = GaussianField::smooth(blob_mean(side), 0.0005, 4.0, &sched, 1)?;
    let mask = breast_mask(healthy.mean())?;
    let phantom = lesion_phantom(&healthy, 300.0, 0.3, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2))?;

    println!("lambda (reference)  native  IoU    predicted px");
    for reference in [100, 300, 500, 700, 900] {
        let cfg = AnomalyConfig::new(native_lambda(reference, &sched)?, side);
        let denoised = renoise_denoise(&phantom.image, &healthy, &sched, &cfg, 1)?;
        let r = build_anomaly_map(&phantom.image, &denoised, &mask, &cfg, Some(&phantom.lesion))?;
        println!("{reference:18}  {:6}  {:.3}  {}", cfg.lambda, r.iou.unwrap_or(0.0), r.mask.count());
    }
    Ok(())
}
