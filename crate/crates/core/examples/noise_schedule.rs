//! Reference and desk-sized linear schedules, and one forward/reverse step.

use mambo::schedule::{ddpm_step, forward_noise, NoiseSchedule, VarianceKind};
use mambo::Plane;

fn main() -> mambo::Result<()> {
    let reference = NoiseSchedule::reference();
    let desk = NoiseSchedule::linear_matched(200, VarianceKind::Beta)?;

    println!("steps  beta_min   beta_max   alpha_bar[T]");
    for s in [&reference, &desk] {
        println!("{:5}  {:.3e}  {:.3e}  {:.6e}", s.steps(), s.beta_min(), s.beta_max(), s.alpha_bar(s.steps()));
    }

    // The same noise level sits at different step indices.
    for t in [100, 500, 700, 900] {
        let ab = reference.alpha_bar(t);
        let native = (1..=desk.steps())
            .min_by(|&a, &b| (desk.alpha_bar(a).ln() - ab.ln()).abs().total_cmp(&(desk.alpha_bar(b).ln() - ab.ln()).abs()))
            .unwrap();
        println!("reference t={t:4} (alpha_bar {ab:.4}) ~ desk t={native}");
    }

    let x0 = Plane::from_fn(4, 4, |r, c| (r + c) as f64 / 6.0);
    let eps = Plane::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
    let x1 = forward_noise(&x0, 1, &eps, &desk)?;
    let back = ddpm_step(&x1, &eps, 1, &Plane::zeros(4, 4), &desk)?;
    println!("one-step round trip error: {:.2e}", back.mse(&x0)?.sqrt());
    Ok(())
}
