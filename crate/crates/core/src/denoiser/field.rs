//! Exact noise predictor for a Gaussian random field whose covariance is
//! diagonal in the 2-D orthonormal DCT-II basis.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::Element;
use super::{check_arity, ChannelStack, NoisePredictor};
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct GaussianField {
    n: usize,
    mean: Plane,
    /// Per-mode variance, row-major `(u, v)`.
    spectrum: Vec<f64>,
    basis: Vec<f64>,
    alpha_bar: Vec<f64>,
    arity: usize,
}

/// Orthonormal DCT-II matrix `C[k][i]`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            c[k * n + i] = a * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    c
}

impl GaussianField {
    pub fn new(mean: Plane, spectrum: Plane, schedule: &NoiseSchedule, arity: usize) -> Result<Self> {
        let n = mean.side()?;
        mean.ensure_same_shape(&spectrum)?;
        if spectrum.as_slice().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("field spectrum must be finite and >= 0".into()));
        }
        if !(1..=3).contains(&arity) {
            return Err(Error::Config(format!("arity must be 1..=3, got {arity}")));
        }
        Ok(Self {
            n,
            mean,
            spectrum: spectrum.as_slice().to_vec(),
            basis: dct_matrix(n),
            alpha_bar: schedule.alpha_bars().to_vec(),
            arity,
        })
    }

    /// Spectrum `(1 + (pi L / n)^2 (u^2 + v^2))^-2`, scaled so the per-pixel
    /// variance is `pixel_var`. `corr_len` is roughly the correlation length
    /// in pixels.
    pub fn smooth(mean: Plane, pixel_var: f64, corr_len: f64, schedule: &NoiseSchedule, arity: usize) -> Result<Self> {
        let n = mean.side()?;
        let k = std::f64::consts::PI * corr_len / n as f64;
        let raw: Vec<f64> = (0..n * n)
            .map(|i| {
                let (u, v) = ((i / n) as f64, (i % n) as f64);
                (1.0 + k * k * (u * u + v * v)).powi(-2)
            })
            .collect();
        let scale = pixel_var * (n * n) as f64 / raw.iter().sum::<f64>();
        let spectrum = Plane::from_vec(n, n, raw.iter().map(|v| v * scale).collect())?;
        Self::new(mean, spectrum, schedule, arity)
    }

    pub fn mean(&self) -> &Plane {
        &self.mean
    }

    /// `C X C^T`
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut tmp = vec![0.0; n * n];
        let mut out = vec![0.0; n * n];
        f64::gemm(n, n, n, &self.basis, false, x, false, &mut tmp, false);
        f64::gemm(n, n, n, &tmp, false, &self.basis, true, &mut out, false);
        out
    }

    /// `C^T Y C`
    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut tmp = vec![0.0; n * n];
        let mut out = vec![0.0; n * n];
        f64::gemm(n, n, n, &self.basis, true, y, false, &mut tmp, false);
        f64::gemm(n, n, n, &tmp, false, &self.basis, false, &mut out, false);
        out
    }

    /// A draw from the prior.
    pub fn sample_prior(&self, rng: &mut impl Rng) -> Plane {
        let z: Vec<f64> = self
            .spectrum
            .iter()
            .map(|p| p.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = self.inverse(&z);
        Plane::from_vec(
            self.n,
            self.n,
            x.iter().zip(self.mean.as_slice()).map(|(d, &m)| m + d).collect(),
        )
        .expect("square field")
    }

    /// Posterior mean of the clean field given `x` at level `t`.
    pub fn posterior_mean(&self, x: &Plane, t: usize) -> Result<Plane> {
        x.ensure_same_shape(&self.mean)?;
        let ab = self.level(t)?;
        let sab = ab.sqrt();
        let centred: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(self.mean.as_slice())
            .map(|(&xv, &m)| xv - sab * m)
            .collect();
        let mut y = self.forward(&centred);
        for (yv, &p) in y.iter_mut().zip(&self.spectrum) {
            *yv *= sab * p / (ab * p + 1.0 - ab);
        }
        let d = self.inverse(&y);
        Plane::from_vec(
            self.n,
            self.n,
            d.iter().zip(self.mean.as_slice()).map(|(dv, &m)| m + dv).collect(),
        )
    }

    fn level(&self, t: usize) -> Result<f64> {
        if t == 0 || t >= self.alpha_bar.len() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.alpha_bar.len() - 1
            )));
        }
        Ok(self.alpha_bar[t])
    }
}

impl NoisePredictor for GaussianField {
    fn arity(&self) -> usize {
        self.arity
    }

    fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane> {
        check_arity(self.arity, input)?;
        let x = input.target();
        let x0 = self.posterior_mean(x, t)?;
        let ab = self.level(t)?;
        let (sab, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        x.zip_map(&x0, |xv, m| (xv - sab * m) / s1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticGaussian;
    use crate::schedule::VarianceKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dct_is_orthonormal() {
        let n = 6;
        let c = dct_matrix(n);
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| c[a * n + i] * c[b * n + i]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_spectrum_matches_pixelwise_oracle() {
        let s = NoiseSchedule::linear_matched(200, VarianceKind::Beta).unwrap();
        let mean = Plane::from_fn(8, 8, |r, c| 0.3 + 0.01 * (r + c) as f64);
        let field = GaussianField::new(mean.clone(), Plane::filled(8, 8, 0.004), &s, 1).unwrap();
        let pix = AnalyticGaussian::new(mean, Plane::filled(8, 8, 0.004), &s, 1).unwrap();
        let x = ChannelStack::new(vec![Plane::from_fn(8, 8, |r, c| ((r * 3 + c) % 5) as f64 / 5.0)]).unwrap();
        for t in [1, 50, 200] {
            let a = field.predict(&x, t).unwrap();
            let b = pix.predict(&x, t).unwrap();
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() < 1e-5, "t={t}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn prior_samples_have_requested_variance() {
        let s = NoiseSchedule::reference();
        let f = GaussianField::smooth(Plane::zeros(16, 16), 0.01, 3.0, &s, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = 0.0;
        let draws = 400;
        for _ in 0..draws {
            let p = f.sample_prior(&mut rng);
            acc += p.as_slice().iter().map(|&v| v.powi(2)).sum::<f64>() / 256.0;
        }
        let var = acc / draws as f64;
        assert!((var - 0.01).abs() < 0.001, "{var}");
    }
}
