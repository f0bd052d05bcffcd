//! Noise predictors and their conditioning inputs.

pub mod checkpoint;
pub mod field;
pub mod graph;
pub mod unet;

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::schedule::NoiseSchedule;

pub use checkpoint::Checkpoint;
pub use field::GaussianField;
pub use unet::{NetConfig, UNet};

/// One to three same-shaped planes. Channel 0 is the noisy target; the rest
/// are conditioning images that the sampler never modifies.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<Plane>,
}

impl ChannelStack {
    pub fn new(channels: Vec<Plane>) -> Result<Self> {
        if channels.is_empty() || channels.len() > 3 {
            return Err(Error::Contract(format!(
                "a channel stack holds 1 to 3 planes, got {}",
                channels.len()
            )));
        }
        let shape = channels[0].shape();
        if let Some(bad) = channels.iter().find(|c| c.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: bad.shape(),
            });
        }
        Ok(Self { channels })
    }

    pub fn arity(&self) -> usize {
        self.channels.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn channels(&self) -> &[Plane] {
        &self.channels
    }

    pub fn target(&self) -> &Plane {
        &self.channels[0]
    }

    pub fn target_mut(&mut self) -> &mut Plane {
        &mut self.channels[0]
    }

    pub fn conditioning(&self) -> &[Plane] {
        &self.channels[1..]
    }

    /// Same conditioning, different target.
    pub fn with_target(&self, target: Plane) -> Result<Self> {
        if target.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: target.shape(),
            });
        }
        let mut channels = self.channels.clone();
        channels[0] = target;
        Ok(Self { channels })
    }

    pub fn into_channels(self) -> Vec<Plane> {
        self.channels
    }
}

/// Anything that maps a noisy stack and a timestep to a noise estimate the
/// shape of channel 0.
pub trait NoisePredictor: Send + Sync {
    /// Number of input channels expected.
    fn arity(&self) -> usize;

    fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane>;

    /// Named parameter shapes, when the predictor has any.
    fn parameters(&self) -> Option<Vec<(&str, &[usize])>> {
        None
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn arity(&self) -> usize {
        (**self).arity()
    }

    fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane> {
        (**self).predict(input, t)
    }

    fn parameters(&self) -> Option<Vec<(&str, &[usize])>> {
        (**self).parameters()
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn arity(&self) -> usize {
        (**self).arity()
    }

    fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane> {
        (**self).predict(input, t)
    }

    fn parameters(&self) -> Option<Vec<(&str, &[usize])>> {
        (**self).parameters()
    }
}

fn check_arity(expected: usize, input: &ChannelStack) -> Result<()> {
    if input.arity() != expected {
        return Err(Error::Config(format!(
            "predictor takes {expected} channels, got {}",
            input.arity()
        )));
    }
    Ok(())
}

/// Exact noise predictor for data drawn independently per pixel from
/// `N(mean, var0)`: `eps = sqrt(1-ab) (x - sqrt(ab) mean) / (ab var0 + 1 - ab)`.
/// Conditioning channels are ignored.
#[derive(Debug, Clone)]
pub struct AnalyticGaussian {
    mean: Plane,
    var0: Plane,
    alpha_bar: Vec<f64>,
    arity: usize,
}

impl AnalyticGaussian {
    pub fn new(mean: Plane, var0: Plane, schedule: &NoiseSchedule, arity: usize) -> Result<Self> {
        mean.ensure_same_shape(&var0)?;
        if var0.as_slice().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("prior variance must be finite and >= 0".into()));
        }
        if !(1..=3).contains(&arity) {
            return Err(Error::Config(format!("arity must be 1..=3, got {arity}")));
        }
        Ok(Self {
            mean,
            var0,
            alpha_bar: schedule.alpha_bars().to_vec(),
            arity,
        })
    }

    /// Constant prior mean and variance.
    pub fn uniform(
        height: usize,
        width: usize,
        mean: f64,
        var0: f64,
        schedule: &NoiseSchedule,
        arity: usize,
    ) -> Result<Self> {
        Self::new(
            Plane::filled(height, width, mean),
            Plane::filled(height, width, var0),
            schedule,
            arity,
        )
    }

    pub fn mean(&self) -> &Plane {
        &self.mean
    }
}

impl NoisePredictor for AnalyticGaussian {
    fn arity(&self) -> usize {
        self.arity
    }

    fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane> {
        check_arity(self.arity, input)?;
        let x = input.target();
        x.ensure_same_shape(&self.mean)?;
        if t == 0 || t >= self.alpha_bar.len() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={} (alpha_bar must be below 1)",
                self.alpha_bar.len() - 1
            )));
        }
        let ab = self.alpha_bar[t];
        let (s1, sab) = ((1.0 - ab).sqrt(), ab.sqrt());
        let data = x
            .as_slice()
            .iter()
            .zip(self.mean.as_slice())
            .zip(self.var0.as_slice())
            .map(|((&xv, &mv), &vv)| {
                let denom = ab * vv + 1.0 - ab;
                s1 * (xv - sab * mv) / denom
            })
            .collect();
        Plane::from_vec(x.height(), x.width(), data)
    }
}

/// Predicts the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    pub value: f64,
    pub arity: usize,
}

impl ConstantPredictor {
    pub fn new(value: f64, arity: usize) -> Self {
        Self { value, arity }
    }
}

impl NoisePredictor for ConstantPredictor {
    fn arity(&self) -> usize {
        self.arity
    }

    fn predict(&self, input: &ChannelStack, _t: usize) -> Result<Plane> {
        check_arity(self.arity, input)?;
        let (h, w) = input.shape();
        Ok(Plane::filled(h, w, self.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_stack_contract() {
        assert!(ChannelStack::new(vec![]).is_err());
        assert!(ChannelStack::new(vec![Plane::zeros(2, 2); 4]).is_err());
        assert!(matches!(
            ChannelStack::new(vec![Plane::zeros(2, 2), Plane::zeros(2, 3)]),
            Err(Error::ShapeMismatch { .. })
        ));
        let s = ChannelStack::new(vec![Plane::zeros(2, 2), Plane::filled(2, 2, 1.0)]).unwrap();
        let s2 = s.with_target(Plane::filled(2, 2, 0.5)).unwrap();
        assert_eq!(s2.conditioning(), s.conditioning());
        assert_eq!(s2.target().get(0, 0), 0.5);
    }

    #[test]
    fn analytic_gaussian_scalar_value() {
        // T = 1, beta = 0.5 -> alpha_bar = 0.5.
        let sched = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let p = AnalyticGaussian::uniform(1, 1, 0.5, 0.0025, &sched, 1).unwrap();
        let x = ChannelStack::new(vec![Plane::filled(1, 1, 0.9)]).unwrap();
        let e = p.predict(&x, 1).unwrap().get(0, 0) as f64;
        let expect = 0.5f64.sqrt() * (0.9 - 0.5f64.sqrt() * 0.5) / (0.5 * 0.0025 + 0.5);
        assert!((e - expect).abs() < 1e-6);
        assert!((e - 0.77088).abs() < 1e-4);
    }

    #[test]
    fn predictors_check_arity() {
        let c = ConstantPredictor::new(0.0, 3);
        let one = ChannelStack::new(vec![Plane::zeros(2, 2)]).unwrap();
        assert!(matches!(c.predict(&one, 1), Err(Error::Config(_))));
    }
}
