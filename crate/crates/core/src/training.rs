//! Noise-prediction training with channel conditioning, Adam, checkpoints
//! and resumable, fully seeded iteration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{SampleSource, Stage};
use crate::denoiser::checkpoint::{Checkpoint, ScheduleMeta, Tensor, OPTIMIZER_PREFIX};
use crate::denoiser::graph::Param;
use crate::denoiser::{ChannelStack, NetConfig, NoisePredictor, UNet};
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::schedule::{forward_noise, NoiseSchedule};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub seed: u64,
    pub stage: u8,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    /// Write a checkpoint every this many iterations (0 disables).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn desk(stage: u8) -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 4,
            max_iterations: 2000,
            seed: 0,
            stage,
            init_from: None,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }

    pub fn paper(stage: u8) -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            max_iterations: 170_000,
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be > 0, got {c}")));
            }
        }
        Stage::from_index(self.stage).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[Param<f32>]) -> Self {
        Self {
            learning_rate,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Param<f32>], grads: &[Vec<f32>]) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powf(self.step as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(self.step as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g[i] as f64;
                let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
    }

    fn to_tensors(&self, params: &[Param<f32>]) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (kind, state) in [("m", &self.m), ("v", &self.v)] {
            for (p, s) in params.iter().zip(state) {
                out.push(Tensor {
                    name: format!("{OPTIMIZER_PREFIX}{kind}.{}", p.name),
                    shape: p.shape.clone(),
                    data: s.clone(),
                });
            }
        }
        out
    }

    fn from_checkpoint(learning_rate: f64, ck: &Checkpoint, params: &[Param<f32>]) -> Result<Self> {
        let mut adam = Self::new(learning_rate, params);
        adam.step = ck.optimizer_step;
        for (kind, state) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            for (p, s) in params.iter().zip(state.iter_mut()) {
                let name = format!("{OPTIMIZER_PREFIX}{kind}.{}", p.name);
                let t = ck
                    .tensor(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
                if t.shape != p.shape {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {name} has shape {:?}, expected {:?}",
                        t.shape, p.shape
                    )));
                }
                s.copy_from_slice(&t.data);
            }
        }
        Ok(adam)
    }
}

/// One noised training input: channel 0 replaced by its forward-noised
/// version at level `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub input: ChannelStack,
    pub t: usize,
    pub eps: Plane,
}

/// Per sample: `t ~ U{1..T}`, then standard-normal noise in row-major order.
pub fn noise_batch(clean: &[ChannelStack], sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<Vec<NoisedSample>> {
    clean
        .iter()
        .map(|x| {
            let t = rng.random_range(1..=sched.steps());
            let (h, w) = x.shape();
            let eps = Plane::from_fn(h, w, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noisy = forward_noise(x.target(), t, &eps, sched)?;
            Ok(NoisedSample {
                input: x.with_target(noisy)?,
                t,
                eps,
            })
        })
        .collect()
}

/// Mean squared error between each sample's noise and `predict`'s output,
/// over all samples and pixels of channel 0.
pub fn batch_loss(batch: &[NoisedSample], mut predict: impl FnMut(&NoisedSample) -> Result<Plane>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut sse = 0.0f64;
    let mut n = 0usize;
    for s in batch {
        let pred = predict(s)?;
        sse += pred.mse(&s.eps)? * pred.len() as f64;
        n += pred.len();
    }
    Ok(sse / n as f64)
}

/// Loss of any predictor on a freshly noised batch, without updating it.
pub fn evaluate_loss(
    net: &dyn NoisePredictor,
    clean: &[ChannelStack],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_batch_arity(net.arity(), clean)?;
    let batch = noise_batch(clean, sched, rng)?;
    batch_loss(&batch, |s| net.predict(&s.input, s.t))
}

fn check_batch_arity(arity: usize, clean: &[ChannelStack]) -> Result<()> {
    if clean.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(bad) = clean.iter().find(|x| x.arity() != arity) {
        return Err(Error::Config(format!(
            "network takes {arity} channels, batch sample has {}",
            bad.arity()
        )));
    }
    Ok(())
}

/// Gradient of the mean loss and the loss itself.
pub fn loss_and_gradients<F: crate::denoiser::graph::Element>(
    net: &UNet<F>,
    batch: &[NoisedSample],
) -> Result<(f64, Vec<Vec<F>>)> {
    let pixels: usize = batch.iter().map(|s| s.eps.len()).sum();
    let weight = 1.0 / pixels as f64;
    let mut grads = net.zero_grads();
    let mut sse = 0.0;
    for s in batch {
        sse += net.accumulate_gradients(&s.input, s.t, &s.eps, weight, &mut grads)?;
    }
    Ok((sse / pixels as f64, grads))
}

fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
}

/// One optimizer step on a clean batch; returns the loss before the update.
pub fn train_step(
    net: &mut UNet,
    adam: &mut Adam,
    clean: &[ChannelStack],
    sched: &NoiseSchedule,
    grad_clip: Option<f64>,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_batch_arity(net.config().in_channels, clean)?;
    let batch = noise_batch(clean, sched, rng)?;
    let (loss, mut grads) = loss_and_gradients(net, &batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            step: adam.step as usize,
            detail: "training loss is not finite".into(),
        });
    }
    if let Some(c) = grad_clip {
        clip_gradients(&mut grads, c);
    }
    adam.update(net.params_mut(), &grads);
    Ok(loss)
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares backprop gradients of the mean loss with central differences in
/// double precision. Entries are drawn from those whose gradient magnitude
/// is at least `1e-3` of the largest, so the comparison is not dominated by
/// round-off on near-zero derivatives.
pub fn gradient_check(
    net: &UNet,
    batch: &[NoisedSample],
    count: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let mut net64: UNet<f64> = net.cast();
    let (_, grads) = loss_and_gradients(&net64, batch)?;
    let gmax = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let candidates: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(p, g)| g.iter().enumerate().map(move |(i, v)| (p, i, *v)))
        .filter(|&(_, _, v)| v.abs() >= 1e-3 * gmax)
        .map(|(p, i, _)| (p, i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let loss_of = |n: &UNet<f64>| -> Result<f64> {
        // Kept in f64 end to end; `predict` would round to f32.
        let mut sse = 0.0;
        let mut px = 0usize;
        for s in batch {
            let pred = n.forward_values(&s.input, s.t)?;
            for (p, e) in pred.iter().zip(s.eps.as_slice()) {
                let d = p - *e;
                sse += d * d;
            }
            px += pred.len();
        }
        Ok(sse / px as f64)
    };
    for _ in 0..count.min(candidates.len()) {
        let (p, i) = candidates[rng.random_range(0..candidates.len())];
        let orig = net64.params()[p].data[i];
        net64.params_mut()[p].data[i] = orig + step;
        let plus = loss_of(&net64)?;
        net64.params_mut()[p].data[i] = orig - step;
        let minus = loss_of(&net64)?;
        net64.params_mut()[p].data[i] = orig;
        out.push(GradCheck {
            param: net64.params()[p].name.clone(),
            index: i,
            analytic: grads[p][i],
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    Ok(out)
}

/// Training state that can be checkpointed and resumed bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: UNet,
    pub adam: Adam,
    pub iteration: u64,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    /// `(iteration, loss)` for every completed step.
    pub log: Vec<(u64, f64)>,
}

impl Trainer {
    /// Fresh network, or weights from `config.init_from` with a fresh
    /// optimizer (fine-tuning, e.g. a patch model reused for local contexts).
    pub fn new(net_config: NetConfig, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let stage = Stage::from_index(config.stage)?;
        if net_config.in_channels != stage.arity() {
            return Err(Error::Config(format!(
                "stage {} needs {} input channels, network has {}",
                config.stage,
                stage.arity(),
                net_config.in_channels
            )));
        }
        let mut net = UNet::new(net_config, config.seed)?;
        if let Some(path) = &config.init_from {
            let ck = Checkpoint::load(path)?;
            net.load_tensors(&ck.tensors)?;
        }
        let adam = Adam::new(config.learning_rate, net.params());
        Ok(Self {
            net,
            adam,
            iteration: 0,
            config,
            schedule,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = ck.network()?;
        let adam = Adam::from_checkpoint(config.learning_rate, ck, net.params())?;
        Ok(Self {
            net,
            adam,
            iteration: ck.iteration,
            config,
            schedule: ck.schedule.build()?,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.net.to_tensors();
        tensors.extend(self.adam.to_tensors(self.net.params()));
        Checkpoint {
            net: self.net.config().clone(),
            schedule: ScheduleMeta::of(&self.schedule),
            iteration: self.iteration,
            stage: self.config.stage,
            seed: self.config.seed,
            optimizer_step: self.adam.step,
            tensors,
        }
    }

    /// Runs one iteration. Its batch is samples `i B .. (i + 1) B` and its
    /// noise comes from stream `i` of the seed, so any iteration can be
    /// replayed in isolation.
    pub fn step(&mut self, data: &dyn SampleSource) -> Result<f64> {
        let i = self.iteration;
        let b = self.config.batch_size as u64;
        let clean = (0..b).map(|slot| data.sample(i * b + slot)).collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(i);
        let loss = train_step(&mut self.net, &mut self.adam, &clean, &self.schedule, self.config.grad_clip, &mut rng)?;
        self.iteration += 1;
        self.log.push((i, loss));
        Ok(loss)
    }

    /// Steps until `iteration == end`, saving periodic checkpoints into `dir`.
    pub fn run_until(&mut self, data: &dyn SampleSource, end: u64, dir: Option<&Path>) -> Result<()> {
        if data.arity() != self.net.config().in_channels {
            return Err(Error::Config(format!(
                "network takes {} channels, data provides {}",
                self.net.config().in_channels,
                data.arity()
            )));
        }
        while self.iteration < end {
            self.step(data)?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = dir {
                if every > 0 && self.iteration.is_multiple_of(every) {
                    self.checkpoint().save(dir.join(checkpoint_name(self.iteration)))?;
                }
            }
        }
        Ok(())
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.mambo")
}

/// `iteration<TAB>loss` lines.
pub fn format_log(log: &[(u64, f64)]) -> String {
    log.iter().map(|(i, l)| format!("{i}\t{l}\n")).collect()
}

/// Full run: train to `max_iterations`, write `final.mambo` and `train.log`
/// into `dir` when given.
pub fn train_loop(
    net_config: NetConfig,
    config: TrainConfig,
    data: &dyn SampleSource,
    schedule: NoiseSchedule,
    dir: Option<&Path>,
) -> Result<Trainer> {
    let end = config.max_iterations;
    let mut trainer = Trainer::new(net_config, config, schedule)?;
    trainer.run_until(data, end, dir)?;
    if let Some(dir) = dir {
        trainer.checkpoint().save(dir.join("final.mambo"))?;
        let path = dir.join("train.log");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(format_log(&trainer.log).as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(trainer)
}

/// Mean of `log` losses in `[from, to)` by position.
pub fn window_mean(log: &[(u64, f64)], from: usize, to: usize) -> f64 {
    let w = &log[from.min(log.len())..to.min(log.len())];
    w.iter().map(|(_, l)| l).sum::<f64>() / w.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StackList;
    use crate::denoiser::{AnalyticGaussian, ConstantPredictor};
    use crate::schedule::VarianceKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear_matched(200, VarianceKind::Beta).unwrap()
    }

    fn gaussian_batch(n: usize, side: usize, rng: &mut impl Rng) -> Vec<ChannelStack> {
        (0..n)
            .map(|_| {
                let p = Plane::from_fn(side, side, |_, _| 0.5 + 0.05 * rng.sample::<f64, _>(StandardNormal));
                ChannelStack::new(vec![p]).unwrap()
            })
            .collect()
    }

    #[test]
    fn analytic_oracle_beats_zero_predictor() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = gaussian_batch(400, 8, &mut rng);
        let oracle = AnalyticGaussian::uniform(8, 8, 0.5, 0.0025, &s, 1).unwrap();
        let zero = ConstantPredictor::new(0.0, 1);
        let lo = evaluate_loss(&oracle, &data, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let hi = evaluate_loss(&zero, &data, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(lo < hi, "{lo} vs {hi}");
        assert!((hi - 1.0).abs() < 0.05, "{hi}");
        // Irreducible error: E over t of ab var0 / (ab var0 + 1 - ab).
        let irreducible: f64 = (1..=200)
            .map(|t| {
                let ab = s.alpha_bar(t);
                ab * 0.0025 / (ab * 0.0025 + 1.0 - ab)
            })
            .sum::<f64>()
            / 200.0;
        assert!((lo - irreducible).abs() < 0.1 * irreducible + 0.005, "{lo} vs {irreducible}");
    }

    #[test]
    fn perfect_stub_has_zero_loss_and_conditioning_is_ignored() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean: Vec<ChannelStack> = (0..4)
            .map(|i| {
                ChannelStack::new(vec![
                    Plane::filled(8, 8, 0.1 * i as f64),
                    Plane::filled(8, 8, 0.3),
                    Plane::filled(8, 8, 0.9),
                ])
                .unwrap()
            })
            .collect();
        let batch = noise_batch(&clean, &s, &mut rng).unwrap();
        assert_eq!(batch_loss(&batch, |x| Ok(x.eps.clone())).unwrap(), 0.0);

        let perturbed: Vec<ChannelStack> = clean
            .iter()
            .map(|c| {
                ChannelStack::new(vec![c.target().clone(), Plane::filled(8, 8, 0.0), Plane::filled(8, 8, 1.0)]).unwrap()
            })
            .collect();
        let zero = ConstantPredictor::new(0.25, 3);
        let a = evaluate_loss(&zero, &clean, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = evaluate_loss(&zero, &perturbed, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }

    #[test]
    fn arity_mismatch() {
        let s = sched();
        let mut net = UNet::new(NetConfig::desk(3), 0).unwrap();
        let mut adam = Adam::new(1e-3, net.params());
        let clean = vec![ChannelStack::new(vec![Plane::zeros(32, 32)]).unwrap()];
        let err = train_step(&mut net, &mut adam, &clean, &s, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn small_net_gradients_match_finite_differences() {
        let cfg = NetConfig {
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 16,
            patch_side: 8,
        };
        let net = UNet::new(cfg, 4).unwrap();
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean: Vec<ChannelStack> = (0..2)
            .map(|_| ChannelStack::new((0..3).map(|_| Plane::from_fn(8, 8, |_, _| rng.random())).collect()).unwrap())
            .collect();
        let batch = noise_batch(&clean, &s, &mut rng).unwrap();
        for c in gradient_check(&net, &batch, 10, 1e-3, 6).unwrap() {
            assert!(c.relative_error() < 0.01, "{c:?}");
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let cfg = NetConfig {
            in_channels: 1,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 16,
            patch_side: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = StackList(gaussian_batch(16, 8, &mut rng));
        let tc = TrainConfig {
            batch_size: 2,
            max_iterations: 6,
            ..TrainConfig::desk(1)
        };
        let full = train_loop(cfg.clone(), tc.clone(), &data, sched(), None).unwrap();

        let mut first = Trainer::new(cfg, tc.clone(), sched()).unwrap();
        first.run_until(&data, 3, None).unwrap();
        let mut buf = Vec::new();
        first.checkpoint().write_to(&mut buf).unwrap();
        let ck = Checkpoint::read_from(buf.as_slice()).unwrap();
        let mut resumed = Trainer::resume(&ck, tc).unwrap();
        resumed.run_until(&data, 6, None).unwrap();
        assert_eq!(resumed.net.params(), full.net.params());
        assert_eq!(resumed.adam, full.adam);
    }

    #[test]
    fn init_from_rejects_incompatible_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let net3 = UNet::new(NetConfig::desk(3), 0).unwrap();
        let path = dir.path().join("s3.mambo");
        Checkpoint::from_net(&net3, &sched(), 3).save(&path).unwrap();
        let mut tc = TrainConfig::desk(2);
        tc.init_from = Some(path.clone());
        let t = Trainer::new(NetConfig::desk(3), tc, sched()).unwrap();
        assert_eq!(t.net.params(), net3.params());
        let mut tc = TrainConfig::desk(1);
        tc.init_from = Some(path);
        let err = Trainer::new(NetConfig::desk(1), tc, sched()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("[16, 3, 3, 3]")), "{err}");
    }
}
