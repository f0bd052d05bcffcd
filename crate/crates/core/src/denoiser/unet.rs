//! Reference encoder–decoder noise predictor.
//!
//! One residual block per resolution level on the way down, a middle block,
//! and one residual block per level on the way up fed with the matching skip
//! connection. Downsampling is a stride-2 3x3 convolution; upsampling is
//! nearest-neighbour 2x followed by a 3x3 convolution. Every residual block
//! receives the sinusoidal timestep embedding through a per-block projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Tensor;
use super::graph::{Element, Graph, NodeId, Param, ParamId};
use super::{ChannelStack, NoisePredictor};
use crate::error::{Error, Result};
use crate::plane::Plane;

/// Largest group count used by group normalization.
const MAX_NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub patch_side: usize,
}

impl NetConfig {
    /// `in_channels` x 32 x 32, base 16, multipliers [1, 2, 4].
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 64,
            patch_side: 32,
        }
    }

    /// `in_channels` x 256 x 256, base 128, multipliers [1, 2, 2, 4, 4].
    pub fn paper(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 128,
            channel_multipliers: vec![1, 2, 2, 4, 4],
            time_embed_dim: 512,
            patch_side: 256,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial sides must be divisible by this.
    pub fn side_divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels must be 1..=3, got {}",
                self.in_channels
            )));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be nonempty and positive".into()));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "base_channels must be an even number >= 2, got {}",
                self.base_channels
            )));
        }
        if self.time_embed_dim == 0 {
            return Err(Error::Config("time_embed_dim must be positive".into()));
        }
        if self.patch_side == 0 || !self.patch_side.is_multiple_of(self.side_divisor()) {
            return Err(Error::Config(format!(
                "patch_side {} must be a positive multiple of {}",
                self.patch_side,
                self.side_divisor()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    in_ch: usize,
    out_ch: usize,
    norm1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    time: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct Layout {
    init: (ParamId, ParamId),
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    down: Vec<ResBlock>,
    downsample: Vec<(ParamId, ParamId)>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    upsample: Vec<(ParamId, ParamId)>,
    out_norm: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

/// Allocates parameters in a fixed order and initializes them from one RNG
/// stream, so a (config, seed) pair fully determines the network.
struct Builder<'a> {
    params: Vec<Param<f32>>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }

    fn constant(&mut self, name: String, len: usize, value: f32) -> ParamId {
        self.params.push(Param {
            name,
            shape: vec![len],
            data: vec![value; len],
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (ParamId, ParamId) {
        let fan_in = cin * k * k;
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin, k, k], fan_in);
        let b = self.uniform(format!("{name}.bias"), vec![cout], fan_in);
        (w, b)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> (ParamId, ParamId) {
        let w = self.uniform(format!("{name}.weight"), vec![dout, din], din);
        let b = self.uniform(format!("{name}.bias"), vec![dout], din);
        (w, b)
    }

    fn norm(&mut self, name: &str, ch: usize) -> (ParamId, ParamId) {
        let g = self.constant(format!("{name}.gamma"), ch, 1.0);
        let b = self.constant(format!("{name}.beta"), ch, 0.0);
        (g, b)
    }

    fn res_block(&mut self, name: &str, in_ch: usize, out_ch: usize, temb: usize) -> ResBlock {
        ResBlock {
            in_ch,
            out_ch,
            norm1: self.norm(&format!("{name}.norm1"), in_ch),
            conv1: self.conv(&format!("{name}.conv1"), in_ch, out_ch, 3),
            time: self.linear(&format!("{name}.time"), temb, out_ch),
            norm2: self.norm(&format!("{name}.norm2"), out_ch),
            conv2: self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3),
            skip: (in_ch != out_ch).then(|| self.conv(&format!("{name}.skip"), in_ch, out_ch, 1)),
        }
    }
}

fn build_layout(cfg: &NetConfig, seed: u64) -> (Layout, Vec<Param<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        rng: &mut rng,
    };
    let base = cfg.base_channels;
    let temb = cfg.time_embed_dim;
    let chans: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * base).collect();
    let levels = chans.len();

    let init = b.conv("init", cfg.in_channels, base, 3);
    let time1 = b.linear("time.fc1", base, temb);
    let time2 = b.linear("time.fc2", temb, temb);

    let mut down = Vec::with_capacity(levels);
    let mut downsample = Vec::new();
    let mut prev = base;
    for (i, &c) in chans.iter().enumerate() {
        down.push(b.res_block(&format!("down.{i}"), prev, c, temb));
        if i + 1 < levels {
            downsample.push(b.conv(&format!("down.{i}.downsample"), c, c, 3));
        }
        prev = c;
    }
    let mid = b.res_block("mid", prev, prev, temb);

    // Built deepest-first; stored so that index i matches level i.
    let mut up: Vec<Option<ResBlock>> = vec![None; levels];
    let mut upsample: Vec<Option<(ParamId, ParamId)>> = vec![None; levels];
    let mut cur = prev;
    for i in (0..levels).rev() {
        up[i] = Some(b.res_block(&format!("up.{i}"), cur + chans[i], chans[i], temb));
        cur = chans[i];
        if i > 0 {
            upsample[i] = Some(b.conv(&format!("up.{i}.upsample"), chans[i], chans[i - 1], 3));
            cur = chans[i - 1];
        }
    }
    let out_norm = b.norm("out.norm", chans[0]);
    let out = b.conv("out.conv", chans[0], 1, 3);

    let layout = Layout {
        init,
        time1,
        time2,
        down,
        downsample,
        mid,
        up: up.into_iter().map(|u| u.expect("every level built")).collect(),
        upsample: upsample.into_iter().skip(1).map(|u| u.expect("levels > 0 upsample")).collect(),
        out_norm,
        out,
    };
    (layout, b.params)
}

fn norm_groups(ch: usize) -> usize {
    gcd(MAX_NORM_GROUPS, ch)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(t f_i), cos(t f_i)]`
/// with `f_i = 10000^(-i / (half - 1))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scale = if half > 1 {
        (10000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * scale).exp()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

#[derive(Debug, Clone)]
pub struct UNet<F = f32> {
    config: NetConfig,
    layout: Layout,
    params: Vec<Param<F>>,
}

impl UNet<f32> {
    /// A freshly initialized network; identical (config, seed) pairs give
    /// bit-identical parameters.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_layout(&config, seed);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a network from named tensors, checking every name and shape.
    pub fn from_tensors(config: NetConfig, tensors: &[Tensor]) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.load_tensors(tensors)?;
        Ok(net)
    }
}

impl<F: Element> UNet<F> {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<G: Element>(&self) -> UNet<G> {
        UNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Param::cast).collect(),
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<F>> {
        self.params.iter().map(|p| vec![F::zero(); p.data.len()]).collect()
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        for p in &mut self.params {
            let Some(src) = tensors.iter().find(|t| t.name == p.name) else {
                return Err(Error::Checkpoint(format!("missing tensor {}", p.name)));
            };
            if src.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, network expects {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.data = src.data.iter().map(|&v| F::of(v as f64)).collect();
        }
        Ok(())
    }

    /// Parameters as f32 tensors, in allocation order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    fn check_input(&self, input: &ChannelStack) -> Result<()> {
        if input.arity() != self.config.in_channels {
            return Err(Error::Config(format!(
                "network takes {} channels, got {}",
                self.config.in_channels,
                input.arity()
            )));
        }
        let (h, w) = input.shape();
        let d = self.config.side_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Contract(format!(
                "input {h}x{w} is not divisible by {d}"
            )));
        }
        Ok(())
    }

    fn res_block(&self, g: &mut Graph<'_, F>, blk: &ResBlock, x: NodeId, temb: NodeId) -> NodeId {
        let h = g.group_norm(x, blk.norm1.0, blk.norm1.1, norm_groups(blk.in_ch));
        let h = g.silu(h);
        let h = g.conv(h, blk.conv1.0, blk.conv1.1, 1);
        let e = g.linear(temb, blk.time.0, blk.time.1);
        let h = g.add_channel(h, e);
        let h = g.group_norm(h, blk.norm2.0, blk.norm2.1, norm_groups(blk.out_ch));
        let h = g.silu(h);
        let h = g.conv(h, blk.conv2.0, blk.conv2.1, 1);
        let skip = match blk.skip {
            Some((w, b)) => g.conv(x, w, b, 1),
            None => x,
        };
        g.add(h, skip)
    }

    /// Builds the forward pass on `g`; returns the output node `(1, h, w)`.
    fn forward(&self, g: &mut Graph<'_, F>, input: &ChannelStack, t: usize) -> NodeId {
        let l = &self.layout;
        let (h, w) = input.shape();
        let mut data = Vec::with_capacity(input.arity() * h * w);
        for ch in input.channels() {
            data.extend(ch.as_slice().iter().map(|&v| F::of(v)));
        }
        let x = g.input(input.arity(), h, w, data);
        let emb: Vec<F> = timestep_embedding(t, self.config.base_channels)
            .into_iter()
            .map(F::of)
            .collect();
        let emb = g.input(self.config.base_channels, 1, 1, emb);
        let temb = g.linear(emb, l.time1.0, l.time1.1);
        let temb = g.silu(temb);
        let temb = g.linear(temb, l.time2.0, l.time2.1);
        // Each block sees silu(temb) before its own projection.
        let temb = g.silu(temb);

        let mut hcur = g.conv(x, l.init.0, l.init.1, 1);
        let mut skips = Vec::with_capacity(l.down.len());
        for (i, blk) in l.down.iter().enumerate() {
            hcur = self.res_block(g, blk, hcur, temb);
            skips.push(hcur);
            if let Some(&(wd, bd)) = l.downsample.get(i) {
                hcur = g.conv(hcur, wd, bd, 2);
            }
        }
        hcur = self.res_block(g, &l.mid, hcur, temb);
        for i in (0..l.up.len()).rev() {
            let cat = g.concat(hcur, skips[i]);
            hcur = self.res_block(g, &l.up[i], cat, temb);
            if i > 0 {
                let (wu, bu) = l.upsample[i - 1];
                let upd = g.upsample(hcur);
                hcur = g.conv(upd, wu, bu, 1);
            }
        }
        let hcur = g.group_norm(hcur, l.out_norm.0, l.out_norm.1, norm_groups(self.config.base_channels * self.config.channel_multipliers[0]));
        let hcur = g.silu(hcur);
        g.conv(hcur, l.out.0, l.out.1, 1)
    }

    /// Predicted noise in the network's own precision.
    pub fn forward_values(&self, input: &ChannelStack, t: usize) -> Result<Vec<F>> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.params, false);
        let out = self.forward(&mut g, input, t);
        Ok(g.into_value(out))
    }

    /// Adds `weight * d/dθ sum((pred - eps)^2)` into `grads` and returns the
    /// unweighted sum of squared errors.
    pub fn accumulate_gradients(
        &self,
        input: &ChannelStack,
        t: usize,
        eps: &Plane,
        weight: f64,
        grads: &mut [Vec<F>],
    ) -> Result<f64> {
        self.check_input(input)?;
        if eps.shape() != input.shape() {
            return Err(Error::ShapeMismatch {
                expected: input.shape(),
                found: eps.shape(),
            });
        }
        let mut g = Graph::new(&self.params, true);
        let out = self.forward(&mut g, input, t);
        let pred = g.value(out);
        let mut sse = 0.0f64;
        let w2 = F::of(2.0 * weight);
        let seed: Vec<F> = pred
            .iter()
            .zip(eps.as_slice())
            .map(|(&p, &e)| {
                let d = p - F::of(e);
                sse += d.as_f64() * d.as_f64();
                w2 * d
            })
            .collect();
        g.backward(out, seed, grads);
        Ok(sse)
    }
}

impl<F: Element> NoisePredictor for UNet<F> {
    fn arity(&self) -> usize {
        self.config.in_channels
    }

    fn predict(&self, input: &ChannelStack, t: usize) -> Result<Plane> {
        let (h, w) = input.shape();
        let values = self.forward_values(input, t)?;
        Plane::from_vec(h, w, values.into_iter().map(|v| v.as_f64()).collect())
    }

    fn parameters(&self) -> Option<Vec<(&str, &[usize])>> {
        Some(
            self.params
                .iter()
                .map(|p| (p.name.as_str(), p.shape.as_slice()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(arity: usize, side: usize) -> ChannelStack {
        ChannelStack::new(
            (0..arity)
                .map(|c| Plane::from_fn(side, side, |r, q| ((r * 7 + q * 3 + c) % 11) as f64 / 11.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn desk_profile_shape_contract() {
        let net = UNet::new(NetConfig::desk(3), 1).unwrap();
        let out = net.predict(&stack(3, 32), 17).unwrap();
        assert_eq!(out.shape(), (32, 32));
        assert!(out.all_finite());
    }

    #[test]
    fn initialization_is_seeded() {
        let a = UNet::new(NetConfig::desk(1), 9).unwrap();
        let b = UNet::new(NetConfig::desk(1), 9).unwrap();
        let c = UNet::new(NetConfig::desk(1), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let s = stack(1, 16);
        assert_eq!(a.predict(&s, 3).unwrap(), b.predict(&s, 3).unwrap());
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut cfg = NetConfig::desk(3);
        cfg.patch_side = 30;
        assert!(matches!(UNet::new(cfg, 0), Err(Error::Config(_))));
        let mut cfg = NetConfig::desk(3);
        cfg.channel_multipliers.clear();
        assert!(UNet::new(cfg, 0).is_err());
        let net = UNet::new(NetConfig::desk(3), 0).unwrap();
        assert!(net.predict(&stack(1, 32), 1).is_err());
        assert!(net.predict(&stack(3, 30), 1).is_err());
    }

    #[test]
    fn paper_profile_config_is_valid() {
        let cfg = NetConfig::paper(3);
        cfg.validate().unwrap();
        assert_eq!(cfg.channel_multipliers, vec![1, 2, 2, 4, 4]);
        assert_eq!(cfg.base_channels, 128);
        assert_eq!(cfg.patch_side, 256);
    }

    #[test]
    fn timestep_embedding_endpoints() {
        let e = timestep_embedding(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let e = timestep_embedding(5, 8);
        assert!((e[0] - 5f64.sin()).abs() < 1e-15);
    }
}
