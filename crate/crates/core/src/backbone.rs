//! Conditional U-Net denoiser.
//!
//! Input channels are `[pre, noisy_target]` or `[pre, noisy_target, mask]`,
//! concatenated along the channel axis. Each stage has one residual block
//! with a timestep-embedding injection; the bottleneck adds a single-head
//! spatial self-attention layer. Output is one channel, the clean-target
//! estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 2 for pre-only conditioning, 3 when the tumor mask is an extra channel.
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of down/up stages.
    pub depth: usize,
    /// Width multiplier per stage; shorter lists repeat their last entry.
    #[serde(default = "default_channel_mult")]
    pub channel_mult: Vec<usize>,
    #[serde(default = "default_true")]
    pub attention_at_bottleneck: bool,
    pub time_embed_dim: usize,
}

fn default_channel_mult() -> Vec<usize> {
    vec![1, 2, 2]
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_width: 32,
            depth: 3,
            channel_mult: default_channel_mult(),
            attention_at_bottleneck: true,
            time_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 2 | 3) {
            return Err(Error::Config(format!(
                "in_channels must be 2 or 3, got {}",
                self.in_channels
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_width < 8 {
            return Err(Error::Config(format!(
                "base_width must be at least 8, got {}",
                self.base_width
            )));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even and ≥ 2".into()));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::Config("channel_mult must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Channel width of stage `level`.
    pub fn width_at(&self, level: usize) -> usize {
        let mult = self
            .channel_mult
            .get(level)
            .or(self.channel_mult.last())
            .copied()
            .unwrap_or(1);
        self.base_width * mult
    }

    /// Spatial dimensions must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Conditioning images for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub pre: Grid,
    pub mask: Option<Grid>,
}

impl ConditionBundle {
    pub fn new(pre: Grid, mask: Option<Grid>) -> Self {
        Self { pre, mask }
    }
}

fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.uniform_fan_in(format!("{name}.weight"), &[c_out, c_in, k, k], fan_in, rng);
        let b = store.uniform_fan_in(format!("{name}.bias"), &[c_out], fan_in, rng);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.insert(format!("{name}.weight"), Tensor::full(vec![channels], 1.0));
        let beta = store.insert(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        Self {
            gamma,
            beta,
            groups: groups_for(channels),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.uniform_fan_in(format!("{name}.weight"), &[f_out, f_in], f_in, rng);
        let b = store.uniform_fan_in(format!("{name}.bias"), &[f_out], f_in, rng);
        Self { w, b }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), c_in),
            conv1: Conv::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, rng),
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, c_out, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), c_out),
            conv2: Conv::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng),
            skip: (c_in != c_out).then(|| Conv::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h);
        let t = self.temb.forward(g, store, temb);
        let h = g.add_channel(h, t);
        let h = self.norm2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let residual = match &self.skip {
            Some(skip) => skip.forward(g, store, x),
            None => x,
        };
        g.add(h, residual)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), c),
            q: Conv::new(store, &format!("{name}.q"), c, c, 1, 1, rng),
            k: Conv::new(store, &format!("{name}.k"), c, c, 1, 1, rng),
            v: Conv::new(store, &format!("{name}.v"), c, c, 1, 1, rng),
            proj: Conv::new(store, &format!("{name}.proj"), c, c, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (n, c, h, w) = g.value(x).dims4();
        let l = h * w;
        let hn = self.norm.forward(g, store, x);
        let q = self.q.forward(g, store, hn);
        let k = self.k.forward(g, store, hn);
        let v = self.v.forward(g, store, hn);
        let q = g.reshape(q, &[n, c, l]);
        let k = g.reshape(k, &[n, c, l]);
        let v = g.reshape(v, &[n, c, l]);
        // scores[i, j] = q_i · k_j / √c
        let scores = g.bmm(q, k, true, false);
        let scores = g.scale(scores, 1.0 / (c as f32).sqrt());
        let attn = g.softmax_last(scores);
        // out[:, i] = Σ_j attn[i, j] v[:, j]
        let out = g.bmm(v, attn, false, true);
        let out = g.reshape(out, &[n, c, h, w]);
        let out = self.proj.forward(g, store, out);
        g.add(x, out)
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    block: ResBlock,
    down: Conv,
}

#[derive(Debug, Clone)]
struct UpStage {
    up_conv: Conv,
    block: ResBlock,
}

/// Architecture description: parameter handles into a [`ParamStore`]. The
/// same layout drives both the raw and the EMA parameter sets.
#[derive(Debug, Clone)]
pub struct UNet {
    config: ModelConfig,
    time_mlp: (Linear, Linear),
    conv_in: Conv,
    downs: Vec<DownStage>,
    mid1: ResBlock,
    attention: Option<Attention>,
    mid2: ResBlock,
    ups: Vec<UpStage>,
    norm_out: Norm,
    conv_out: Conv,
}

impl UNet {
    /// Builds the layout and a freshly initialised parameter set.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = config.time_embed_dim;
        let temb_dim = 2 * e;
        let time_mlp = (
            Linear::new(&mut store, "time.fc1", e, temb_dim, &mut rng),
            Linear::new(&mut store, "time.fc2", temb_dim, temb_dim, &mut rng),
        );
        let c0 = config.width_at(0);
        let conv_in = Conv::new(&mut store, "conv_in", config.in_channels, c0, 3, 1, &mut rng);

        let mut downs = Vec::with_capacity(config.depth);
        let mut c_prev = c0;
        for level in 0..config.depth {
            let c = config.width_at(level);
            let block = ResBlock::new(&mut store, &format!("down{level}.res"), c_prev, c, temb_dim, &mut rng);
            let down = Conv::new(&mut store, &format!("down{level}.down"), c, c, 3, 2, &mut rng);
            downs.push(DownStage { block, down });
            c_prev = c;
        }
        let c_mid = config.width_at(config.depth - 1);
        let mid1 = ResBlock::new(&mut store, "mid.res1", c_mid, c_mid, temb_dim, &mut rng);
        let attention = config
            .attention_at_bottleneck
            .then(|| Attention::new(&mut store, "mid.attn", c_mid, &mut rng));
        let mid2 = ResBlock::new(&mut store, "mid.res2", c_mid, c_mid, temb_dim, &mut rng);

        let mut ups = Vec::with_capacity(config.depth);
        let mut c_cur = c_mid;
        for level in (0..config.depth).rev() {
            let c_skip = config.width_at(level);
            let up_conv = Conv::new(&mut store, &format!("up{level}.conv"), c_cur, c_cur, 3, 1, &mut rng);
            let block = ResBlock::new(
                &mut store,
                &format!("up{level}.res"),
                c_cur + c_skip,
                c_skip,
                temb_dim,
                &mut rng,
            );
            ups.push(UpStage { up_conv, block });
            c_cur = c_skip;
        }
        let norm_out = Norm::new(&mut store, "norm_out", c_cur);
        let conv_out = Conv::new(&mut store, "conv_out", c_cur, 1, 3, 1, &mut rng);

        let net = Self {
            config,
            time_mlp,
            conv_in,
            downs,
            mid1,
            attention,
            mid2,
            ups,
            norm_out,
            conv_out,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Sinusoidal timestep features, `[n, time_embed_dim]`.
    pub fn timestep_features(&self, timesteps: &[usize]) -> Tensor {
        let dim = self.config.time_embed_dim;
        let half = dim / 2;
        let mut data = Vec::with_capacity(timesteps.len() * dim);
        for &t in timesteps {
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
            data.extend(args.iter().map(|a| a.sin() as f32));
            data.extend(args.iter().map(|a| a.cos() as f32));
        }
        Tensor::new(vec![timesteps.len(), dim], data)
    }

    /// Checks an NCHW input against the configured channel count and the
    /// spatial divisibility the down/up path requires.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::ModelInput(format!("expected NCHW input, got {shape:?}")));
        };
        if *c != self.config.in_channels {
            return Err(Error::ModelInput(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 || *h == 0 || *w == 0 {
            return Err(Error::ModelInput(format!(
                "spatial size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `input` is `[n, in_channels, h, w]`,
    /// one timestep per item. Returns `[n, 1, h, w]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var, timesteps: &[usize]) -> Result<Var> {
        self.check_input(g.shape(input))?;
        if timesteps.len() != g.shape(input)[0] {
            return Err(Error::ModelInput(format!(
                "{} timesteps for a batch of {}",
                timesteps.len(),
                g.shape(input)[0]
            )));
        }
        let tfeat = g.constant(self.timestep_features(timesteps));
        let temb = self.time_mlp.0.forward(g, store, tfeat);
        let temb = g.silu(temb);
        let temb = self.time_mlp.1.forward(g, store, temb);
        let temb = g.silu(temb);

        let mut h = self.conv_in.forward(g, store, input);
        let mut skips = Vec::with_capacity(self.downs.len());
        for stage in &self.downs {
            h = stage.block.forward(g, store, h, temb);
            skips.push(h);
            h = stage.down.forward(g, store, h);
        }
        h = self.mid1.forward(g, store, h, temb);
        if let Some(attn) = &self.attention {
            h = attn.forward(g, store, h);
        }
        h = self.mid2.forward(g, store, h, temb);
        for stage in &self.ups {
            h = g.upsample2(h);
            h = stage.up_conv.forward(g, store, h);
            let skip = skips.pop().expect("one skip per stage");
            h = g.concat(h, skip);
            h = stage.block.forward(g, store, h, temb);
        }
        let h = self.norm_out.forward(g, store, h);
        let h = g.silu(h);
        Ok(self.conv_out.forward(g, store, h))
    }

    /// Stacks `[pre, x_t(, mask)]` for one item after checking the bundle
    /// against the configured channel count.
    pub fn stack_input(&self, x_t: &Grid, cond: &ConditionBundle) -> Result<Tensor> {
        let expects_mask = self.config.in_channels == 3;
        if expects_mask != cond.mask.is_some() {
            return Err(Error::ModelInput(format!(
                "model expects {} input channels but the condition {} a mask",
                self.config.in_channels,
                if cond.mask.is_some() { "carries" } else { "lacks" }
            )));
        }
        cond.pre.ensure_same_shape(x_t, "pre vs x_t")?;
        let (h, w) = x_t.shape();
        let mut data = Vec::with_capacity(self.config.in_channels * h * w);
        data.extend_from_slice(cond.pre.data());
        data.extend_from_slice(x_t.data());
        if let Some(mask) = &cond.mask {
            mask.ensure_same_shape(x_t, "mask vs x_t")?;
            data.extend_from_slice(mask.data());
        }
        Ok(Tensor::new(vec![1, self.config.in_channels, h, w], data))
    }

    /// Single-item inference: predicts the clean target from `x_t`.
    pub fn predict(&self, store: &ParamStore, x_t: &Grid, cond: &ConditionBundle, t: usize) -> Result<Grid> {
        let input = self.stack_input(x_t, cond)?;
        let mut g = Graph::new();
        let x = g.constant(input);
        let out = self.forward(&mut g, store, x, &[t])?;
        let (h, w) = x_t.shape();
        Grid::new(h, w, g.value(out).data().to_vec())
    }
}
