//! Encoders `f` and the projection head `h`.
//!
//! Two encoders are available: a vector MLP and a small patch-mixer for
//! images. Both produce a flat embedding `z = f(x)` consumed by the
//! clustering branch; the head maps `z` to the representation fed to the
//! contrastive loss.
//!
//! Mixer layout for an `[N, C_in, H, W]` batch:
//!
//! ```text
//! patch embed:  x -> BN(GELU(patch_conv(x) + b))
//! block:        a   = BN(GELU(drop(dw(x) + b)))  + x
//!               out = BN(GELU(drop(pw(a) + b)))  + a
//! pooling:      mean over spatial positions -> [N, channels]
//! ```
//!
//! Parameter count (weights, biases and batchnorm affine terms; running
//! statistics excluded), with `c = channels`, `p = patch_size`,
//! `k = dw_kernel`:
//!
//! ```text
//! mixer: c*C_in*p^2 + 3c  +  depth * (c*k^2 + c^2 + 6c)  +  head(c)
//! mlp:   sum_l (in_l * out_l + out_l)                     +  head(out_last)
//! head(e) = e*hidden + hidden + hidden*embed_dim + embed_dim
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{channel_moments, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::adam::ParamSet;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub channels: usize,
    pub dw_kernel: usize,
    pub dropout_rate: f64,
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            in_channels: 3,
            patch_size: 2,
            depth: 4,
            channels: 64,
            dw_kernel: 7,
            dropout_rate: 0.04,
            head_hidden: 512,
            embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Widths of the hidden layers; the last one is the embedding size.
    pub hidden: Vec<usize>,
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 2,
            hidden: vec![64, 32],
            head_hidden: 64,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderConfig {
    Mlp(MlpConfig),
    Mixer(MixerConfig),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Mlp(MlpConfig::default())
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(format!("{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self {
            EncoderConfig::Mlp(c) => {
                positive("input_dim", c.input_dim)?;
                if c.hidden.is_empty() {
                    return Err(Error::invalid("mlp needs at least one hidden layer"));
                }
                for &h in &c.hidden {
                    positive("hidden width", h)?;
                }
                positive("head_hidden", c.head_hidden)?;
                positive("embed_dim", c.embed_dim)
            }
            EncoderConfig::Mixer(c) => {
                positive("in_channels", c.in_channels)?;
                positive("patch_size", c.patch_size)?;
                positive("channels", c.channels)?;
                positive("dw_kernel", c.dw_kernel)?;
                positive("head_hidden", c.head_hidden)?;
                positive("embed_dim", c.embed_dim)?;
                if c.dw_kernel % 2 == 0 {
                    return Err(Error::invalid("dw_kernel must be odd for same padding"));
                }
                if !(0.0..1.0).contains(&c.dropout_rate) {
                    return Err(Error::invalid(format!(
                        "dropout_rate must lie in [0, 1), got {}",
                        c.dropout_rate
                    )));
                }
                Ok(())
            }
        }
    }

    /// Length of the embedding `f(x)`.
    pub fn embedding_dim(&self) -> usize {
        match self {
            EncoderConfig::Mlp(c) => *c.hidden.last().expect("validated"),
            EncoderConfig::Mixer(c) => c.channels,
        }
    }

    /// Length of the representation `h(f(x))`.
    pub fn representation_dim(&self) -> usize {
        match self {
            EncoderConfig::Mlp(c) => c.embed_dim,
            EncoderConfig::Mixer(c) => c.embed_dim,
        }
    }

    fn head_hidden(&self) -> usize {
        match self {
            EncoderConfig::Mlp(c) => c.head_hidden,
            EncoderConfig::Mixer(c) => c.head_hidden,
        }
    }

    /// Trainable parameter count by the closed-form formula.
    pub fn param_count(&self) -> usize {
        let e = self.embedding_dim();
        let (hh, o) = (self.head_hidden(), self.representation_dim());
        let head = e * hh + hh + hh * o + o;
        match self {
            EncoderConfig::Mlp(c) => {
                let mut prev = c.input_dim;
                let mut total = 0;
                for &w in &c.hidden {
                    total += prev * w + w;
                    prev = w;
                }
                total + head
            }
            EncoderConfig::Mixer(c) => {
                let ch = c.channels;
                let k = c.dw_kernel;
                ch * c.in_channels * c.patch_size.pow(2)
                    + 3 * ch
                    + c.depth * (ch * k * k + ch * ch + 6 * ch)
                    + head
            }
        }
    }

    /// Per-sample input shape for a given image side (ignored for the MLP).
    pub fn sample_shape(&self, side: usize) -> Vec<usize> {
        match self {
            EncoderConfig::Mlp(c) => vec![c.input_dim],
            EncoderConfig::Mixer(c) => vec![c.in_channels, side, side],
        }
    }

    /// Name, shape and initializer of every trainable tensor, in
    /// initialization order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, ParamInit)> {
        let mut specs = Vec::new();
        let lin = |specs: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
            specs.push((format!("{name}.w"), vec![fan_in, fan_out], ParamInit::Uniform(fan_in)));
            specs.push((format!("{name}.b"), vec![fan_out], ParamInit::Uniform(fan_in)));
        };
        let bn = |specs: &mut Vec<(String, Vec<usize>, ParamInit)>, name: &str, c: usize| {
            specs.push((format!("{name}.gamma"), vec![c], ParamInit::Ones));
            specs.push((format!("{name}.beta"), vec![c], ParamInit::Zeros));
        };
        match self {
            EncoderConfig::Mlp(c) => {
                let mut prev = c.input_dim;
                for (l, &w) in c.hidden.iter().enumerate() {
                    lin(&mut specs, &format!("mlp.layer{l:02}"), prev, w);
                    prev = w;
                }
            }
            EncoderConfig::Mixer(c) => {
                let (ch, p, k) = (c.channels, c.patch_size, c.dw_kernel);
                let fan = c.in_channels * p * p;
                specs.push(("patch.w".into(), vec![ch, c.in_channels, p, p], ParamInit::Uniform(fan)));
                specs.push(("patch.b".into(), vec![ch], ParamInit::Uniform(fan)));
                bn(&mut specs, "patch.bn", ch);
                for l in 0..c.depth {
                    let pre = format!("block{l:02}");
                    specs.push((format!("{pre}.dw.w"), vec![ch, k, k], ParamInit::Uniform(k * k)));
                    specs.push((format!("{pre}.dw.b"), vec![ch], ParamInit::Uniform(k * k)));
                    bn(&mut specs, &format!("{pre}.dw.bn"), ch);
                    specs.push((format!("{pre}.pw.w"), vec![ch, ch], ParamInit::Uniform(ch)));
                    specs.push((format!("{pre}.pw.b"), vec![ch], ParamInit::Uniform(ch)));
                    bn(&mut specs, &format!("{pre}.pw.bn"), ch);
                }
            }
        }
        let (e, hh, o) = (self.embedding_dim(), self.head_hidden(), self.representation_dim());
        lin(&mut specs, "head.fc1", e, hh);
        lin(&mut specs, "head.fc2", hh, o);
        specs
    }

    /// Names of the batchnorm layers, each with its channel count.
    fn bn_layers(&self) -> Vec<(String, usize)> {
        match self {
            EncoderConfig::Mlp(_) => Vec::new(),
            EncoderConfig::Mixer(c) => {
                let mut out = vec![("patch.bn".to_string(), c.channels)];
                for l in 0..c.depth {
                    out.push((format!("block{l:02}.dw.bn"), c.channels));
                    out.push((format!("block{l:02}.pw.bn"), c.channels));
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamInit {
    Uniform(usize),
    Ones,
    Zeros,
}

/// Forward-pass mode. Training mode uses batch statistics in batchnorm and
/// dropout masks drawn from `mask_seed`; evaluation mode is deterministic
/// and dropout-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { mask_seed: u64 },
    Eval,
}

/// Graph node holding encoder output `f(x)`; input to the clustering branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding(pub NodeId);

/// Graph node holding head output `h(f(x))`; input to the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Representation(pub NodeId);

/// Parameters registered as leaves of one graph.
#[derive(Debug, Clone)]
pub struct ParamNodes(pub BTreeMap<String, NodeId>);

impl ParamNodes {
    fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }
}

/// Batch statistics seen by each batchnorm layer during training-mode
/// forwards, applied to the running buffers by [`Encoder::apply_bn_stats`].
#[derive(Debug, Clone, Default)]
pub struct BnStats(pub Vec<(String, Vec<f64>, Vec<f64>, usize)>);

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    pub params: ParamSet,
    /// Batchnorm running means and variances, `<layer>.running_mean` and
    /// `<layer>.running_var`.
    pub buffers: ParamSet,
}

impl Encoder {
    /// Seeded uniform fan-in initialization: weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in config.param_specs() {
            let t = match init {
                ParamInit::Uniform(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
                }
                ParamInit::Ones => Tensor::ones(&shape),
                ParamInit::Zeros => Tensor::zeros(&shape),
            };
            params.insert(name, t);
        }
        let mut buffers = ParamSet::new();
        for (name, c) in config.bn_layers() {
            buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(format!("{name}.running_var"), Tensor::ones(&[c]));
        }
        Ok(Encoder {
            config,
            params,
            buffers,
        })
    }

    /// Rebuilds an encoder from stored tensors, checking every shape.
    pub fn from_parts(config: EncoderConfig, params: ParamSet, buffers: ParamSet) -> Result<Self> {
        let fresh = Encoder::new(config.clone(), 0)?;
        for (set, want, what) in [(&params, &fresh.params, "parameter"), (&buffers, &fresh.buffers, "buffer")] {
            if set.len() != want.len() {
                return Err(Error::invalid(format!("expected {} {what} tensors, got {}", want.len(), set.len())));
            }
            for (name, t) in want {
                let got = set
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("missing {what} `{name}`")))?;
                if got.shape() != t.shape() {
                    return Err(Error::shape("encoder_from_parts", t.shape(), got.shape()));
                }
                if !got.all_finite() {
                    return Err(Error::NonFinite(format!("{what} `{name}`")));
                }
            }
        }
        Ok(Encoder {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        ParamNodes(
            self.params
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        )
    }

    /// Records `f(x)` for a batch `x` (`[N, input_dim]` or `[N, C, H, W]`).
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        x: NodeId,
        mode: Mode,
        stats: &mut BnStats,
    ) -> Result<Embedding> {
        let xs = g.shape(x).to_vec();
        match &self.config {
            EncoderConfig::Mlp(c) => {
                if xs.len() != 2 || xs[1] != c.input_dim {
                    return Err(Error::shape("mlp_encode", &[0, c.input_dim], &xs));
                }
                let mut h = x;
                for l in 0..c.hidden.len() {
                    h = linear(g, p, &format!("mlp.layer{l:02}"), h)?;
                    h = g.gelu(h)?;
                }
                Ok(Embedding(h))
            }
            EncoderConfig::Mixer(c) => {
                if xs.len() != 4 || xs[1] != c.in_channels {
                    return Err(Error::shape("mixer_encode", &[0, c.in_channels, 0, 0], &xs));
                }
                if xs[2] % c.patch_size != 0 || xs[3] % c.patch_size != 0 {
                    return Err(Error::invalid(format!(
                        "patch size {} does not divide image {}x{}",
                        c.patch_size, xs[2], xs[3]
                    )));
                }
                let mut drop = DropoutStream::new(mode, c.dropout_rate);
                let pw = g.patch_conv(x, p.get("patch.w")?)?;
                let pw = add_channel_bias(g, pw, p.get("patch.b")?)?;
                let act = g.gelu(pw)?;
                let mut h = self.batchnorm(g, p, "patch.bn", act, mode, stats)?;
                for l in 0..c.depth {
                    h = self.mixer_block(g, p, l, h, mode, &mut drop, stats)?;
                }
                let s = g.shape(h).to_vec();
                let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
                Ok(Embedding(g.mean_axis(flat, 2)?))
            }
        }
    }

    fn mixer_block(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        l: usize,
        x: NodeId,
        mode: Mode,
        drop: &mut DropoutStream,
        stats: &mut BnStats,
    ) -> Result<NodeId> {
        let pre = format!("block{l:02}");
        let dw = g.depthwise_conv(x, p.get(&format!("{pre}.dw.w"))?)?;
        let dw = add_channel_bias(g, dw, p.get(&format!("{pre}.dw.b"))?)?;
        let dw = drop.apply(g, dw)?;
        let dw = g.gelu(dw)?;
        let dw = self.batchnorm(g, p, &format!("{pre}.dw.bn"), dw, mode, stats)?;
        let a = g.add(dw, x)?;

        let pw = g.pointwise_conv(a, p.get(&format!("{pre}.pw.w"))?)?;
        let pw = add_channel_bias(g, pw, p.get(&format!("{pre}.pw.b"))?)?;
        let pw = drop.apply(g, pw)?;
        let pw = g.gelu(pw)?;
        let pw = self.batchnorm(g, p, &format!("{pre}.pw.bn"), pw, mode, stats)?;
        g.add(pw, a)
    }

    /// One mixing block applied to `x: [N, C, H, W]` (block index `l`).
    pub fn mixer_block_graph(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        l: usize,
        x: NodeId,
        mode: Mode,
        stats: &mut BnStats,
    ) -> Result<NodeId> {
        let EncoderConfig::Mixer(c) = &self.config else {
            return Err(Error::invalid("mixer block requested from an MLP encoder"));
        };
        if l >= c.depth {
            return Err(Error::invalid(format!("block {l} out of range for depth {}", c.depth)));
        }
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != c.channels {
            return Err(Error::shape("mixer_block", &[0, c.channels, 0, 0], &s));
        }
        let mut drop = DropoutStream::new(mode, c.dropout_rate);
        drop.layer = 2 * l as u64;
        self.mixer_block(g, p, l, x, mode, &mut drop, stats)
    }

    fn batchnorm(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        name: &str,
        x: NodeId,
        mode: Mode,
        stats: &mut BnStats,
    ) -> Result<NodeId> {
        let gamma = p.get(&format!("{name}.gamma"))?;
        let beta = p.get(&format!("{name}.beta"))?;
        match mode {
            Mode::Train { .. } => {
                let (mean, var) = channel_moments(g.value(x))?;
                let s = g.shape(x);
                let count = s[0] * s[2..].iter().product::<usize>();
                stats.0.push((name.to_string(), mean, var, count));
                g.batchnorm_train(x, gamma, beta, BN_EPS)
            }
            Mode::Eval => {
                let rm = &self.buffers[&format!("{name}.running_mean")];
                let rv = &self.buffers[&format!("{name}.running_var")];
                g.batchnorm_eval(x, gamma, beta, BN_EPS, rm.data(), rv.data())
            }
        }
    }

    /// Records `h(z)`.
    pub fn project_graph(&self, g: &mut Graph, p: &ParamNodes, z: Embedding) -> Result<Representation> {
        let zs = g.shape(z.0).to_vec();
        let e = self.config.embedding_dim();
        if zs.len() != 2 || zs[1] != e {
            return Err(Error::shape("project", &[0, e], &zs));
        }
        let h = linear(g, p, "head.fc1", z.0)?;
        let h = g.gelu(h)?;
        Ok(Representation(linear(g, p, "head.fc2", h)?))
    }

    /// Exponential moving update of the running statistics (unbiased
    /// variance), in the order the statistics were recorded.
    pub fn apply_bn_stats(&mut self, stats: &BnStats) -> Result<()> {
        for (name, mean, var, count) in &stats.0 {
            let unbias = if *count > 1 { *count as f64 / (*count - 1) as f64 } else { 1.0 };
            let rm = self
                .buffers
                .get_mut(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::invalid(format!("unknown batchnorm layer `{name}`")))?;
            for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self
                .buffers
                .get_mut(&format!("{name}.running_var"))
                .expect("buffers come in pairs");
            for (r, v) in rv.data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Embeddings of a batch in evaluation mode.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.register(&mut g, false);
        let xn = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &p, xn, Mode::Eval, &mut BnStats::default())?;
        Ok(g.value(z.0).clone())
    }

    /// Embedding of a single sample (`[input_dim]` or `[C, H, W]`) in the
    /// given mode.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let mut g = Graph::new();
        let p = self.register(&mut g, false);
        let xn = g.constant(x.reshape(&shape)?);
        let z = self.encode_graph(&mut g, &p, xn, mode, &mut BnStats::default())?;
        g.value(z.0).reshape(&[self.config.embedding_dim()])
    }

    /// Head output for a batch of embeddings `[N, e]`.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.register(&mut g, false);
        let zn = g.constant(z.clone());
        let r = self.project_graph(&mut g, &p, Embedding(zn))?;
        Ok(g.value(r.0).clone())
    }
}

fn linear(g: &mut Graph, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add(xw, p.get(&format!("{name}.b"))?)
}

fn add_channel_bias(g: &mut Graph, x: NodeId, b: NodeId) -> Result<NodeId> {
    let c = g.shape(b)[0];
    let b4 = g.reshape(b, &[1, c, 1, 1])?;
    g.add(x, b4)
}

/// Dropout masks for successive layers, each from its own stream of the
/// mask seed so masks do not depend on tensor sizes elsewhere.
struct DropoutStream {
    seed: Option<u64>,
    rate: f64,
    layer: u64,
}

impl DropoutStream {
    fn new(mode: Mode, rate: f64) -> Self {
        let seed = match mode {
            Mode::Train { mask_seed } if rate > 0.0 => Some(mask_seed),
            _ => None,
        };
        DropoutStream { seed, rate, layer: 0 }
    }

    fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let layer = self.layer;
        self.layer += 1;
        let Some(seed) = self.seed else { return Ok(x) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(layer);
        let keep = 1.0 / (1.0 - self.rate);
        let n = g.value(x).len();
        let scale = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        g.dropout(x, scale)
    }
}
