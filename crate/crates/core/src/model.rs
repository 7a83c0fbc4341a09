//! SE-augmented ResNet-Conformer for multi-track DOA + distance output.
//!
//! The encoder is a basic-block ResNet that pools only along frequency, so
//! the 400-frame time axis survives untouched until after the conformer
//! stack. Squeeze-and-excitation placement is controlled by the variant
//! flag: spatial excitation (sSE) in the stem, concurrent channel+spatial
//! excitation (SCSE) inside residual blocks and at the tail. Pooling is
//! everywhere the sum of average and max pooling over the same window.
//! The head applies tanh, which presumes targets scaled into [-1, 1].

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{params, Graph, ParamId, ParamStore, Real, Var};

/// Which squeeze-and-excitation blocks are instantiated.
///
/// A: stem sSE + block SCSE + tail SCSE; B: A without the tail;
/// C: stem sSE + tail SCSE only; D: no SE blocks at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub fn stem_sse(self) -> bool {
        matches!(self, Variant::A | Variant::B | Variant::C)
    }
    pub fn block_scse(self) -> bool {
        matches!(self, Variant::A | Variant::B)
    }
    pub fn tail_scse(self) -> bool {
        matches!(self, Variant::A | Variant::C)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub se_reduction: usize,
    pub conformer_layers: usize,
    pub d_model: usize,
    pub attention_heads: usize,
    pub conv_kernel: usize,
    pub tracks: usize,
    pub classes: usize,
    pub time_pool_factor: usize,
    pub time_frames: usize,
    pub freq_bins: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 7,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            se_reduction: 4,
            conformer_layers: 4,
            d_model: 256,
            attention_heads: 8,
            conv_kernel: 7,
            tracks: 3,
            classes: 13,
            time_pool_factor: 8,
            time_frames: 400,
            freq_bins: 200,
            variant: Variant::A,
        }
    }
}

impl ModelConfig {
    /// Scaled-down preset that trains in minutes on a CPU.
    pub fn toy(classes: usize) -> Self {
        Self {
            stage_channels: [8, 8, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            conformer_layers: 2,
            d_model: 64,
            attention_heads: 4,
            conv_kernel: 7,
            classes,
            ..Self::default()
        }
    }

    /// Minimal configuration used by the gradient check.
    pub fn tiny(classes: usize) -> Self {
        Self {
            stage_channels: [8, 8, 8, 8],
            blocks_per_stage: [2, 2, 2, 2],
            conformer_layers: 1,
            d_model: 16,
            attention_heads: 4,
            conv_kernel: 7,
            classes,
            ..Self::default()
        }
    }

    pub fn output_frames(&self) -> usize {
        self.time_frames / self.time_pool_factor
    }

    /// Frequency bins left after the four stage poolings.
    pub fn residual_freq_bins(&self) -> usize {
        let mut f = self.freq_bins;
        for _ in 0..4 {
            f /= 2;
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.stage_channels {
            if c % self.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "se_reduction {} must divide stage channels {:?}",
                    self.se_reduction, self.stage_channels
                )));
            }
        }
        if self.time_frames % self.time_pool_factor != 0 {
            return Err(Error::Config(format!(
                "time_pool_factor {} must divide {} time frames",
                self.time_pool_factor, self.time_frames
            )));
        }
        if self.d_model % self.attention_heads != 0 {
            return Err(Error::Config("attention heads must divide d_model".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conformer conv kernel must be odd".into()));
        }
        if self.residual_freq_bins() == 0 {
            return Err(Error::Config(format!(
                "freq_bins {} vanishes after four halvings",
                self.freq_bins
            )));
        }
        if self.tracks != crate::types::NUM_TRACKS {
            return Err(Error::Config(format!("tracks must be {}", crate::types::NUM_TRACKS)));
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-5;

struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv2dLayer {
    fn new<F: Real>(
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            params::kaiming_uniform(&[co, ci, k, k], ci * k * k, rng),
        );
        let b = store.add(format!("{name}.b"), params::zeros(&[co]));
        Self { w, b, pad: (k - 1) / 2 }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        g.conv2d(x, pv[self.w.0], pv[self.b.0], self.pad)
    }
}

struct ChannelNormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl ChannelNormLayer {
    fn new<F: Real>(name: &str, channels: usize, store: &mut ParamStore<F>) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), params::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), params::zeros(&[channels])),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        g.channel_norm(x, pv[self.gamma.0], pv[self.beta.0], NORM_EPS)
    }
}

struct LayerNormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormLayer {
    fn new<F: Real>(name: &str, dim: usize, store: &mut ParamStore<F>) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), params::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), params::zeros(&[dim])),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        g.layer_norm(x, pv[self.gamma.0], pv[self.beta.0], NORM_EPS)
    }
}

struct LinearLayer {
    w: ParamId,
    b: ParamId,
}

impl LinearLayer {
    fn new<F: Real>(
        name: &str,
        din: usize,
        dout: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::new_scaled(name, din, dout, 1.0, store, rng)
    }

    fn new_scaled<F: Real>(
        name: &str,
        din: usize,
        dout: usize,
        scale: f64,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = params::kaiming_uniform::<F>(&[din, dout], din, rng);
        if scale != 1.0 {
            w.mapv_inplace(|v| v * F::from_f64(scale));
        }
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), params::zeros(&[dout])),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let y = g.matmul(x, pv[self.w.0]);
        g.add_row_bias(y, pv[self.b.0])
    }
}

/// Spatial squeeze / channel excitation: a per-channel sigmoid gate from
/// globally pooled features.
pub struct CseBlock {
    fc1: LinearLayer,
    fc2: LinearLayer,
    channels: usize,
}

impl CseBlock {
    pub fn new<F: Real>(
        name: &str,
        channels: usize,
        reduction: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let squeezed = channels / reduction;
        Self {
            fc1: LinearLayer::new(&format!("{name}.fc1"), channels, squeezed, store, rng),
            fc2: LinearLayer::new(&format!("{name}.fc2"), squeezed, channels, store, rng),
            channels,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let pooled = g.global_mean(x);
        let row = g.reshape(pooled, &[1, self.channels]);
        let h = self.fc1.forward(g, pv, row);
        let h = g.relu(h);
        let h = self.fc2.forward(g, pv, h);
        let gate = g.sigmoid(h);
        let gate = g.reshape(gate, &[self.channels]);
        g.mul_chan_gate(x, gate)
    }
}

/// Channel squeeze / spatial excitation: a per-bin sigmoid gate from a 1x1
/// convolution down to a single channel.
pub struct SseBlock {
    conv: Conv2dLayer,
}

impl SseBlock {
    pub fn new<F: Real>(
        name: &str,
        channels: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self { conv: Conv2dLayer::new(&format!("{name}.conv"), channels, 1, 1, store, rng) }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let q = self.conv.forward(g, pv, x);
        let q = g.sigmoid(q);
        let shape = g.value(q).shape().to_vec();
        let q = g.reshape(q, &[shape[1], shape[2]]);
        g.mul_spatial_gate(x, q)
    }
}

/// Concurrent SE: element-wise sum of the channel and spatial excitations.
pub struct ScseBlock {
    pub cse: CseBlock,
    pub sse: SseBlock,
}

impl ScseBlock {
    pub fn new<F: Real>(
        name: &str,
        channels: usize,
        reduction: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            cse: CseBlock::new(&format!("{name}.cse"), channels, reduction, store, rng),
            sse: SseBlock::new(&format!("{name}.sse"), channels, store, rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let c = self.cse.forward(g, pv, x);
        let s = self.sse.forward(g, pv, x);
        g.add(c, s)
    }

    /// Parameters of one SCSE block at `channels` wide.
    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let squeezed = channels / reduction;
        // cse: two dense layers with bias; sse: 1x1 conv to one channel
        channels * squeezed + squeezed + squeezed * channels + channels + channels + 1
    }
}

struct BasicBlock {
    conv1: Conv2dLayer,
    norm1: ChannelNormLayer,
    conv2: Conv2dLayer,
    norm2: ChannelNormLayer,
    scse: Option<ScseBlock>,
    proj: Option<(Conv2dLayer, ChannelNormLayer)>,
}

impl BasicBlock {
    fn new<F: Real>(
        name: &str,
        ci: usize,
        co: usize,
        scse: bool,
        reduction: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv2dLayer::new(&format!("{name}.conv1"), ci, co, 3, store, rng),
            norm1: ChannelNormLayer::new(&format!("{name}.norm1"), co, store),
            conv2: Conv2dLayer::new(&format!("{name}.conv2"), co, co, 3, store, rng),
            norm2: ChannelNormLayer::new(&format!("{name}.norm2"), co, store),
            scse: scse.then(|| {
                ScseBlock::new(&format!("{name}.scse"), co, reduction, store, rng)
            }),
            proj: (ci != co).then(|| {
                (
                    Conv2dLayer::new(&format!("{name}.proj"), ci, co, 1, store, rng),
                    ChannelNormLayer::new(&format!("{name}.proj_norm"), co, store),
                )
            }),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let h = self.conv1.forward(g, pv, x);
        let h = self.norm1.forward(g, pv, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, pv, h);
        let mut h = self.norm2.forward(g, pv, h);
        if let Some(scse) = &self.scse {
            h = scse.forward(g, pv, h);
        }
        let skip = match &self.proj {
            Some((conv, norm)) => {
                let p = conv.forward(g, pv, x);
                norm.forward(g, pv, p)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

struct FeedForward {
    ln: LayerNormLayer,
    up: LinearLayer,
    down: LinearLayer,
}

impl FeedForward {
    fn new<F: Real>(
        name: &str,
        d: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln: LayerNormLayer::new(&format!("{name}.ln"), d, store),
            up: LinearLayer::new(&format!("{name}.up"), d, 4 * d, store, rng),
            down: LinearLayer::new(&format!("{name}.down"), 4 * d, d, store, rng),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let h = self.ln.forward(g, pv, x);
        let h = self.up.forward(g, pv, h);
        let h = g.swish(h);
        self.down.forward(g, pv, h)
    }
}

struct SelfAttention {
    ln: LayerNormLayer,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    pos_w: ParamId,
    pos_bias_u: ParamId,
    pos_bias_v: ParamId,
    heads: usize,
    d_model: usize,
}

impl SelfAttention {
    fn new<F: Real>(
        name: &str,
        d: usize,
        heads: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dk = d / heads;
        Self {
            ln: LayerNormLayer::new(&format!("{name}.ln"), d, store),
            wq: LinearLayer::new(&format!("{name}.wq"), d, d, store, rng),
            wk: LinearLayer::new(&format!("{name}.wk"), d, d, store, rng),
            wv: LinearLayer::new(&format!("{name}.wv"), d, d, store, rng),
            wo: LinearLayer::new(&format!("{name}.wo"), d, d, store, rng),
            pos_w: store.add(
                format!("{name}.pos_w"),
                params::kaiming_uniform(&[d, d], d, rng),
            ),
            pos_bias_u: store.add(format!("{name}.pos_bias_u"), params::zeros(&[heads, dk])),
            pos_bias_v: store.add(format!("{name}.pos_bias_v"), params::zeros(&[heads, dk])),
            heads,
            d_model: d,
        }
    }

    /// Multi-head attention with transformer-XL style relative positions:
    /// scores = ((Q+u) K^T + rel_shift((Q+v) P^T)) / sqrt(d_k).
    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var, pos: Var) -> Var {
        let dk = self.d_model / self.heads;
        let y = self.ln.forward(g, pv, x);
        let q = self.wq.forward(g, pv, y);
        let k = self.wk.forward(g, pv, y);
        let v = self.wv.forward(g, pv, y);
        let p = g.matmul(pos, pv[self.pos_w.0]);

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_axis(q, 1, h * dk, dk);
            let kh = g.slice_axis(k, 1, h * dk, dk);
            let vh = g.slice_axis(v, 1, h * dk, dk);
            let ph = g.slice_axis(p, 1, h * dk, dk);
            let uh = g.slice_axis(pv[self.pos_bias_u.0], 0, h, 1);
            let uh = g.reshape(uh, &[dk]);
            let vhb = g.slice_axis(pv[self.pos_bias_v.0], 0, h, 1);
            let vhb = g.reshape(vhb, &[dk]);

            let qu = g.add_row_bias(qh, uh);
            let kt = g.permute(kh, &[1, 0]);
            let ac = g.matmul(qu, kt);

            let qv = g.add_row_bias(qh, vhb);
            let pt = g.permute(ph, &[1, 0]);
            let bd_raw = g.matmul(qv, pt);
            let bd = g.rel_shift(bd_raw);

            let scores = g.add(ac, bd);
            let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
            let attn = g.softmax_last(scores);
            head_outs.push(g.matmul(attn, vh));
        }
        let merged = g.concat(&head_outs, 1);
        self.wo.forward(g, pv, merged)
    }
}

struct ConvModule {
    ln: LayerNormLayer,
    pw1: LinearLayer,
    dw_w: ParamId,
    dw_b: ParamId,
    dw_norm: LayerNormLayer,
    pw2: LinearLayer,
}

impl ConvModule {
    fn new<F: Real>(
        name: &str,
        d: usize,
        kernel: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln: LayerNormLayer::new(&format!("{name}.ln"), d, store),
            pw1: LinearLayer::new(&format!("{name}.pw1"), d, 2 * d, store, rng),
            dw_w: store.add(
                format!("{name}.dw.w"),
                params::kaiming_uniform(&[d, kernel], kernel, rng),
            ),
            dw_b: store.add(format!("{name}.dw.b"), params::zeros(&[d])),
            dw_norm: LayerNormLayer::new(&format!("{name}.dw_norm"), d, store),
            pw2: LinearLayer::new(&format!("{name}.pw2"), d, d, store, rng),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let d = g.value(x).shape()[1];
        let h = self.ln.forward(g, pv, x);
        let h = self.pw1.forward(g, pv, h);
        // gated linear unit
        let a = g.slice_axis(h, 1, 0, d);
        let b = g.slice_axis(h, 1, d, d);
        let b = g.sigmoid(b);
        let h = g.mul(a, b);
        let h = g.depthwise_conv1d(h, pv[self.dw_w.0], pv[self.dw_b.0]);
        let h = self.dw_norm.forward(g, pv, h);
        let h = g.swish(h);
        self.pw2.forward(g, pv, h)
    }
}

struct ConformerLayer {
    ffn1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_ln: LayerNormLayer,
}

impl ConformerLayer {
    fn new<F: Real>(
        name: &str,
        d: usize,
        heads: usize,
        kernel: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ffn1: FeedForward::new(&format!("{name}.ffn1"), d, store, rng),
            attn: SelfAttention::new(&format!("{name}.attn"), d, heads, store, rng),
            conv: ConvModule::new(&format!("{name}.conv"), d, kernel, store, rng),
            ffn2: FeedForward::new(&format!("{name}.ffn2"), d, store, rng),
            final_ln: LayerNormLayer::new(&format!("{name}.final_ln"), d, store),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var, pos: Var) -> Var {
        let f1 = self.ffn1.forward(g, pv, x);
        let f1 = g.scale(f1, 0.5);
        let x = g.add(x, f1);
        let a = self.attn.forward(g, pv, x, pos);
        let x = g.add(x, a);
        let c = self.conv.forward(g, pv, x);
        let x = g.add(x, c);
        let f2 = self.ffn2.forward(g, pv, x);
        let f2 = g.scale(f2, 0.5);
        let x = g.add(x, f2);
        self.final_ln.forward(g, pv, x)
    }
}

struct Stem {
    conv: Conv2dLayer,
    norm: ChannelNormLayer,
    sse: Option<SseBlock>,
}

/// The full model. Construction registers every parameter in a
/// [`ParamStore`]; the forward pass runs on a [`Graph`] so the same code
/// serves training (with gradients) and inference.
pub struct SeldModel {
    pub cfg: ModelConfig,
    stem: Stem,
    stages: Vec<Vec<BasicBlock>>,
    tail_scse: Option<ScseBlock>,
    input_proj_ln: LayerNormLayer,
    input_proj: LinearLayer,
    conformers: Vec<ConformerLayer>,
    head: LinearLayer,
    rel_pos: Array2<f64>,
}

impl SeldModel {
    pub fn new<F: Real>(
        cfg: ModelConfig,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3, c4] = cfg.stage_channels;

        let stem = Stem {
            conv: Conv2dLayer::new("stem.conv", cfg.in_channels, c1, 3, store, &mut rng),
            norm: ChannelNormLayer::new("stem.norm", c1, store),
            sse: cfg
                .variant
                .stem_sse()
                .then(|| SseBlock::new("stem.sse", c1, store, &mut rng)),
        };

        let mut stages = Vec::with_capacity(4);
        let mut ci = c1;
        for (s, &co) in [c1, c2, c3, c4].iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage[s] {
                let name = format!("stage{}.block{}", s + 1, b);
                blocks.push(BasicBlock::new(
                    &name,
                    if b == 0 { ci } else { co },
                    co,
                    cfg.variant.block_scse(),
                    cfg.se_reduction,
                    store,
                    &mut rng,
                ));
            }
            stages.push(blocks);
            ci = co;
        }

        let tail_scse = cfg
            .variant
            .tail_scse()
            .then(|| ScseBlock::new("tail.scse", c4, cfg.se_reduction, store, &mut rng));

        let input_proj_ln = LayerNormLayer::new("proj.ln", c4, store);
        let input_proj = LinearLayer::new("proj.linear", c4, cfg.d_model, store, &mut rng);
        let conformers = (0..cfg.conformer_layers)
            .map(|l| {
                ConformerLayer::new(
                    &format!("conformer{l}"),
                    cfg.d_model,
                    cfg.attention_heads,
                    cfg.conv_kernel,
                    store,
                    &mut rng,
                )
            })
            .collect();
        // small head init keeps the tanh outputs near zero at the start,
        // which matches the mostly-inactive targets
        let head = LinearLayer::new_scaled(
            "head",
            cfg.d_model,
            cfg.tracks * cfg.classes * 4,
            0.1,
            store,
            &mut rng,
        );
        let rel_pos = sinusoidal_relative_positions(cfg.time_frames, cfg.d_model);
        Ok(Self {
            cfg,
            stem,
            stages,
            tail_scse,
            input_proj_ln,
            input_proj,
            conformers,
            head,
            rel_pos,
        })
    }

    /// Encoder only: `[in_channels, T, F] -> [C4, T, 1]`.
    pub fn encoder_forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let h = self.stem.conv.forward(g, pv, x);
        let h = self.stem.norm.forward(g, pv, h);
        let mut h = g.relu(h);
        if let Some(sse) = &self.stem.sse {
            h = sse.forward(g, pv, h);
        }
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(g, pv, h);
            }
            h = g.pool_avg_max(h, 2, 2);
        }
        if let Some(scse) = &self.tail_scse {
            h = scse.forward(g, pv, h);
        }
        let remaining = g.value(h).shape()[2];
        g.pool_avg_max(h, 2, remaining)
    }

    /// Full forward: `[in_channels, T, F]` features to
    /// `[T/pool, tracks, classes, 4]` with a tanh head.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, pv: &[Var], features: Var) -> Var {
        let cfg = &self.cfg;
        let enc = self.encoder_forward(g, pv, features);
        let c4 = cfg.stage_channels[3];
        let seq = g.reshape(enc, &[c4, cfg.time_frames]);
        let seq = g.permute(seq, &[1, 0]);
        let seq = self.input_proj_ln.forward(g, pv, seq);
        let mut seq = self.input_proj.forward(g, pv, seq);

        let pos = g.leaf(
            self.rel_pos.mapv(|v| F::from_f64(v)).into_dyn(),
            false,
        );
        for layer in &self.conformers {
            seq = layer.forward(g, pv, seq, pos);
        }
        let pooled = g.pool_avg_max(seq, 0, cfg.time_pool_factor);
        let logits = self.head.forward(g, pv, pooled);
        let out = g.tanh(logits);
        g.reshape(out, &[cfg.output_frames(), cfg.tracks, cfg.classes, 4])
    }

    /// Convenience inference entry point: runs the forward pass without
    /// gradient tracking and returns the output tensor in `f64`.
    pub fn infer<F: Real>(
        &self,
        store: &ParamStore<F>,
        features: &ndarray::Array3<f32>,
    ) -> Array4<f64> {
        let mut g = Graph::<F>::new();
        let pv = store.leaves(&mut g, false);
        let x = g.leaf(
            ArrayD::from_shape_vec(
                IxDyn(features.shape()),
                features.iter().map(|v| F::from_f64(*v as f64)).collect(),
            )
            .unwrap(),
            false,
        );
        let out = self.forward(&mut g, &pv, x);
        let v = g.value(out);
        Array4::from_shape_vec(
            (
                self.cfg.output_frames(),
                self.cfg.tracks,
                self.cfg.classes,
                4,
            ),
            v.iter().map(|x| Real::to_f64(*x)).collect(),
        )
        .unwrap()
    }
}

/// Sinusoidal embeddings for relative offsets T-1 .. -(T-1), shape
/// `[2T-1, d]`; row r encodes offset `(T-1) - r`.
fn sinusoidal_relative_positions(t: usize, d: usize) -> Array2<f64> {
    let len = 2 * t - 1;
    let mut pe = Array2::zeros((len, d));
    for r in 0..len {
        let rel = (t as f64 - 1.0) - r as f64;
        for i in 0..d / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[r, 2 * i]] = (rel * omega).sin();
            pe[[r, 2 * i + 1]] = (rel * omega).cos();
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            stage_channels: [8, 8, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            conformer_layers: 1,
            d_model: 16,
            attention_heads: 4,
            conv_kernel: 5,
            classes: 2,
            time_frames: 32,
            freq_bins: 32,
            variant,
            ..ModelConfig::default()
        }
    }

    fn random_features(cfg: &ModelConfig, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((cfg.in_channels, cfg.time_frames, cfg.freq_bins), || {
            rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn output_shape_and_tanh_range() {
        let cfg = small_cfg(Variant::A);
        let mut store = ParamStore::<f32>::new();
        let model = SeldModel::new(cfg.clone(), &mut store, 1).unwrap();
        let out = model.infer(&store, &random_features(&cfg, 2));
        assert_eq!(out.dim(), (4, 3, 2, 4));
        assert!(out.iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn encoder_preserves_time_axis() {
        let cfg = small_cfg(Variant::B);
        let mut store = ParamStore::<f32>::new();
        let model = SeldModel::new(cfg.clone(), &mut store, 3).unwrap();
        let mut g = Graph::<f32>::new();
        let pv = store.leaves(&mut g, false);
        let feats = random_features(&cfg, 4);
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(feats.shape()), feats.iter().map(|v| *v).collect())
                .unwrap(),
            false,
        );
        let enc = model.encoder_forward(&mut g, &pv, x);
        assert_eq!(g.value(enc).shape(), &[8, 32, 1]);
    }

    #[test]
    fn variant_parameter_count_deltas() {
        let counts: Vec<usize> = [Variant::A, Variant::B, Variant::C, Variant::D]
            .iter()
            .map(|v| {
                let mut store = ParamStore::<f32>::new();
                SeldModel::new(small_cfg(*v), &mut store, 1).unwrap();
                store.total_scalars()
            })
            .collect();
        let (a, b, c, d) = (counts[0], counts[1], counts[2], counts[3]);
        let scse = ScseBlock::param_count(8, 4);
        // B = A minus the tail SCSE
        assert_eq!(a - b, scse);
        // C = A minus the four per-block SCSE blocks (all stages 8 wide here)
        assert_eq!(a - c, 4 * scse);
        // D removes stem sSE as well and is strictly smallest
        assert!(d < c && d < b && d < a);
        let sse = 8 + 1;
        assert_eq!(c - d, scse + sse);
    }

    #[test]
    fn module_presence_matches_variant() {
        for (variant, stem, block, tail) in [
            (Variant::A, true, true, true),
            (Variant::B, true, true, false),
            (Variant::C, true, false, true),
            (Variant::D, false, false, false),
        ] {
            let mut store = ParamStore::<f32>::new();
            let model = SeldModel::new(small_cfg(variant), &mut store, 1).unwrap();
            assert_eq!(model.stem.sse.is_some(), stem, "{variant:?} stem");
            assert_eq!(model.stages[0][0].scse.is_some(), block, "{variant:?} block");
            assert_eq!(model.tail_scse.is_some(), tail, "{variant:?} tail");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg(Variant::A);
        let mut store = ParamStore::<f32>::new();
        let model = SeldModel::new(cfg.clone(), &mut store, 7).unwrap();
        let feats = random_features(&cfg, 8);
        let a = model.infer(&store, &feats);
        let b = model.infer(&store, &feats);
        assert_eq!(a, b);
    }

    #[test]
    fn amplitude_changes_output() {
        let cfg = small_cfg(Variant::D);
        let mut store = ParamStore::<f32>::new();
        let model = SeldModel::new(cfg.clone(), &mut store, 9).unwrap();
        let feats = random_features(&cfg, 10);
        let doubled = feats.mapv(|v| v * 2.0);
        let a = model.infer(&store, &feats);
        let b = model.infer(&store, &doubled);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn cse_gate_saturation_and_zero_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cse = CseBlock::new("cse", 8, 4, &mut store, &mut rng);
        // large positive bias on the second layer saturates the gate at 1
        store.get_mut(cse.fc2.b).fill(30.0);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[8, 5, 6]), || rng.random_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let xv = g.leaf(x.clone(), false);
        let y = cse.forward(&mut g, &pv, xv);
        for (a, b) in g.value(y).iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // zero input stays zero regardless of weights
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let zero = g.leaf(ArrayD::zeros(IxDyn(&[8, 5, 6])), false);
        let y = cse.forward(&mut g, &pv, zero);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cse_gate_shrinks_magnitudes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cse = CseBlock::new("cse", 4, 4, &mut store, &mut rng);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[4, 3, 3]), || rng.random_range(-2.0..2.0));
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let xv = g.leaf(x.clone(), false);
        let y = cse.forward(&mut g, &pv, xv);
        for (out, inp) in g.value(y).iter().zip(x.iter()) {
            assert!(out.abs() <= inp.abs() + 1e-12);
        }
    }

    #[test]
    fn sse_identity_when_saturated_and_locality() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sse = SseBlock::new("sse", 4, &mut store, &mut rng);
        store.get_mut(sse.conv.w).fill(0.0);
        store.get_mut(sse.conv.b).fill(30.0);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[4, 3, 3]), || rng.random_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let xv = g.leaf(x.clone(), false);
        let y = sse.forward(&mut g, &pv, xv);
        for (a, b) in g.value(y).iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-9);
        }

        // single nonzero bin stays the only nonzero bin (1x1 conv locality)
        let mut rng2 = ChaCha8Rng::seed_from_u64(14);
        let sse2 = {
            let mut s2 = ParamStore::<f64>::new();
            let b = SseBlock::new("sse", 2, &mut s2, &mut rng2);
            (s2, b)
        };
        let (store2, sse2) = sse2;
        let mut x = ArrayD::zeros(IxDyn(&[2, 4, 4]));
        x[[1, 2, 3]] = 0.7;
        let mut g = Graph::<f64>::new();
        let pv = store2.leaves(&mut g, false);
        let xv = g.leaf(x, false);
        let y = sse2.forward(&mut g, &pv, xv);
        let out = g.value(y);
        for c in 0..2 {
            for t in 0..4 {
                for f in 0..4 {
                    if (c, t, f) != (1, 2, 3) {
                        assert_eq!(out[[c, t, f]], 0.0);
                    }
                }
            }
        }
        assert!(out[[1, 2, 3]] != 0.0);
    }

    #[test]
    fn scse_is_sum_of_parts() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let scse = ScseBlock::new("scse", 4, 4, &mut store, &mut rng);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[4, 5, 5]), || rng.random_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let xv = g.leaf(x.clone(), false);
        let combined = scse.forward(&mut g, &pv, xv);
        let c = scse.cse.forward(&mut g, &pv, xv);
        let s = scse.sse.forward(&mut g, &pv, xv);
        let manual = g.add(c, s);
        assert_eq!(g.value(combined), g.value(manual));

        // zero in, zero out
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let zero = g.leaf(ArrayD::zeros(IxDyn(&[4, 5, 5])), false);
        let y = scse.forward(&mut g, &pv, zero);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conformer_residual_identity_with_zero_branches() {
        // zeroing every branch output projection turns each sublayer into
        // the identity, so the block reduces to its final layer norm
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layer = ConformerLayer::new("c", 8, 2, 3, &mut store, &mut rng);
        for id in [
            layer.ffn1.down.w,
            layer.ffn1.down.b,
            layer.attn.wo.w,
            layer.attn.wo.b,
            layer.conv.pw2.w,
            layer.conv.pw2.b,
            layer.ffn2.down.w,
            layer.ffn2.down.b,
        ] {
            store.get_mut(id).fill(0.0);
        }
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[6, 8]), || rng.random_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let pv = store.leaves(&mut g, false);
        let xv = g.leaf(x.clone(), true);
        let pos = g.leaf(sinusoidal_relative_positions(6, 8).into_dyn(), false);
        let y = layer.forward(&mut g, &pv, xv, pos);
        let ln = layer.final_ln.forward(&mut g, &pv, xv);
        for (a, b) in g.value(y).iter().zip(g.value(ln).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut bad = small_cfg(Variant::A);
        bad.stage_channels = [6, 8, 8, 8]; // not divisible by se_reduction 4
        assert!(bad.validate().is_err());
        let mut bad = small_cfg(Variant::A);
        bad.conv_kernel = 4;
        assert!(bad.validate().is_err());
        let mut bad = small_cfg(Variant::A);
        bad.time_frames = 33;
        assert!(bad.validate().is_err());
    }
}
