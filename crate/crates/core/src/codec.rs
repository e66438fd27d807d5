//! The trainable encoder and decoder.
//!
//! Encoder: a 1×1 lift to `encoder_width` channels, `encoder_blocks`
//! bottleneck residual units (1×1 reduce, 3×3, 1×1 expand, ReLU inside the
//! branch, additive skip), and a 1×1 projection back to three channels. The
//! output has the input's 32×32×3 shape.
//!
//! Decoder: a vision transformer over `patch_size`² patches (linear patch
//! embedding, learned positional embedding, pre-norm blocks with multi-head
//! self-attention and a GELU MLP, final layer norm) produces tokens `x₀`.
//! The reconstruction is the sum of a linear shortcut `W·x₀` folded back
//! into pixels and a convolutional denoising branch on a second linear
//! unfolding of `x₀`:
//!
//! ```text
//! x₀ = vit(x̂)
//! ŝ  = unpatchify(x₀·W) + dae(unpatchify(x₀·U + u))
//! ```
//!
//! Tensors are laid out as: images and symbols `[B, 32, 32, 3]`
//! interleaved; convolution weights `[cout, cin, k, k]`; linear weights
//! `[din, dout]`.

use serde::{Deserialize, Serialize};

use crate::dataset::{CHANNELS, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::{self, ConvShape, LayerNormCache, Scalar};
use crate::rng::SimRng;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_width: usize,
    pub encoder_bottleneck: usize,
    pub encoder_blocks: usize,
    pub dae_widths: [usize; 2],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 128,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            encoder_width: 32,
            encoder_bottleneck: 16,
            encoder_blocks: 4,
            dae_widths: [48, 96],
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "encoder_width",
    "encoder_bottleneck",
    "encoder_blocks",
    "dae_width0",
    "dae_width1",
];

impl CodecConfig {
    /// Small configuration for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 4,
            encoder_width: 8,
            encoder_bottleneck: 4,
            encoder_blocks: 4,
            dae_widths: [4, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || !SIDE.is_multiple_of(self.patch_size) {
            return bad(format!("patch_size {} does not divide {SIDE}", self.patch_size));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0
            || self.encoder_width == 0
            || self.encoder_bottleneck == 0
            || self.dae_widths.contains(&0)
        {
            return bad("widths and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        SIDE / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    fn values(&self) -> [usize; 10] {
        [
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.encoder_width,
            self.encoder_bottleneck,
            self.encoder_blocks,
            self.dae_widths[0],
            self.dae_widths[1],
        ]
    }

    /// `key=value` lines in a fixed order.
    pub fn to_canonical_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut vals = [None; 10];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("malformed line '{line}'")))?;
            let idx = CONFIG_KEYS
                .iter()
                .position(|&c| c == k.trim())
                .ok_or_else(|| Error::InvalidConfig(format!("unknown key '{k}'")))?;
            vals[idx] = Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad value for {k}: '{v}'")))?,
            );
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::InvalidConfig(format!("missing {}", CONFIG_KEYS[i])));
        let cfg = Self {
            patch_size: get(0)?,
            embed_dim: get(1)?,
            depth: get(2)?,
            heads: get(3)?,
            mlp_ratio: get(4)?,
            encoder_width: get(5)?,
            encoder_bottleneck: get(6)?,
            encoder_blocks: get(7)?,
            dae_widths: [get(8)?, get(9)?],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Init scale of the output projections relative to fan-in scaling.
const OUTPUT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform on `±gain·sqrt(3 / fan_in)`, i.e. variance `gain² / fan_in`.
    FanIn(usize, f64),
    Const(f64),
    Zeros,
    Ones,
    Normal(f64),
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvParam {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
}

impl ConvParam {
    fn shape(&self, h: usize, w: usize) -> ConvShape {
        ConvShape {
            cin: self.cin,
            cout: self.cout,
            k: self.k,
            stride: self.stride,
            h,
            w,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LinParam {
    w: usize,
    b: Option<usize>,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone, Copy)]
struct LnParam {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncBlock {
    reduce: ConvParam,
    spatial: ConvParam,
    expand: ConvParam,
}

#[derive(Debug, Clone, Copy)]
struct VitLayer {
    ln1: LnParam,
    qkv: LinParam,
    proj: LinParam,
    ln2: LnParam,
    fc1: LinParam,
    fc2: LinParam,
}

struct Layout {
    specs: Vec<(ParamSpec, Init)>,
    lift: ConvParam,
    blocks: Vec<EncBlock>,
    enc_proj: ConvParam,
    embed: LinParam,
    pos: usize,
    layers: Vec<VitLayer>,
    norm: LnParam,
    shortcut: LinParam,
    unpatch: LinParam,
    dae: [ConvParam; 5],
}

#[derive(Default)]
struct Builder {
    specs: Vec<(ParamSpec, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((ParamSpec { name, shape }, init));
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvParam {
        let w = self.add(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::FanIn(cin * k * k, 1.0));
        let b = self.add(format!("{prefix}.bias"), vec![cout], Init::Zeros);
        ConvParam {
            w,
            b,
            cin,
            cout,
            k,
            stride,
        }
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) -> LinParam {
        let w = self.add(format!("{prefix}.weight"), vec![din, dout], Init::FanIn(din, 1.0));
        let b = bias.then(|| self.add(format!("{prefix}.bias"), vec![dout], Init::Zeros));
        LinParam { w, b, din, dout }
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnParam {
        let g = self.add(format!("{prefix}.gamma"), vec![d], Init::Ones);
        let b = self.add(format!("{prefix}.beta"), vec![d], Init::Zeros);
        LnParam { g, b }
    }
}

impl Layout {
    fn new(cfg: &CodecConfig) -> Self {
        let mut bld = Builder::default();
        let (w, bn) = (cfg.encoder_width, cfg.encoder_bottleneck);
        let lift = bld.conv("encoder.lift", CHANNELS, w, 1, 1);
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| EncBlock {
                reduce: bld.conv(&format!("encoder.block{i}.reduce"), w, bn, 1, 1),
                spatial: bld.conv(&format!("encoder.block{i}.spatial"), bn, bn, 3, 1),
                expand: bld.conv(&format!("encoder.block{i}.expand"), bn, w, 1, 1),
            })
            .collect();
        let enc_proj = bld.conv("encoder.proj", w, CHANNELS, 1, 1);

        let d = cfg.embed_dim;
        let embed = bld.linear("vit.patch_embed", cfg.patch_dim(), d, true);
        let pos = bld.add("vit.pos_embed".into(), vec![cfg.tokens(), d], Init::Normal(0.02));
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("vit.layer{i}");
                VitLayer {
                    ln1: bld.ln(&format!("{p}.ln1"), d),
                    qkv: bld.linear(&format!("{p}.attn.qkv"), d, 3 * d, true),
                    proj: bld.linear(&format!("{p}.attn.proj"), d, d, true),
                    ln2: bld.ln(&format!("{p}.ln2"), d),
                    fc1: bld.linear(&format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio, true),
                    fc2: bld.linear(&format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d, true),
                }
            })
            .collect();
        let norm = bld.ln("vit.norm", d);
        let shortcut = bld.linear("shortcut", d, cfg.patch_dim(), false);

        let [w0, w1] = cfg.dae_widths;
        let unpatch = bld.linear("dae.unpatch", d, cfg.patch_dim(), true);
        let dae = [
            bld.conv("dae.conv0", CHANNELS, w0, 3, 1),
            bld.conv("dae.conv1", w0, w1, 3, 2),
            bld.conv("dae.conv2", w1, w1, 3, 1),
            bld.conv("dae.conv3", w1, w0, 3, 1),
            bld.conv("dae.conv4", w0, CHANNELS, 3, 1),
        ];
        // Start the two output maps small and centred on mid-gray so early
        // steps are spent on content rather than on the global offset.
        bld.specs[shortcut.w].1 = Init::FanIn(d, OUTPUT_GAIN);
        bld.specs[dae[4].w].1 = Init::FanIn(w0 * 9, OUTPUT_GAIN);
        bld.specs[dae[4].b].1 = Init::Const(0.5);
        Self {
            specs: bld.specs,
            lift,
            blocks,
            enc_proj,
            embed,
            pos,
            layers,
            norm,
            shortcut,
            unpatch,
            dae,
        }
    }
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_specs(cfg: &CodecConfig) -> Vec<ParamSpec> {
    Layout::new(cfg).specs.into_iter().map(|(s, _)| s).collect()
}

/// Exact number of scalar parameters.
pub fn param_count(cfg: &CodecConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// A named parameter (or gradient, or optimizer moment) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All trainable tensors of the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams<T = f32> {
    config: CodecConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> CodecParams<T> {
    /// Seeded initialization: fan-in scaled uniform weights, Gaussian
    /// positional embedding (σ = 0.02), unit norm scales, zero biases.
    pub fn init(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = SimRng::new(seed);
        let tensors = layout
            .specs
            .into_iter()
            .map(|(spec, init)| {
                let n = spec.numel();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => (0..n).map(|_| T::lit(std * rng.gaussian())).collect(),
                    Init::Const(c) => vec![T::lit(c); n],
                    Init::FanIn(fan_in, gain) => {
                        let a = gain * (3.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.uniform_range(-a, a))).collect()
                    }
                };
                Tensor {
                    name: spec.name,
                    shape: spec.shape,
                    data,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds parameters from stored tensors, checking names, shapes and
    /// finiteness against the config.
    pub fn from_tensors(config: &CodecConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} tensors", specs.len()),
                got: format!("{} tensors", tensors.len()),
            });
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.name != t.name || spec.shape != t.shape || t.data.len() != spec.numel() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} {:?}", spec.name, spec.shape),
                    got: format!("{} {:?}", t.name, t.shape),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: t.name.clone(),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> CodecParams<U> {
        CodecParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::from(*v).unwrap()).collect(),
                })
                .collect(),
        }
    }

    fn data(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }
}

/// Gradient buffers aligned with [`CodecParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(p: &CodecParams<T>) -> Self {
        Self {
            tensors: p.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
        }
    }

    fn pair(&mut self, i: usize, j: usize) -> (&mut [T], &mut [T]) {
        assert!(i < j);
        let (lo, hi) = self.tensors.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    }
}

fn conv_fwd<T: Scalar>(p: &CodecParams<T>, c: &ConvParam, x: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
    nn::conv2d_forward(x, batch, &c.shape(h, w), p.data(c.w), p.data(c.b))
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd<T: Scalar>(
    p: &CodecParams<T>,
    c: &ConvParam,
    x: &[T],
    dy: &[T],
    batch: usize,
    h: usize,
    w: usize,
    g: &mut Gradients<T>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (dw, db) = g.pair(c.w, c.b);
    nn::conv2d_backward(x, dy, batch, &c.shape(h, w), p.data(c.w), dw, db, need_dx)
}

fn lin_fwd<T: Scalar>(p: &CodecParams<T>, l: &LinParam, x: &[T]) -> Vec<T> {
    let n = x.len() / l.din;
    nn::linear_forward(x, n, l.din, p.data(l.w), l.b.map(|b| p.data(b)), l.dout)
}

fn lin_bwd<T: Scalar>(p: &CodecParams<T>, l: &LinParam, x: &[T], dy: &[T], g: &mut Gradients<T>) -> Vec<T> {
    let n = x.len() / l.din;
    match l.b {
        Some(b) => {
            let (dw, db) = g.pair(l.w, b);
            nn::linear_backward(x, dy, n, l.din, l.dout, p.data(l.w), dw, Some(db))
        }
        None => nn::linear_backward(x, dy, n, l.din, l.dout, p.data(l.w), &mut g.tensors[l.w], None),
    }
}

fn ln_fwd<T: Scalar>(p: &CodecParams<T>, l: &LnParam, x: &[T], d: usize) -> (Vec<T>, LayerNormCache<T>) {
    nn::layer_norm_forward(x, d, p.data(l.g), p.data(l.b))
}

fn ln_bwd<T: Scalar>(
    p: &CodecParams<T>,
    l: &LnParam,
    cache: &LayerNormCache<T>,
    dy: &[T],
    d: usize,
    g: &mut Gradients<T>,
) -> Vec<T> {
    let (dg, db) = g.pair(l.g, l.b);
    nn::layer_norm_backward(cache, dy, d, p.data(l.g), dg, db)
}

/// `[B, H, W, C]` → `[B, C, H, W]`.
pub fn hwc_to_chw<T: Copy>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for ch in 0..c {
            out.extend(img.iter().skip(ch).step_by(c).copied());
        }
    }
    out
}

/// `[B, C, H, W]` → `[B, H, W, C]`.
pub fn chw_to_hwc<T: Copy + Default>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    let n = h * w * c;
    for b in 0..batch {
        for ch in 0..c {
            for i in 0..h * w {
                out[b * n + i * c + ch] = x[b * n + ch * h * w + i];
            }
        }
    }
    out
}

/// `[B, 32, 32, 3]` → `[B·tokens, p·p·3]`, tokens in row-major patch order,
/// each patch vector in row-major pixel order with channels innermost.
pub fn patchify<T: Copy + Default>(x: &[T], batch: usize, p: usize) -> Vec<T> {
    let g = SIDE / p;
    let pd = p * p * CHANNELS;
    let mut out = vec![T::default(); x.len()];
    for b in 0..batch {
        for ty in 0..g {
            for tx in 0..g {
                let tok = (b * g * g + ty * g + tx) * pd;
                for dy in 0..p {
                    let src = b * PIXELS + ((ty * p + dy) * SIDE + tx * p) * CHANNELS;
                    let dst = tok + dy * p * CHANNELS;
                    out[dst..dst + p * CHANNELS].copy_from_slice(&x[src..src + p * CHANNELS]);
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Copy + Default>(tokens: &[T], batch: usize, p: usize) -> Vec<T> {
    let g = SIDE / p;
    let pd = p * p * CHANNELS;
    let mut out = vec![T::default(); tokens.len()];
    for b in 0..batch {
        for ty in 0..g {
            for tx in 0..g {
                let tok = (b * g * g + ty * g + tx) * pd;
                for dy in 0..p {
                    let dst = b * PIXELS + ((ty * p + dy) * SIDE + tx * p) * CHANNELS;
                    let src = tok + dy * p * CHANNELS;
                    out[dst..dst + p * CHANNELS].copy_from_slice(&tokens[src..src + p * CHANNELS]);
                }
            }
        }
    }
    out
}

fn check_batch<T>(x: &[T], batch: usize) -> Result<()> {
    if batch == 0 || x.len() != batch * PIXELS {
        return Err(Error::ShapeMismatch {
            expected: format!("{batch}x32x32x3 = {} values", batch * PIXELS),
            got: format!("{} values", x.len()),
        });
    }
    Ok(())
}

struct EncBlockTape<T> {
    input: Vec<T>,
    reduced: Vec<T>,
    spatial: Vec<T>,
}

/// Activations saved by [`encode_forward`].
pub struct EncoderTape<T> {
    batch: usize,
    input: Vec<T>,
    blocks: Vec<EncBlockTape<T>>,
    last: Vec<T>,
}

impl<T: Scalar> EncoderTape<T> {
    /// Sign pattern of every ReLU output.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.reduced.iter().chain(&b.spatial))
            .map(|&v| v > T::zero())
            .collect()
    }
}

/// Encoder forward pass keeping what the backward pass needs.
pub fn encode_forward<T: Scalar>(p: &CodecParams<T>, images: &[T], batch: usize) -> Result<(Vec<T>, EncoderTape<T>)> {
    check_batch(images, batch)?;
    let layout = Layout::new(&p.config);
    let (h, w) = (SIDE, SIDE);
    let input = hwc_to_chw(images, batch, h, w, CHANNELS);
    let mut a = conv_fwd(p, &layout.lift, &input, batch, h, w);
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for blk in &layout.blocks {
        let mut reduced = conv_fwd(p, &blk.reduce, &a, batch, h, w);
        nn::relu_inplace(&mut reduced);
        let mut spatial = conv_fwd(p, &blk.spatial, &reduced, batch, h, w);
        nn::relu_inplace(&mut spatial);
        let expanded = conv_fwd(p, &blk.expand, &spatial, batch, h, w);
        let next: Vec<T> = a.iter().zip(&expanded).map(|(&x, &e)| x + e).collect();
        blocks.push(EncBlockTape {
            input: std::mem::replace(&mut a, next),
            reduced,
            spatial,
        });
    }
    let out = conv_fwd(p, &layout.enc_proj, &a, batch, h, w);
    let symbols = chw_to_hwc(&out, batch, h, w, CHANNELS);
    Ok((
        symbols,
        EncoderTape {
            batch,
            input,
            blocks,
            last: a,
        },
    ))
}

/// Accumulates encoder parameter gradients from `d_symbols`.
pub fn encode_backward<T: Scalar>(p: &CodecParams<T>, tape: &EncoderTape<T>, d_symbols: &[T], grads: &mut Gradients<T>) {
    let layout = Layout::new(&p.config);
    let (batch, h, w) = (tape.batch, SIDE, SIDE);
    let d_out = hwc_to_chw(d_symbols, batch, h, w, CHANNELS);
    let mut da = conv_bwd(p, &layout.enc_proj, &tape.last, &d_out, batch, h, w, grads, true).unwrap();
    for (blk, bt) in layout.blocks.iter().zip(&tape.blocks).rev() {
        let mut dm = conv_bwd(p, &blk.expand, &bt.spatial, &da, batch, h, w, grads, true).unwrap();
        nn::relu_backward_inplace(&bt.spatial, &mut dm);
        let mut dr = conv_bwd(p, &blk.spatial, &bt.reduced, &dm, batch, h, w, grads, true).unwrap();
        nn::relu_backward_inplace(&bt.reduced, &mut dr);
        let dskip = conv_bwd(p, &blk.reduce, &bt.input, &dr, batch, h, w, grads, true).unwrap();
        da.iter_mut().zip(&dskip).for_each(|(a, &s)| *a = *a + s);
    }
    conv_bwd(p, &layout.lift, &tape.input, &da, batch, h, w, grads, false);
}

/// `x = F_encode(s)` for a batch of `[32, 32, 3]` images.
pub fn encode<T: Scalar>(p: &CodecParams<T>, images: &[T], batch: usize) -> Result<Vec<T>> {
    Ok(encode_forward(p, images, batch)?.0)
}

struct LayerTape<T> {
    ln1: LayerNormCache<T>,
    normed1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LayerNormCache<T>,
    normed2: Vec<T>,
    hidden: Vec<T>,
    act: Vec<T>,
}

/// Activations saved by [`decode_forward`].
pub struct DecoderTape<T> {
    batch: usize,
    patches: Vec<T>,
    layers: Vec<LayerTape<T>>,
    norm: LayerNormCache<T>,
    tokens: Vec<T>,
    dae_in: Vec<T>,
    c1: Vec<T>,
    c2: Vec<T>,
    c3: Vec<T>,
    up: Vec<T>,
    c4: Vec<T>,
}

impl<T: Scalar> DecoderTape<T> {
    /// Transformer output `x₀`, `[B·tokens, embed_dim]`.
    pub fn tokens(&self) -> &[T] {
        &self.tokens
    }

    /// Attention probabilities of layer `i`, `[B, heads, tokens, tokens]`.
    pub fn attention(&self, layer: usize) -> &[T] {
        &self.layers[layer].probs
    }

    /// Sign pattern of every ReLU output in the denoising branch.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.c1
            .iter()
            .chain(&self.c2)
            .chain(&self.c3)
            .chain(&self.c4)
            .map(|&v| v > T::zero())
            .collect()
    }
}

/// Decoder forward pass keeping what the backward pass needs. The output is
/// not clamped.
pub fn decode_forward<T: Scalar>(p: &CodecParams<T>, x_hat: &[T], batch: usize) -> Result<(Vec<T>, DecoderTape<T>)> {
    decode_pass(p, x_hat, batch, true)
}

/// With `keep` unset the per-layer activations are dropped as soon as they
/// are used and the returned tape has no layers.
fn decode_pass<T: Scalar>(p: &CodecParams<T>, x_hat: &[T], batch: usize, keep: bool) -> Result<(Vec<T>, DecoderTape<T>)> {
    check_batch(x_hat, batch)?;
    let cfg = &p.config;
    let layout = Layout::new(cfg);
    let (d, ps, ntok) = (cfg.embed_dim, cfg.patch_size, cfg.tokens());

    let patches = patchify(x_hat, batch, ps);
    let mut z = lin_fwd(p, &layout.embed, &patches);
    let pos = p.data(layout.pos);
    for row in z.chunks_exact_mut(ntok * d) {
        row.iter_mut().zip(pos).for_each(|(v, &q)| *v = *v + q);
    }

    let mut layers = Vec::with_capacity(layout.layers.len());
    for l in &layout.layers {
        let (normed1, ln1) = ln_fwd(p, &l.ln1, &z, d);
        let qkv = lin_fwd(p, &l.qkv, &normed1);
        let (attn, probs) = nn::attention_forward(&qkv, batch, ntok, d, cfg.heads);
        let o = lin_fwd(p, &l.proj, &attn);
        let mid: Vec<T> = z.iter().zip(&o).map(|(&a, &b)| a + b).collect();
        let (normed2, ln2) = ln_fwd(p, &l.ln2, &mid, d);
        let hidden = lin_fwd(p, &l.fc1, &normed2);
        let act = nn::gelu_forward(&hidden);
        let m = lin_fwd(p, &l.fc2, &act);
        let next: Vec<T> = mid.iter().zip(&m).map(|(&a, &b)| a + b).collect();
        z = next;
        if !keep {
            continue;
        }
        layers.push(LayerTape {
            ln1,
            normed1,
            qkv,
            probs,
            attn,
            ln2,
            normed2,
            hidden,
            act,
        });
    }
    let (tokens, norm) = ln_fwd(p, &layout.norm, &z, d);

    let short = unpatchify(&lin_fwd(p, &layout.shortcut, &tokens), batch, ps);

    let (h, w) = (SIDE, SIDE);
    let dae_in = hwc_to_chw(&unpatchify(&lin_fwd(p, &layout.unpatch, &tokens), batch, ps), batch, h, w, CHANNELS);
    let [k0, k1, k2, k3, k4] = &layout.dae;
    let mut c1 = conv_fwd(p, k0, &dae_in, batch, h, w);
    nn::relu_inplace(&mut c1);
    let mut c2 = conv_fwd(p, k1, &c1, batch, h, w);
    nn::relu_inplace(&mut c2);
    let (hh, hw) = (k1.shape(h, w).out_h(), k1.shape(h, w).out_w());
    let mut c3 = conv_fwd(p, k2, &c2, batch, hh, hw);
    nn::relu_inplace(&mut c3);
    let up = nn::upsample2x_forward(&c3, batch * k2.cout, hh, hw);
    let (uh, uw) = (2 * hh, 2 * hw);
    let mut c4 = conv_fwd(p, k3, &up, batch, uh, uw);
    nn::relu_inplace(&mut c4);
    let c5 = conv_fwd(p, k4, &c4, batch, uh, uw);
    let dae_out = chw_to_hwc(&c5, batch, uh, uw, CHANNELS);

    let out = short.iter().zip(&dae_out).map(|(&a, &b)| a + b).collect();
    Ok((
        out,
        DecoderTape {
            batch,
            patches,
            layers,
            norm,
            tokens,
            dae_in,
            c1,
            c2,
            c3,
            up,
            c4,
        },
    ))
}

/// Accumulates decoder parameter gradients and returns `∂L/∂x̂`.
pub fn decode_backward<T: Scalar>(p: &CodecParams<T>, tape: &DecoderTape<T>, d_out: &[T], grads: &mut Gradients<T>) -> Vec<T> {
    let cfg = &p.config;
    let layout = Layout::new(cfg);
    let (d, ps, ntok, batch) = (cfg.embed_dim, cfg.patch_size, cfg.tokens(), tape.batch);
    let (h, w) = (SIDE, SIDE);
    let [k0, k1, k2, k3, k4] = &layout.dae;
    let (hh, hw) = (k1.shape(h, w).out_h(), k1.shape(h, w).out_w());
    let (uh, uw) = (2 * hh, 2 * hw);

    let d5 = hwc_to_chw(d_out, batch, uh, uw, CHANNELS);
    let mut d4 = conv_bwd(p, k4, &tape.c4, &d5, batch, uh, uw, grads, true).unwrap();
    nn::relu_backward_inplace(&tape.c4, &mut d4);
    let dup = conv_bwd(p, k3, &tape.up, &d4, batch, uh, uw, grads, true).unwrap();
    let mut d3 = nn::upsample2x_backward(&dup, batch * k2.cout, hh, hw);
    nn::relu_backward_inplace(&tape.c3, &mut d3);
    let mut d2 = conv_bwd(p, k2, &tape.c2, &d3, batch, hh, hw, grads, true).unwrap();
    nn::relu_backward_inplace(&tape.c2, &mut d2);
    let mut d1 = conv_bwd(p, k1, &tape.c1, &d2, batch, h, w, grads, true).unwrap();
    nn::relu_backward_inplace(&tape.c1, &mut d1);
    let d_dae_in = conv_bwd(p, k0, &tape.dae_in, &d1, batch, h, w, grads, true).unwrap();
    let d_unpatch = patchify(&chw_to_hwc(&d_dae_in, batch, h, w, CHANNELS), batch, ps);
    let mut d_tokens = lin_bwd(p, &layout.unpatch, &tape.tokens, &d_unpatch, grads);

    let d_short = patchify(d_out, batch, ps);
    let d_tok2 = lin_bwd(p, &layout.shortcut, &tape.tokens, &d_short, grads);
    d_tokens.iter_mut().zip(&d_tok2).for_each(|(a, &b)| *a = *a + b);

    let mut dz = ln_bwd(p, &layout.norm, &tape.norm, &d_tokens, d, grads);
    for (l, lt) in layout.layers.iter().zip(&tape.layers).rev() {
        // z_out = mid + fc2(gelu(fc1(ln2(mid))))
        let d_act = lin_bwd(p, &l.fc2, &lt.act, &dz, grads);
        let d_hidden = nn::gelu_backward(&lt.hidden, &d_act);
        let d_norm2 = lin_bwd(p, &l.fc1, &lt.normed2, &d_hidden, grads);
        let d_mid_ln = ln_bwd(p, &l.ln2, &lt.ln2, &d_norm2, d, grads);
        let d_mid: Vec<T> = dz.iter().zip(&d_mid_ln).map(|(&a, &b)| a + b).collect();
        // mid = z_in + proj(attn(qkv(ln1(z_in))))
        let d_attn = lin_bwd(p, &l.proj, &lt.attn, &d_mid, grads);
        let d_qkv = nn::attention_backward(&lt.qkv, &lt.probs, &d_attn, batch, ntok, d, cfg.heads);
        let d_norm1 = lin_bwd(p, &l.qkv, &lt.normed1, &d_qkv, grads);
        let d_in_ln = ln_bwd(p, &l.ln1, &lt.ln1, &d_norm1, d, grads);
        dz = d_mid.iter().zip(&d_in_ln).map(|(&a, &b)| a + b).collect();
    }

    let dpos = &mut grads.tensors[layout.pos];
    for row in dz.chunks_exact(ntok * d) {
        dpos.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
    }
    let d_patches = lin_bwd(p, &layout.embed, &tape.patches, &dz, grads);
    unpatchify(&d_patches, batch, ps)
}

/// `ŝ = W·x₀ + F_dae(x₀)` with `x₀ = F_vit(x̂)`; unclamped.
pub fn decode<T: Scalar>(p: &CodecParams<T>, x_hat: &[T], batch: usize) -> Result<Vec<T>> {
    Ok(decode_pass(p, x_hat, batch, false)?.0)
}

/// Evaluation-time clamp of decoder output to `[0, 1]`.
pub fn clamp_unit<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) };
    }
}
