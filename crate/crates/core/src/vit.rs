//! Vision Transformer encoder with a DINO projection head.
//!
//! Pre-norm blocks, GELU MLP (ratio 4), learned positional embeddings
//! (bilinearly interpolated when the input grid differs from the
//! configured one), multi-head self-attention softmax(QKᵀ/√d_k)·V, and
//! a CLS token whose post-norm state is the image embedding. The
//! projection head is a 3-layer MLP (hidden 2·dim) with an
//! L2-normalized penultimate layer feeding the prototype logits.
//!
//! Every forward runs on a [`GradTape`], so the same code serves
//! inference, training, and gradient checking; the per-head softmax
//! weights are captured for attention-map export.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Real, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub bands: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Prototype (projection-head output) dimension.
    pub proto_count: usize,
}

impl ModelConfig {
    /// ViT-base: 12 layers, 768 hidden dimensions, 12 attention heads.
    pub fn base() -> Self {
        ModelConfig {
            image_size: 224,
            bands: 3,
            patch_size: 8,
            depth: 12,
            dim: 768,
            heads: 12,
            proto_count: 4096,
        }
    }

    /// Desk-scale preset for laptop-sized runs and tests.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            bands: 3,
            patch_size: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            proto_count: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.bands == 0
            || self.patch_size == 0
            || self.depth == 0
            || self.dim == 0
            || self.heads == 0
            || self.proto_count == 0
        {
            return Err(Error::config("model config: all fields must be non-zero"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.bands * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.dim
    }

    pub fn head_hidden(&self) -> usize {
        2 * self.dim
    }

    /// Bottleneck width of the projection head (the L2-normalized layer).
    pub fn head_bottleneck(&self) -> usize {
        self.dim
    }

    /// Total scalar parameter count implied by this config.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let per_layer = 2 * d                 // norm1
            + 3 * (d * d + d)                 // q, k, v
            + d * d + d                       // output projection
            + 2 * d                           // norm2
            + d * self.mlp_hidden() + self.mlp_hidden()
            + self.mlp_hidden() * d + d;
        self.patch_len() * d + d              // patch projection
            + d                               // cls
            + (self.tokens() + 1) * d         // positional
            + self.depth * per_layer
            + 2 * d                           // final norm
            + d * self.head_hidden() + self.head_hidden()
            + self.head_hidden() * self.head_bottleneck() + self.head_bottleneck()
            + self.head_bottleneck() * self.proto_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub norm1_g: Tensor<T>,
    pub norm1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub norm2_g: Tensor<T>,
    pub norm2_b: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    /// Prototype layer, bias-free: one row per prototype,
    /// `[proto_count, bottleneck]`. Rows are L2-normalized in the
    /// forward pass (weight-normalized with unit gain), so logits are
    /// cosine similarities.
    pub w3: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<T> {
    pub config: ModelConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_g: Tensor<T>,
    pub final_norm_b: Tensor<T>,
    pub head: HeadParams<T>,
}

/// All-zero parameters with the shapes implied by `config`; the
/// skeleton deserialization fills in.
pub fn zero_params<T: Real>(config: &ModelConfig) -> Result<VitParams<T>> {
    config.validate()?;
    let d = config.dim;
    let z = |shape: Vec<usize>| Tensor::<T>::zeros(shape);
    let layers = (0..config.depth)
        .map(|_| LayerParams {
            norm1_g: z(vec![d]),
            norm1_b: z(vec![d]),
            wq: z(vec![d, d]),
            bq: z(vec![d]),
            wk: z(vec![d, d]),
            bk: z(vec![d]),
            wv: z(vec![d, d]),
            bv: z(vec![d]),
            wo: z(vec![d, d]),
            bo: z(vec![d]),
            norm2_g: z(vec![d]),
            norm2_b: z(vec![d]),
            mlp_w1: z(vec![d, config.mlp_hidden()]),
            mlp_b1: z(vec![config.mlp_hidden()]),
            mlp_w2: z(vec![config.mlp_hidden(), d]),
            mlp_b2: z(vec![d]),
        })
        .collect();
    Ok(VitParams {
        config: config.clone(),
        patch_w: z(vec![config.patch_len(), d]),
        patch_b: z(vec![d]),
        cls: z(vec![1, d]),
        pos: z(vec![config.tokens() + 1, d]),
        layers,
        final_norm_g: z(vec![d]),
        final_norm_b: z(vec![d]),
        head: HeadParams {
            w1: z(vec![d, config.head_hidden()]),
            b1: z(vec![config.head_hidden()]),
            w2: z(vec![config.head_hidden(), config.head_bottleneck()]),
            b2: z(vec![config.head_bottleneck()]),
            w3: z(vec![config.proto_count, config.head_bottleneck()]),
        },
    })
}

/// Deterministic initialization: truncated normal (std 0.02) for
/// weight matrices, CLS, and positional embeddings; zeros for biases;
/// ones for norm gains. Sampling order is the named-tensor order, so
/// `(config, seed)` fully determines the bits.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<VitParams<T>> {
    config.validate()?;
    let mut rng = Rng::seed(seed);
    let d = config.dim;
    let tn = |shape: Vec<usize>, rng: &mut Rng| Tensor::<T>::trunc_normal(shape, INIT_STD, rng);

    let patch_w = tn(vec![config.patch_len(), d], &mut rng);
    let patch_b = Tensor::zeros(vec![d]);
    let cls = tn(vec![1, d], &mut rng);
    let pos = tn(vec![config.tokens() + 1, d], &mut rng);

    let mut layers = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        layers.push(LayerParams {
            norm1_g: Tensor::full(vec![d], T::ONE),
            norm1_b: Tensor::zeros(vec![d]),
            wq: tn(vec![d, d], &mut rng),
            bq: Tensor::zeros(vec![d]),
            wk: tn(vec![d, d], &mut rng),
            bk: Tensor::zeros(vec![d]),
            wv: tn(vec![d, d], &mut rng),
            bv: Tensor::zeros(vec![d]),
            wo: tn(vec![d, d], &mut rng),
            bo: Tensor::zeros(vec![d]),
            norm2_g: Tensor::full(vec![d], T::ONE),
            norm2_b: Tensor::zeros(vec![d]),
            mlp_w1: tn(vec![d, config.mlp_hidden()], &mut rng),
            mlp_b1: Tensor::zeros(vec![config.mlp_hidden()]),
            mlp_w2: tn(vec![config.mlp_hidden(), d], &mut rng),
            mlp_b2: Tensor::zeros(vec![d]),
        });
    }

    let head = HeadParams {
        w1: tn(vec![d, config.head_hidden()], &mut rng),
        b1: Tensor::zeros(vec![config.head_hidden()]),
        w2: tn(vec![config.head_hidden(), config.head_bottleneck()], &mut rng),
        b2: Tensor::zeros(vec![config.head_bottleneck()]),
        w3: tn(vec![config.proto_count, config.head_bottleneck()], &mut rng),
    };

    Ok(VitParams {
        config: config.clone(),
        patch_w,
        patch_b,
        cls,
        pos,
        layers,
        final_norm_g: Tensor::full(vec![d], T::ONE),
        final_norm_b: Tensor::zeros(vec![d]),
        head,
    })
}

impl<T: Real> VitParams<T> {
    /// Parameter tensors in the fixed serialization/update order.
    #[allow(clippy::vec_init_then_push)]
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push((String::from("patch_w"), &self.patch_w));
        out.push((String::from("patch_b"), &self.patch_b));
        out.push((String::from("cls"), &self.cls));
        out.push((String::from("pos"), &self.pos));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l:02}.norm1_g"), &layer.norm1_g));
            out.push((format!("layer{l:02}.norm1_b"), &layer.norm1_b));
            out.push((format!("layer{l:02}.wq"), &layer.wq));
            out.push((format!("layer{l:02}.bq"), &layer.bq));
            out.push((format!("layer{l:02}.wk"), &layer.wk));
            out.push((format!("layer{l:02}.bk"), &layer.bk));
            out.push((format!("layer{l:02}.wv"), &layer.wv));
            out.push((format!("layer{l:02}.bv"), &layer.bv));
            out.push((format!("layer{l:02}.wo"), &layer.wo));
            out.push((format!("layer{l:02}.bo"), &layer.bo));
            out.push((format!("layer{l:02}.norm2_g"), &layer.norm2_g));
            out.push((format!("layer{l:02}.norm2_b"), &layer.norm2_b));
            out.push((format!("layer{l:02}.mlp_w1"), &layer.mlp_w1));
            out.push((format!("layer{l:02}.mlp_b1"), &layer.mlp_b1));
            out.push((format!("layer{l:02}.mlp_w2"), &layer.mlp_w2));
            out.push((format!("layer{l:02}.mlp_b2"), &layer.mlp_b2));
        }
        out.push((String::from("final_norm_g"), &self.final_norm_g));
        out.push((String::from("final_norm_b"), &self.final_norm_b));
        out.push((String::from("head.w1"), &self.head.w1));
        out.push((String::from("head.b1"), &self.head.b1));
        out.push((String::from("head.w2"), &self.head.w2));
        out.push((String::from("head.b2"), &self.head.b2));
        out.push((String::from("head.w3"), &self.head.w3));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    #[allow(clippy::vec_init_then_push)]
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        out.push(&mut self.patch_w);
        out.push(&mut self.patch_b);
        out.push(&mut self.cls);
        out.push(&mut self.pos);
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.norm1_g);
            out.push(&mut layer.norm1_b);
            out.push(&mut layer.wq);
            out.push(&mut layer.bq);
            out.push(&mut layer.wk);
            out.push(&mut layer.bk);
            out.push(&mut layer.wv);
            out.push(&mut layer.bv);
            out.push(&mut layer.wo);
            out.push(&mut layer.bo);
            out.push(&mut layer.norm2_g);
            out.push(&mut layer.norm2_b);
            out.push(&mut layer.mlp_w1);
            out.push(&mut layer.mlp_b1);
            out.push(&mut layer.mlp_w2);
            out.push(&mut layer.mlp_b2);
        }
        out.push(&mut self.final_norm_g);
        out.push(&mut self.final_norm_b);
        out.push(&mut self.head.w1);
        out.push(&mut self.head.b1);
        out.push(&mut self.head.w2);
        out.push(&mut self.head.b2);
        out.push(&mut self.head.w3);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn to_f64(&self) -> VitParams<f64> {
        self.convert(|t| t.to_f64_tensor())
    }

    pub fn to_f32(&self) -> VitParams<f32> {
        self.convert(|t| t.to_f32_tensor())
    }

    fn convert<U: Real>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> VitParams<U> {
        VitParams {
            config: self.config.clone(),
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            cls: f(&self.cls),
            pos: f(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1_g: f(&l.norm1_g),
                    norm1_b: f(&l.norm1_b),
                    wq: f(&l.wq),
                    bq: f(&l.bq),
                    wk: f(&l.wk),
                    bk: f(&l.bk),
                    wv: f(&l.wv),
                    bv: f(&l.bv),
                    wo: f(&l.wo),
                    bo: f(&l.bo),
                    norm2_g: f(&l.norm2_g),
                    norm2_b: f(&l.norm2_b),
                    mlp_w1: f(&l.mlp_w1),
                    mlp_b1: f(&l.mlp_b1),
                    mlp_w2: f(&l.mlp_w2),
                    mlp_b2: f(&l.mlp_b2),
                })
                .collect(),
            final_norm_g: f(&self.final_norm_g),
            final_norm_b: f(&self.final_norm_b),
            head: HeadParams {
                w1: f(&self.head.w1),
                b1: f(&self.head.b1),
                w2: f(&self.head.w2),
                b2: f(&self.head.b2),
                w3: f(&self.head.w3),
            },
        }
    }
}

/// Flat indices mapping a `[bands, h, w]` raster to
/// `[tokens, bands·p²]` patch rows; flattening order within a patch is
/// (band, row-within-patch, col-within-patch).
pub fn patch_indices(bands: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape(format!(
            "raster {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(gh * gw * bands * p * p);
    for pr in 0..gh {
        for pc in 0..gw {
            for b in 0..bands {
                for r in 0..p {
                    for c in 0..p {
                        idx.push(b * h * w + (pr * p + r) * w + (pc * p + c));
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Splits a `[bands, h, w]` raster into `[tokens, bands·p²]` rows.
pub fn patchify<T: Real>(tile: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = tile.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [bands, h, w], got {s:?}")));
    }
    let (bands, h, w) = (s[0], s[1], s[2]);
    let idx = patch_indices(bands, h, w, p)?;
    let tokens = (h / p) * (w / p);
    let data: Vec<T> = idx.iter().map(|&i| tile.data()[i]).collect();
    Tensor::from_vec(vec![tokens, bands * p * p], data)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    tokens: &Tensor<T>,
    bands: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Tensor<T>> {
    let idx = patch_indices(bands, h, w, p)?;
    if tokens.len() != idx.len() {
        return Err(Error::shape(format!(
            "token volume {} does not match raster {bands}x{h}x{w}",
            tokens.len()
        )));
    }
    let mut data = vec![T::ZERO; bands * h * w];
    for (o, &i) in idx.iter().enumerate() {
        data[i] = tokens.data()[o];
    }
    Tensor::from_vec(vec![bands, h, w], data)
}

/// Bilinear interpolation matrix from a `g_in`² patch grid to a
/// `g_out`² grid (rows sum to 1); used to resize positional embeddings.
pub fn pos_interp_weights<T: Real>(g_in: usize, g_out: usize) -> Tensor<T> {
    let n_out = g_out * g_out;
    let n_in = g_in * g_in;
    let mut w = vec![T::ZERO; n_out * n_in];
    let ratio = g_in as f64 / g_out as f64;
    for oy in 0..g_out {
        for ox in 0..g_out {
            let row = oy * g_out + ox;
            let sy = ((oy as f64 + 0.5) * ratio - 0.5).clamp(0.0, (g_in - 1) as f64);
            let sx = ((ox as f64 + 0.5) * ratio - 0.5).clamp(0.0, (g_in - 1) as f64);
            let y0 = sy as usize;
            let x0 = sx as usize;
            let y1 = (y0 + 1).min(g_in - 1);
            let x1 = (x0 + 1).min(g_in - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let mut acc = |y: usize, x: usize, weight: f64| {
                w[row * n_in + y * g_in + x] += T::from_f64(weight);
            };
            acc(y0, x0, (1.0 - fy) * (1.0 - fx));
            acc(y0, x1, (1.0 - fy) * fx);
            acc(y1, x0, fy * (1.0 - fx));
            acc(y1, x1, fy * fx);
        }
    }
    Tensor::from_vec(vec![n_out, n_in], w).expect("consistent shape")
}

/// Tape handles for every parameter, in named order.
pub struct VitVars {
    pub all: Vec<Var>,
}

impl VitVars {
    pub fn place<T: Real>(params: &VitParams<T>, tape: &mut GradTape<T>) -> Self {
        let all = params
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        VitVars { all }
    }
}

// Offsets into the named-order parameter list.
const GLOBAL_PARAMS: usize = 4; // patch_w, patch_b, cls, pos
const PER_LAYER_PARAMS: usize = 16;

struct LayerVars {
    norm1_g: Var,
    norm1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    norm2_g: Var,
    norm2_b: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

impl VitVars {
    fn layer(&self, l: usize) -> LayerVars {
        let o = GLOBAL_PARAMS + l * PER_LAYER_PARAMS;
        let a = &self.all;
        LayerVars {
            norm1_g: a[o],
            norm1_b: a[o + 1],
            wq: a[o + 2],
            bq: a[o + 3],
            wk: a[o + 4],
            bk: a[o + 5],
            wv: a[o + 6],
            bv: a[o + 7],
            wo: a[o + 8],
            bo: a[o + 9],
            norm2_g: a[o + 10],
            norm2_b: a[o + 11],
            mlp_w1: a[o + 12],
            mlp_b1: a[o + 13],
            mlp_w2: a[o + 14],
            mlp_b2: a[o + 15],
        }
    }
}

/// Forward-pass results as tape variables plus captured attention maps.
pub struct VitForward<T> {
    /// Post-norm CLS token, `[1, dim]`.
    pub cls: Var,
    /// Mean of the post-norm patch tokens, `[1, dim]`.
    pub mean: Var,
    /// Projection-head logits, `[1, proto_count]`.
    pub logits: Var,
    /// Row-stochastic per-layer, per-head weights, each `(t+1)x(t+1)`.
    pub maps: Vec<Vec<Tensor<T>>>,
}

fn at_layer(l: usize, e: Error) -> Error {
    match e {
        Error::Numerical { detail, .. } => Error::numerical(format!("layer {l}"), detail),
        other => other,
    }
}

/// Runs the encoder on a `[bands, s, s]` tile already on the tape.
/// The tile side may differ from the configured image size as long as
/// it is patch-divisible (positional embeddings are interpolated).
pub fn forward_on_tape<T: Real>(
    params: &VitParams<T>,
    vars: &VitVars,
    tape: &mut GradTape<T>,
    tile: Var,
) -> Result<VitForward<T>> {
    let cfg = &params.config;
    let shape = tape.value(tile).shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.bands {
        return Err(Error::shape(format!(
            "tile shape {shape:?} does not match {} bands",
            cfg.bands
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h != w {
        return Err(Error::shape(format!("tile must be square, got {h}x{w}")));
    }
    let p = cfg.patch_size;
    let idx = patch_indices(cfg.bands, h, w, p)?;
    let grid = h / p;
    let tokens = grid * grid;

    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_sqrt_dk = T::ONE / T::from_f64(cfg.head_dim() as f64).sqrt();

    let (patch_w, patch_b, cls, pos) = (vars.all[0], vars.all[1], vars.all[2], vars.all[3]);

    // patch embedding
    let patches = tape.gather(tile, idx, vec![tokens, cfg.patch_len()])?;
    let embedded = tape.matmul(patches, patch_w)?;
    let embedded = tape.add_row(embedded, patch_b)?;
    let mut x = tape.concat_rows(&[cls, embedded])?;

    // positional embeddings, interpolated when the grid differs
    let pos_cls = tape.slice_rows(pos, 0, 1)?;
    let pos_patch = tape.slice_rows(pos, 1, cfg.tokens())?;
    let pos_patch = if tokens == cfg.tokens() {
        pos_patch
    } else {
        let weights = tape.leaf(pos_interp_weights::<T>(cfg.grid(), grid));
        tape.matmul(weights, pos_patch)?
    };
    let pos_full = tape.concat_rows(&[pos_cls, pos_patch])?;
    x = tape.add(x, pos_full)?;

    let mut maps = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let lv = vars.layer(l);
        let res = (|| -> Result<(Var, Vec<Tensor<T>>)> {
            let h1 = tape.layer_norm(x, lv.norm1_g, lv.norm1_b, eps)?;
            let q = tape.matmul(h1, lv.wq)?;
            let q = tape.add_row(q, lv.bq)?;
            let k = tape.matmul(h1, lv.wk)?;
            let k = tape.add_row(k, lv.bk)?;
            let v = tape.matmul(h1, lv.wv)?;
            let v = tape.add_row(v, lv.bv)?;

            let hd = cfg.head_dim();
            let mut head_outs = Vec::with_capacity(cfg.heads);
            let mut layer_maps = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt_dk)?;
                let weights = tape.softmax_rows(scores)?;
                layer_maps.push(tape.value(weights).clone());
                head_outs.push(tape.matmul(weights, vh)?);
            }
            let attn = tape.concat_cols(&head_outs)?;
            let attn = tape.matmul(attn, lv.wo)?;
            let attn = tape.add_row(attn, lv.bo)?;
            let x_mid = tape.add(x, attn)?;

            let h2 = tape.layer_norm(x_mid, lv.norm2_g, lv.norm2_b, eps)?;
            let m = tape.matmul(h2, lv.mlp_w1)?;
            let m = tape.add_row(m, lv.mlp_b1)?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, lv.mlp_w2)?;
            let m = tape.add_row(m, lv.mlp_b2)?;
            Ok((tape.add(x_mid, m)?, layer_maps))
        })()
        .map_err(|e| at_layer(l, e))?;
        x = res.0;
        maps.push(res.1);
    }

    let base = GLOBAL_PARAMS + cfg.depth * PER_LAYER_PARAMS;
    let (fin_g, fin_b) = (vars.all[base], vars.all[base + 1]);
    let (hw1, hb1, hw2, hb2, hw3) = (
        vars.all[base + 2],
        vars.all[base + 3],
        vars.all[base + 4],
        vars.all[base + 5],
        vars.all[base + 6],
    );

    let xf = tape.layer_norm(x, fin_g, fin_b, eps)?;
    let cls_emb = tape.slice_rows(xf, 0, 1)?;
    let patch_part = tape.slice_rows(xf, 1, tokens)?;
    let ones = tape.leaf(Tensor::full(vec![1, tokens], T::ONE));
    let mean = tape.matmul(ones, patch_part)?;
    let mean = tape.scale(mean, T::ONE / T::from_f64(tokens as f64))?;

    let z = tape.matmul(cls_emb, hw1)?;
    let z = tape.add_row(z, hb1)?;
    let z = tape.gelu(z)?;
    let z = tape.matmul(z, hw2)?;
    let z = tape.add_row(z, hb2)?;
    let z = tape.l2_normalize_rows(z)?;
    let protos = tape.l2_normalize_rows(hw3)?;
    let protos_t = tape.transpose(protos)?;
    let logits = tape.matmul(z, protos_t)?;

    Ok(VitForward {
        cls: cls_emb,
        mean,
        logits,
        maps,
    })
}

/// Concrete forward-pass outputs.
#[derive(Debug, Clone)]
pub struct VitOutput<T> {
    /// Post-norm CLS embedding, length `dim`.
    pub embedding: Tensor<T>,
    /// Mean-pooled patch-token embedding, length `dim`.
    pub mean_embedding: Tensor<T>,
    /// Projection-head logits, length `proto_count`.
    pub head_logits: Tensor<T>,
    pub maps: AttentionMaps<T>,
}

/// Per-layer, per-head attention weights captured during a forward.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    /// `layers[l][h]` is the row-stochastic `(t+1)x(t+1)` weight matrix.
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> AttentionMaps<T> {
    /// CLS-row attention over patches for one head, reshaped to the
    /// patch grid, plus the CLS self-attention mass.
    pub fn cls_grid(&self, layer: usize, head: usize) -> Result<(Tensor<T>, T)> {
        let m = self
            .layers
            .get(layer)
            .and_then(|l| l.get(head))
            .ok_or_else(|| {
                Error::config(format!("no attention map at layer {layer} head {head}"))
            })?;
        let (rows, _) = m.dims2()?;
        let tokens = rows - 1;
        let grid = (tokens as f64).sqrt() as usize;
        if grid * grid != tokens {
            return Err(Error::shape(format!(
                "{tokens} tokens is not a square grid"
            )));
        }
        let cls_row = m.row(0);
        let data = cls_row[1..].to_vec();
        Ok((Tensor::from_vec(vec![grid, grid], data)?, cls_row[0]))
    }
}

/// Full forward pass on a raster; pure and deterministic.
pub fn forward<T: Real>(params: &VitParams<T>, tile: &Tensor<T>) -> Result<VitOutput<T>> {
    let mut tape = GradTape::new();
    let tile_var = tape.leaf(tile.clone());
    let vars = VitVars::place(params, &mut tape);
    let fwd = forward_on_tape(params, &vars, &mut tape, tile_var)?;
    let dim = params.config.dim;
    Ok(VitOutput {
        embedding: tape.value(fwd.cls).clone().reshape(vec![dim])?,
        mean_embedding: tape.value(fwd.mean).clone().reshape(vec![dim])?,
        head_logits: tape
            .value(fwd.logits)
            .clone()
            .reshape(vec![params.config.proto_count])?,
        maps: AttentionMaps { layers: fwd.maps },
    })
}

/// Per-head CLS attention grids for one layer.
pub struct LayerAttention<T> {
    /// Full `(t+1)x(t+1)` weight matrices, one per head.
    pub maps: Vec<Tensor<T>>,
    /// CLS-row attention reshaped to the patch grid, one per head.
    pub grids: Vec<Tensor<T>>,
    /// CLS self-attention mass per head (each grid sums to 1 minus this).
    pub cls_self: Vec<T>,
}

pub fn attention_maps<T: Real>(
    params: &VitParams<T>,
    tile: &Tensor<T>,
    layer: usize,
) -> Result<LayerAttention<T>> {
    if layer >= params.config.depth {
        return Err(Error::config(format!(
            "layer {layer} out of range for depth {}",
            params.config.depth
        )));
    }
    let out = forward(params, tile)?;
    let heads = params.config.heads;
    let mut maps = Vec::with_capacity(heads);
    let mut grids = Vec::with_capacity(heads);
    let mut cls_self = Vec::with_capacity(heads);
    for h in 0..heads {
        let (grid, self_mass) = out.maps.cls_grid(layer, h)?;
        maps.push(out.maps.layers[layer][h].clone());
        grids.push(grid);
        cls_self.push(self_mass);
    }
    Ok(LayerAttention {
        maps,
        grids,
        cls_self,
    })
}
