//! HQ-Net: the super-resolution network that turns a degraded crop
//! into a quality-improved image.
//!
//! Three encoder pathways each produce a latent vector: a Canny-fed
//! edge pathway, a self-attention pathway and a convolutional
//! autoencoder whose per-level activations become decoder skip
//! connections. The latents concatenate into one fused vector (2,884
//! wide at full scale: 284 + 552 + 2,048) which a skip-connected conv
//! decoder turns back into an image, bounded to [0, 1] by a final
//! sigmoid.
//!
//! Every width scales with `scale_factor`, so the same code runs the
//! full-size network and the small configurations used for gradient
//! checks and timed training runs.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Ix2, Ix3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{canny_edges, Image};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::opt::AdamW;
use crate::nn::{init, validate_shapes, Ctx, Graph, ParamTree, Var};

/// Base latent widths at scale 1.
pub const LATENT_EDGE_BASE: usize = 284;
pub const LATENT_ATTN_BASE: usize = 552;
pub const LATENT_AE_BASE: usize = 2048;

/// Checkpoint kind tag for this model family.
pub const CHECKPOINT_KIND: &str = "hqnet";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HQNetConfig {
    /// Square input resolution; must be a multiple of 16 and at least 32.
    pub input_size: usize,
    /// Uniform width multiplier in (0, 1]; every channel count and
    /// latent width is the ceiling of `scale_factor` times its base.
    pub scale_factor: f64,
    pub canny_sigma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    pub attention_heads: usize,
    /// Token grid side for the attention pathway.
    pub token_grid: usize,
    /// Spatial side of the autoencoder bottleneck after pooling.
    pub bottleneck_grid: usize,
    /// Dropout applied to the fused latent during training.
    pub dropout: f64,
    /// Ablation switch: add a 1x1-conv projection of the input to the
    /// decoder output before the sigmoid.
    pub residual_from_input: bool,
}

impl Default for HQNetConfig {
    fn default() -> Self {
        HQNetConfig {
            input_size: 512,
            scale_factor: 1.0,
            canny_sigma: 1.4,
            canny_low: 0.1,
            canny_high: 0.3,
            attention_heads: 4,
            token_grid: 16,
            bottleneck_grid: 4,
            dropout: 0.4,
            residual_from_input: false,
        }
    }
}

impl HQNetConfig {
    /// A channel width under the current scale, never below 1.
    pub fn width(&self, base: usize) -> usize {
        ((self.scale_factor * base as f64).ceil() as usize).max(1)
    }

    pub fn latent_edge(&self) -> usize {
        self.width(LATENT_EDGE_BASE)
    }

    pub fn latent_attn(&self) -> usize {
        self.width(LATENT_ATTN_BASE)
    }

    pub fn latent_ae(&self) -> usize {
        self.width(LATENT_AE_BASE)
    }

    /// Fused latent width; always the sum of the three pathway widths.
    pub fn latent_total(&self) -> usize {
        self.latent_edge() + self.latent_attn() + self.latent_ae()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "scale factor must lie in (0, 1], got {}",
                self.scale_factor
            )));
        }
        if self.input_size < 32 || self.input_size % 16 != 0 {
            return Err(Error::invalid(format!(
                "input size must be a multiple of 16 and at least 32, got {}",
                self.input_size
            )));
        }
        if self.attention_heads == 0 || self.width(64) % self.attention_heads != 0 {
            return Err(Error::invalid(format!(
                "attention width {} is not divisible by {} heads",
                self.width(64),
                self.attention_heads
            )));
        }
        if self.token_grid == 0 || self.token_grid > self.input_size {
            return Err(Error::invalid(format!(
                "token grid {} incompatible with input size {}",
                self.token_grid, self.input_size
            )));
        }
        if self.bottleneck_grid == 0 || self.bottleneck_grid > self.input_size / 16 {
            return Err(Error::invalid(format!(
                "bottleneck grid {} incompatible with input size {}",
                self.bottleneck_grid, self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.canny_sigma > 0.0)
            || !(0.0..=1.0).contains(&self.canny_low)
            || !(0.0..=1.0).contains(&self.canny_high)
            || self.canny_low >= self.canny_high
        {
            return Err(Error::invalid(
                "canny parameters must satisfy sigma > 0 and 0 <= low < high <= 1",
            ));
        }
        Ok(())
    }
}

/// One training example: the degraded rendition and its clean original.
#[derive(Debug, Clone)]
pub struct DegradationPair {
    pub degraded: Image,
    pub clean: Image,
}

impl DegradationPair {
    pub fn new(degraded: Image, clean: Image) -> Result<Self> {
        if degraded.height() != clean.height()
            || degraded.width() != clean.width()
            || degraded.channels() != clean.channels()
        {
            return Err(Error::invalid(format!(
                "pair dimensions disagree: {}x{}x{} vs {}x{}x{}",
                degraded.height(),
                degraded.width(),
                degraded.channels(),
                clean.height(),
                clean.width(),
                clean.channels()
            )));
        }
        Ok(DegradationPair { degraded, clean })
    }
}

// ---- parameter layout ----

fn push_norm(m: &mut BTreeMap<String, Vec<usize>>, prefix: &str, c: usize) {
    m.insert(format!("{prefix}.gamma"), vec![c]);
    m.insert(format!("{prefix}.beta"), vec![c]);
    m.insert(format!("{prefix}.running_mean"), vec![c]);
    m.insert(format!("{prefix}.running_var"), vec![c]);
}

fn push_conv(m: &mut BTreeMap<String, Vec<usize>>, prefix: &str, co: usize, ci: usize, k: usize) {
    m.insert(format!("{prefix}.w"), vec![co, ci, k, k]);
    m.insert(format!("{prefix}.b"), vec![co]);
}

fn push_linear(m: &mut BTreeMap<String, Vec<usize>>, prefix: &str, i: usize, o: usize) {
    m.insert(format!("{prefix}.w"), vec![i, o]);
    m.insert(format!("{prefix}.b"), vec![o]);
}

fn hq_layer_shapes(m: &mut BTreeMap<String, Vec<usize>>, prefix: &str, c_in: usize, c1: usize, c2: usize) {
    push_conv(m, &format!("{prefix}.b1c1"), c1, c_in, 3);
    push_norm(m, &format!("{prefix}.b1n1"), c1);
    push_conv(m, &format!("{prefix}.b1c2"), c2, c1, 3);
    push_norm(m, &format!("{prefix}.b1n2"), c2);
    push_conv(m, &format!("{prefix}.b2c"), c2, c_in, 3);
    push_conv(m, &format!("{prefix}.fuse"), c2, c2, 3);
}

/// Full tensor layout of the network under a config: name to shape.
pub fn expected_shapes(cfg: &HQNetConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    cfg.validate()?;
    let mut m = BTreeMap::new();
    let c1 = cfg.width(32);
    let c2 = cfg.width(64);
    let bg = cfg.bottleneck_grid;
    // Edge pathway.
    hq_layer_shapes(&mut m, "edge.hq", 1, c1, c2);
    push_conv(&mut m, "edge.down1", c2, c2, 3);
    push_conv(&mut m, "edge.down2", c2, c2, 3);
    push_linear(&mut m, "edge.out", c2 * 16, cfg.latent_edge());
    // Attention pathway.
    hq_layer_shapes(&mut m, "attn.hq", 3, c1, c2);
    for p in ["attn.q", "attn.k", "attn.v", "attn.o"] {
        push_linear(&mut m, p, c2, c2);
    }
    push_linear(&mut m, "attn.out", c2, cfg.latent_attn());
    // Autoencoder pathway.
    let w = [cfg.width(32), cfg.width(64), cfg.width(128), cfg.width(256)];
    let mut ci = 3;
    for (l, &wo) in w.iter().enumerate() {
        push_conv(&mut m, &format!("ae.l{}a", l + 1), wo, ci, 3);
        push_conv(&mut m, &format!("ae.l{}b", l + 1), wo, wo, 3);
        ci = wo;
    }
    push_linear(&mut m, "ae.out", w[3] * bg * bg, cfg.latent_ae());
    // Decoder.
    push_linear(&mut m, "dec.in", cfg.latent_total(), w[3] * bg * bg);
    push_conv(&mut m, "dec.c1", w[2], w[3] + w[3], 3);
    push_conv(&mut m, "dec.c2", w[1], w[2] + w[2], 3);
    push_conv(&mut m, "dec.c3", w[0], w[1] + w[1], 3);
    push_conv(&mut m, "dec.c4", w[0], w[0] + w[0], 3);
    push_conv(&mut m, "dec.out", 3, w[0], 3);
    push_conv(&mut m, "dec.res", 3, 3, 1);
    Ok(m)
}

pub fn init_hqnet_params(cfg: &HQNetConfig, seed: u64) -> Result<ParamTree> {
    let mut params = init::from_shapes(&expected_shapes(cfg)?, seed);
    // The output stage is sigmoid(dec.out(features) + dec.res(input)).
    // sigmoid(4v - 2) ~ v around mid-range, so an identity-scaled
    // residual projection and a damped correction branch start the
    // network near the identity map instead of making it spend its
    // first epochs rediscovering one.
    let mut res_w = ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 3, 1, 1]));
    for c in 0..3 {
        res_w[[c, c, 0, 0]] = 4.0;
    }
    params.insert("dec.res.w".into(), res_w);
    params.insert(
        "dec.res.b".into(),
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), -2.0),
    );
    if let Some(w) = params.get_mut("dec.out.w") {
        w.mapv_inplace(|v| v * 0.05);
    }
    Ok(params)
}

/// Standalone HQ-layer parameters under a prefix, for isolated use.
pub fn init_hq_layer_params(prefix: &str, c_in: usize, c1: usize, c2: usize, seed: u64) -> ParamTree {
    let mut m = BTreeMap::new();
    hq_layer_shapes(&mut m, prefix, c_in, c1, c2);
    init::from_shapes(&m, seed)
}

/// Check that a parameter tree matches the layout a config implies.
pub fn validate_params(cfg: &HQNetConfig, params: &ParamTree) -> Result<()> {
    validate_shapes(&expected_shapes(cfg)?, params)
}

// ---- graph construction ----

fn flatten_row(g: &mut Graph, x: Var) -> Var {
    let len = g.value(x).len();
    g.reshape(x, &[1, len])
}

/// The HQ layer: two conv/norm/SELU blocks multiplied elementwise with
/// a strided conv branch restored to full resolution by bicubic
/// interpolation, then fused by a final conv. Spatial dims are
/// preserved.
pub fn hq_layer_graph(g: &mut Graph, ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] < 4 || shape[2] < 4 {
        return Err(Error::invalid(format!(
            "HQ layer needs a (c, h, w) input with spatial dims of at least 4, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let b1 = ctx.conv(g, x, &format!("{prefix}.b1c1"), 1, 1)?;
    let b1 = ctx.norm2d(g, b1, &format!("{prefix}.b1n1"))?;
    let b1 = g.selu(b1);
    let b1 = ctx.conv(g, b1, &format!("{prefix}.b1c2"), 1, 1)?;
    let b1 = ctx.norm2d(g, b1, &format!("{prefix}.b1n2"))?;
    let b1 = g.selu(b1);
    let b2 = ctx.conv(g, x, &format!("{prefix}.b2c"), 2, 1)?;
    let b2 = g.bicubic_to(b2, h, w);
    let prod = g.mul(b1, b2);
    ctx.conv(g, prod, &format!("{prefix}.fuse"), 1, 1)
}

/// Evaluation-mode HQ layer over a plain `(c, h, w)` array with
/// parameters stored under `prefix`.
pub fn hq_layer(x: &Array3<f64>, params: &ParamTree, prefix: &str) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(params, false);
    let xv = g.leaf(x.clone().into_dyn());
    let y = hq_layer_graph(&mut g, &mut ctx, xv, prefix)?;
    Ok(g.value(y)
        .view()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .to_owned())
}

/// Multi-head scaled dot-product attention over `(tokens, dim)` rows.
/// Returns the transformed tokens and the per-head attention matrices.
#[allow(clippy::too_many_arguments)]
pub fn self_attention_graph(
    g: &mut Graph,
    tokens: Var,
    q_w: Var,
    q_b: Var,
    k_w: Var,
    k_b: Var,
    v_w: Var,
    v_b: Var,
    o_w: Var,
    o_b: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(tokens).shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "token dim {d} is not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = {
        let m = g.matmul(tokens, q_w);
        g.add_row_bias(m, q_b)
    };
    let k = {
        let m = g.matmul(tokens, k_w);
        g.add_row_bias(m, k_b)
    };
    let v = {
        let m = g.matmul(tokens, v_w);
        g.add_row_bias(m, v_b)
    };
    let mut head_outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_axis_op(q, 1, hd * dk, dk);
        let kh = g.slice_axis_op(k, 1, hd * dk, dk);
        let vh = g.slice_axis_op(v, 1, hd * dk, dk);
        let kt = g.transpose2d(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let a = g.softmax_rows(scaled);
        attns.push(a);
        head_outs.push(g.matmul(a, vh));
    }
    let cat = g.concat(1, &head_outs);
    let proj = g.matmul(cat, o_w);
    Ok((g.add_row_bias(proj, o_b), attns))
}

/// Projection weights for one attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q_w: Array2<f64>,
    pub q_b: Array1<f64>,
    pub k_w: Array2<f64>,
    pub k_b: Array1<f64>,
    pub v_w: Array2<f64>,
    pub v_b: Array1<f64>,
    pub o_w: Array2<f64>,
    pub o_b: Array1<f64>,
}

impl AttentionParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat =
            || {
                init::kaiming_uniform(&mut rng, &[dim, dim], dim)
                    .into_dimensionality::<Ix2>()
                    .unwrap()
            };
        AttentionParams {
            q_w: mat(),
            q_b: Array1::zeros(dim),
            k_w: mat(),
            k_b: Array1::zeros(dim),
            v_w: mat(),
            v_b: Array1::zeros(dim),
            o_w: mat(),
            o_b: Array1::zeros(dim),
        }
    }
}

pub fn self_attention(x: &Array2<f64>, params: &AttentionParams, heads: usize) -> Result<Array2<f64>> {
    Ok(self_attention_with_weights(x, params, heads)?.0)
}

/// Like [`self_attention`] but also returns each head's attention
/// matrix, whose rows are softmax outputs and sum to 1.
pub fn self_attention_with_weights(
    x: &Array2<f64>,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let t = g.leaf(x.clone().into_dyn());
    let q_w = g.leaf(params.q_w.clone().into_dyn());
    let q_b = g.leaf(params.q_b.clone().into_dyn());
    let k_w = g.leaf(params.k_w.clone().into_dyn());
    let k_b = g.leaf(params.k_b.clone().into_dyn());
    let v_w = g.leaf(params.v_w.clone().into_dyn());
    let v_b = g.leaf(params.v_b.clone().into_dyn());
    let o_w = g.leaf(params.o_w.clone().into_dyn());
    let o_b = g.leaf(params.o_b.clone().into_dyn());
    let (out, attns) =
        self_attention_graph(&mut g, t, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, heads)?;
    let to2 = |v: Var, g: &Graph| {
        g.value(v)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned()
    };
    let weights = attns.iter().map(|&a| to2(a, &g)).collect();
    Ok((to2(out, &g), weights))
}

/// Network input after preprocessing: the image in channels-first
/// layout plus its Canny edge map. Both are tape leaves; the edge
/// detector itself sits outside the differentiated graph.
pub struct Prepared {
    pub chw: Array3<f64>,
    pub edges: Array3<f64>,
}

/// Precompute the forward-pass inputs: channels-first pixels plus the
/// Canny edge map the edge pathway consumes.
pub fn prepare(img: &Image, cfg: &HQNetConfig) -> Result<Prepared> {
    if img.height() != cfg.input_size || img.width() != cfg.input_size {
        return Err(Error::invalid(format!(
            "network expects {0}x{0} input, got {1}x{2}",
            cfg.input_size,
            img.height(),
            img.width()
        )));
    }
    if img.channels() != 3 {
        return Err(Error::invalid("network input must have 3 channels"));
    }
    let edges = canny_edges(img, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)?;
    Ok(Prepared {
        chw: img.to_chw(),
        edges: edges.to_chw(),
    })
}

fn edge_path_graph(g: &mut Graph, ctx: &mut Ctx, prep: &Prepared, _cfg: &HQNetConfig) -> Result<Var> {
    let x = g.leaf(prep.edges.clone().into_dyn());
    let x = hq_layer_graph(g, ctx, x, "edge.hq")?;
    let x = ctx.conv(g, x, "edge.down1", 2, 1)?;
    let x = g.selu(x);
    let x = ctx.conv(g, x, "edge.down2", 2, 1)?;
    let x = g.selu(x);
    let x = g.avgpool_to(x, 4, 4);
    let flat = flatten_row(g, x);
    ctx.linear(g, flat, "edge.out")
}

fn attn_path_graph(g: &mut Graph, ctx: &mut Ctx, prep: &Prepared, cfg: &HQNetConfig) -> Result<Var> {
    let x = g.leaf(prep.chw.clone().into_dyn());
    let x = hq_layer_graph(g, ctx, x, "attn.hq")?;
    let c2 = g.value(x).shape()[0];
    let tg = cfg.token_grid;
    let pooled = g.avgpool_to(x, tg, tg);
    let grid = g.reshape(pooled, &[c2, tg * tg]);
    let tokens = g.transpose2d(grid);
    let q_w = ctx.var(g, "attn.q.w")?;
    let q_b = ctx.var(g, "attn.q.b")?;
    let k_w = ctx.var(g, "attn.k.w")?;
    let k_b = ctx.var(g, "attn.k.b")?;
    let v_w = ctx.var(g, "attn.v.w")?;
    let v_b = ctx.var(g, "attn.v.b")?;
    let o_w = ctx.var(g, "attn.o.w")?;
    let o_b = ctx.var(g, "attn.o.b")?;
    let (out, _attn) = self_attention_graph(
        g,
        tokens,
        q_w,
        q_b,
        k_w,
        k_b,
        v_w,
        v_b,
        o_w,
        o_b,
        cfg.attention_heads,
    )?;
    let pooled = g.mean_rows(out);
    ctx.linear(g, pooled, "attn.out")
}

fn ae_path_graph(
    g: &mut Graph,
    ctx: &mut Ctx,
    prep: &Prepared,
    cfg: &HQNetConfig,
) -> Result<(Var, Vec<Var>)> {
    let mut x = g.leaf(prep.chw.clone().into_dyn());
    let mut skips = Vec::with_capacity(4);
    for l in 1..=4 {
        x = ctx.conv(g, x, &format!("ae.l{l}a"), 1, 1)?;
        x = g.selu(x);
        skips.push(x);
        x = ctx.conv(g, x, &format!("ae.l{l}b"), 2, 1)?;
        x = g.selu(x);
    }
    let bg = cfg.bottleneck_grid;
    let pooled = g.avgpool_to(x, bg, bg);
    let flat = flatten_row(g, pooled);
    let latent = ctx.linear(g, flat, "ae.out")?;
    Ok((latent, skips))
}

/// Full forward pass on an existing tape. Returns the `(3, s, s)`
/// output node, values already sigmoid-bounded.
pub fn forward_graph(
    g: &mut Graph,
    ctx: &mut Ctx,
    prep: &Prepared,
    cfg: &HQNetConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let s = cfg.input_size;
    let edge = edge_path_graph(g, ctx, prep, cfg)?;
    let attn = attn_path_graph(g, ctx, prep, cfg)?;
    let (ae, skips) = ae_path_graph(g, ctx, prep, cfg)?;
    let mut fused = g.concat(1, &[edge, attn, ae]);
    if training && cfg.dropout > 0.0 {
        fused = g.dropout(fused, cfg.dropout, rng);
    }
    let w4 = cfg.width(256);
    let bg = cfg.bottleneck_grid;
    let z = ctx.linear(g, fused, "dec.in")?;
    let mut x = g.reshape(z, &[w4, bg, bg]);
    for (stage, div) in [(1usize, 8usize), (2, 4), (3, 2), (4, 1)] {
        let side = s / div;
        x = g.bicubic_to(x, side, side);
        x = g.concat(0, &[x, skips[4 - stage]]);
        x = ctx.conv(g, x, &format!("dec.c{stage}"), 1, 1)?;
        x = g.selu(x);
    }
    let mut out = ctx.conv(g, x, "dec.out", 1, 1)?;
    if cfg.residual_from_input {
        let inp = g.leaf(prep.chw.clone().into_dyn());
        let res = ctx.conv(g, inp, "dec.res", 1, 0)?;
        out = g.add(out, res);
    }
    Ok(g.sigmoid(out))
}

fn latent_eval(
    img: &Image,
    params: &ParamTree,
    cfg: &HQNetConfig,
    build: impl FnOnce(&mut Graph, &mut Ctx, &Prepared, &HQNetConfig) -> Result<Var>,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    let prep = prepare(img, cfg)?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(params, false);
    let v = build(&mut g, &mut ctx, &prep, cfg)?;
    Ok(g.value(v)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .row(0)
        .to_owned())
}

/// Edge-pathway latent: Canny edges, HQ layer, strided convs, pooled
/// projection. Length [`HQNetConfig::latent_edge`].
pub fn edge_pathway(img: &Image, params: &ParamTree, cfg: &HQNetConfig) -> Result<Array1<f64>> {
    latent_eval(img, params, cfg, edge_path_graph)
}

/// Attention-pathway latent of length [`HQNetConfig::latent_attn`].
pub fn attention_pathway(img: &Image, params: &ParamTree, cfg: &HQNetConfig) -> Result<Array1<f64>> {
    latent_eval(img, params, cfg, attn_path_graph)
}

/// Autoencoder bottleneck latent of length [`HQNetConfig::latent_ae`]
/// plus the per-level skip activations the decoder would consume.
pub fn autoencoder_pathway(
    img: &Image,
    params: &ParamTree,
    cfg: &HQNetConfig,
) -> Result<(Array1<f64>, Vec<Array3<f64>>)> {
    cfg.validate()?;
    let prep = prepare(img, cfg)?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(params, false);
    let (latent, skips) = ae_path_graph(&mut g, &mut ctx, &prep, cfg)?;
    let lat = g
        .value(latent)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .row(0)
        .to_owned();
    let skips = skips
        .into_iter()
        .map(|s| {
            g.value(s)
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .to_owned()
        })
        .collect();
    Ok((lat, skips))
}

/// Quality-improve one image (evaluation mode: running statistics, no
/// dropout; deterministic for fixed input and parameters).
pub fn hqnet_forward(img: &Image, params: &ParamTree, cfg: &HQNetConfig) -> Result<Image> {
    cfg.validate()?;
    validate_params(cfg, params)?;
    let prep = prepare(img, cfg)?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_graph(&mut g, &mut ctx, &prep, cfg, false, &mut rng)?;
    let chw = g
        .value(out)
        .view()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .to_owned();
    Image::from_chw(&chw)
}

// ---- training ----

/// Optimisation hyperparameters shared by the trainers in this crate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.00485,
            batch_size: 16,
            weight_decay: 0.0787,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epoch count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHqnet {
    pub params: ParamTree,
    /// Mean per-sample loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch MSE training. Deterministic per seed: shuffling, dropout
/// and initialisation all derive from one ChaCha stream, gradients
/// accumulate in sample order within each batch, and normalisation
/// running statistics update once per batch from the mean of the
/// per-image statistics.
pub fn train_hqnet(
    pairs: &[DegradationPair],
    cfg: &HQNetConfig,
    hyper: &TrainHyper,
) -> Result<TrainedHqnet> {
    cfg.validate()?;
    hyper.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    let prepared: Vec<Prepared> = pairs
        .iter()
        .map(|p| {
            if p.degraded.height() != p.clean.height() || p.degraded.width() != p.clean.width() {
                return Err(Error::invalid("pair dimensions disagree"));
            }
            prepare(&p.degraded, cfg)
        })
        .collect::<Result<_>>()?;
    let targets: Vec<Array3<f64>> = pairs.iter().map(|p| p.clean.to_chw()).collect();
    let mut params = init_hqnet_params(cfg, hyper.seed)?;
    let mut opt = AdamW::new(hyper.learning_rate, hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut grad_acc = ParamTree::new();
            let mut stats_acc: BTreeMap<String, Vec<(Array1<f64>, Array1<f64>)>> = BTreeMap::new();
            for &i in batch {
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&params, true);
                let out = forward_graph(&mut g, &mut ctx, &prepared[i], cfg, true, &mut rng)?;
                let target = g.leaf(targets[i].clone().into_dyn());
                let diff = g.sub(out, target);
                let sq = g.mul(diff, diff);
                let loss = g.mean_all(sq);
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, loss: lv });
                }
                epoch_loss += lv;
                let grads = g.backward(loss);
                let Ctx { vars, stats, .. } = ctx;
                for (name, var) in vars {
                    if let Some(gr) = grads.wrt(var) {
                        match grad_acc.get_mut(&name) {
                            Some(acc) => acc.zip_mut_with(gr, |a, b| *a += b * inv),
                            None => {
                                grad_acc.insert(name, gr.mapv(|v| v * inv));
                            }
                        }
                    }
                }
                for (name, m, v) in stats {
                    stats_acc.entry(name).or_default().push((m, v));
                }
            }
            opt.step(&mut params, &grad_acc);
            for (name, list) in stats_acc {
                let k = list.len() as f64;
                let dim = list[0].0.len();
                let mut mean = Array1::<f64>::zeros(dim);
                let mut var = Array1::<f64>::zeros(dim);
                for (m, v) in &list {
                    mean += &(m / k);
                    var += &(v / k);
                }
                let momentum = 0.1;
                let rm = params.get_mut(&format!("{name}.running_mean")).unwrap();
                rm.zip_mut_with(&mean.view().into_dyn(), |r, &b| {
                    *r = (1.0 - momentum) * *r + momentum * b
                });
                let rv = params.get_mut(&format!("{name}.running_var")).unwrap();
                rv.zip_mut_with(&var.view().into_dyn(), |r, &b| {
                    *r = (1.0 - momentum) * *r + momentum * b
                });
            }
        }
        epoch_losses.push(epoch_loss / pairs.len() as f64);
    }
    Ok(TrainedHqnet {
        params,
        epoch_losses,
    })
}

pub fn save_hqnet(path: impl AsRef<std::path::Path>, cfg: &HQNetConfig, params: &ParamTree) -> Result<()> {
    validate_params(cfg, params)?;
    save_checkpoint(path, CHECKPOINT_KIND, cfg, params)
}

pub fn load_hqnet(path: impl AsRef<std::path::Path>) -> Result<(HQNetConfig, ParamTree)> {
    let (cfg, params): (HQNetConfig, ParamTree) = load_checkpoint(path, CHECKPOINT_KIND)?;
    validate_params(&cfg, &params)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::check_gradients;
    use ndarray::ArrayD;

    /// Small config that exercises every component quickly.
    fn tiny_cfg() -> HQNetConfig {
        HQNetConfig {
            input_size: 32,
            scale_factor: 0.0625,
            attention_heads: 2,
            token_grid: 8,
            bottleneck_grid: 2,
            dropout: 0.4,
            ..HQNetConfig::default()
        }
    }

    fn textured_image(s: usize, seed: u64) -> Image {
        // High-contrast blocks and a diagonal keep Canny busy.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Image::from_fn(s, s, 3, |y, x, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let noise = (state >> 40) as f64 / (1u64 << 24) as f64 * 0.1;
            let base = if (x / 8 + y / 8) % 2 == 0 { 0.15 } else { 0.85 };
            let diag = if x == y { 0.5 } else { 0.0 };
            (base + diag * 0.3 + noise).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn latent_widths_at_full_scale() {
        let cfg = HQNetConfig::default();
        assert_eq!(cfg.latent_edge(), 284);
        assert_eq!(cfg.latent_attn(), 552);
        assert_eq!(cfg.latent_ae(), 2048);
        assert_eq!(cfg.latent_total(), 2884);
    }

    #[test]
    fn scaled_latents_recompute_the_sum() {
        let cfg = HQNetConfig {
            scale_factor: 0.25,
            ..HQNetConfig::default()
        };
        assert_eq!(cfg.latent_edge(), 71);
        assert_eq!(cfg.latent_attn(), 138);
        assert_eq!(cfg.latent_ae(), 512);
        assert_eq!(cfg.latent_total(), 71 + 138 + 512);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = HQNetConfig::default();
        c.scale_factor = 0.0;
        assert!(c.validate().is_err());
        let mut c = HQNetConfig::default();
        c.input_size = 100;
        assert!(c.validate().is_err());
        let mut c = HQNetConfig::default();
        c.attention_heads = 7;
        assert!(c.validate().is_err(), "64 is not divisible by 7");
        let mut c = HQNetConfig::default();
        c.canny_low = 0.5;
        c.canny_high = 0.2;
        assert!(c.validate().is_err());
        assert!(HQNetConfig::default().validate().is_ok());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn pair_requires_matching_dimensions() {
        let a = Image::constant(8, 8, 3, 0.5).unwrap();
        let b = Image::constant(8, 9, 3, 0.5).unwrap();
        assert!(DegradationPair::new(a.clone(), b).is_err());
        assert!(DegradationPair::new(a.clone(), a).is_ok());
    }

    #[test]
    fn hq_layer_preserves_spatial_dims() {
        let params = init_hq_layer_params("hq", 2, 3, 4, 1);
        let x = Array3::from_shape_fn((2, 8, 8), |(c, y, xx)| {
            ((c + 2 * y + 3 * xx) % 7) as f64 / 7.0
        });
        let y = hq_layer(&x, &params, "hq").unwrap();
        assert_eq!(y.dim(), (4, 8, 8));
    }

    #[test]
    fn hq_layer_zero_input_zero_biases_gives_zero() {
        let params = init_hq_layer_params("hq", 2, 3, 4, 1);
        let x = Array3::<f64>::zeros((2, 8, 8));
        let y = hq_layer(&x, &params, "hq").unwrap();
        assert!(y.iter().all(|&v| v == 0.0), "zeros in, zeros out");
    }

    #[test]
    fn hq_layer_rejects_tiny_inputs() {
        let params = init_hq_layer_params("hq", 1, 2, 2, 0);
        let x = Array3::<f64>::zeros((1, 3, 8));
        assert!(hq_layer(&x, &params, "hq").is_err());
    }

    #[test]
    fn hq_layer_gradients_match_finite_differences() {
        let params = init_hq_layer_params("hq", 1, 2, 2, 3);
        let x = Array3::from_shape_fn((1, 8, 8), |(_, y, xx)| {
            0.5 + 0.4 * ((y as f64 * 0.7).sin() * (xx as f64 * 0.5).cos())
        });
        let run = |p: &ParamTree| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(p, true);
            let xv = g.leaf(x.clone().into_dyn());
            let y = hq_layer_graph(&mut g, &mut ctx, xv, "hq").unwrap();
            let sq = g.mul(y, y);
            let loss = g.mean_all(sq);
            (g, ctx.vars, loss)
        };
        let (g, vars, loss) = run(&params);
        let grads = g.backward(loss);
        let mut analytic = ParamTree::new();
        for (name, var) in &vars {
            if let Some(gr) = grads.wrt(*var) {
                analytic.insert(name.clone(), gr.clone());
            }
        }
        let mut f = |p: &ParamTree| {
            let (g, _, loss) = run(p);
            g.scalar(loss)
        };
        let report = check_gradients(&mut f, &params, &analytic, 4, 1e-5, 0);
        assert!(
            report.passes(1e-4),
            "worst {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn attention_rows_sum_to_one_and_single_token_passthrough() {
        let params = AttentionParams::init(8, 5);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) % 11) as f64 / 11.0 - 0.3);
        let (_, weights) = self_attention_with_weights(&x, &params, 2).unwrap();
        assert_eq!(weights.len(), 2);
        for w in &weights {
            assert_eq!(w.dim(), (5, 5));
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        // One token: attention is forced to weight 1, so the output is
        // the value projection followed by the output projection.
        let single = Array2::from_shape_fn((1, 8), |(_, j)| j as f64 / 8.0);
        let out = self_attention(&single, &params, 2).unwrap();
        let v = single.dot(&params.v_w) + &params.v_b;
        let expect = v.dot(&params.o_w) + &params.o_b;
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let params = AttentionParams::init(8, 5);
        let x = Array2::<f64>::zeros((4, 8));
        assert!(matches!(
            self_attention(&x, &params, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let x = Array2::from_shape_fn((4, 8), |(i, j)| {
            0.3 * ((i as f64 + 1.0) * 0.9).sin() + 0.2 * (j as f64 * 0.55).cos()
        });
        let base = AttentionParams::init(8, 7);
        let mut params = ParamTree::new();
        params.insert("q.w".into(), base.q_w.clone().into_dyn());
        params.insert("q.b".into(), base.q_b.clone().into_dyn());
        params.insert("k.w".into(), base.k_w.clone().into_dyn());
        params.insert("k.b".into(), base.k_b.clone().into_dyn());
        params.insert("v.w".into(), base.v_w.clone().into_dyn());
        params.insert("v.b".into(), base.v_b.clone().into_dyn());
        params.insert("o.w".into(), base.o_w.clone().into_dyn());
        params.insert("o.b".into(), base.o_b.clone().into_dyn());
        let run = |p: &ParamTree| {
            let mut g = Graph::new();
            let t = g.leaf(x.clone().into_dyn());
            let vars: Vec<Var> = ["q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b"]
                .iter()
                .map(|n| g.leaf(p[*n].clone()))
                .collect();
            let (out, _) = self_attention_graph(
                &mut g, t, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7],
                2,
            )
            .unwrap();
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            (g, vars, loss)
        };
        let (g, vars, loss) = run(&params);
        let grads = g.backward(loss);
        let names = ["q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b"];
        let mut analytic = ParamTree::new();
        for (name, var) in names.iter().zip(&vars) {
            analytic.insert(
                name.to_string(),
                grads
                    .wrt(*var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(params[*name].raw_dim())),
            );
        }
        let mut f = |p: &ParamTree| {
            let (g, _, loss) = run(p);
            g.scalar(loss)
        };
        let report = check_gradients(&mut f, &params, &analytic, 4, 1e-5, 1);
        assert!(
            report.passes(1e-4),
            "worst {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn pathway_latent_lengths_follow_config() {
        let cfg = tiny_cfg();
        let params = init_hqnet_params(&cfg, 2).unwrap();
        let img = textured_image(32, 1);
        let e = edge_pathway(&img, &params, &cfg).unwrap();
        assert_eq!(e.len(), cfg.latent_edge());
        let a = attention_pathway(&img, &params, &cfg).unwrap();
        assert_eq!(a.len(), cfg.latent_attn());
        let (z, skips) = autoencoder_pathway(&img, &params, &cfg).unwrap();
        assert_eq!(z.len(), cfg.latent_ae());
        assert_eq!(skips.len(), 4, "one skip state per encoder level");
        assert!(e.iter().chain(a.iter()).chain(z.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn edge_latent_ignores_constant_level() {
        // Any constant image has no edges, so the latent is fixed by
        // biases alone and identical across levels.
        let cfg = tiny_cfg();
        let params = init_hqnet_params(&cfg, 3).unwrap();
        let a = edge_pathway(&Image::constant(32, 32, 3, 0.2).unwrap(), &params, &cfg).unwrap();
        let b = edge_pathway(&Image::constant(32, 32, 3, 0.9).unwrap(), &params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_contract_and_eval_determinism() {
        let cfg = tiny_cfg();
        let params = init_hqnet_params(&cfg, 4).unwrap();
        let img = textured_image(32, 2);
        let out1 = hqnet_forward(&img, &params, &cfg).unwrap();
        assert_eq!(out1.height(), 32);
        assert_eq!(out1.width(), 32);
        assert_eq!(out1.channels(), 3);
        assert!(out1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let out2 = hqnet_forward(&img, &params, &cfg).unwrap();
        assert_eq!(out1, out2);
    }

    #[test]
    fn forward_rejects_mismatched_params() {
        let cfg = tiny_cfg();
        let mut params = init_hqnet_params(&cfg, 4).unwrap();
        params.remove("dec.out.w");
        let img = textured_image(32, 2);
        assert!(matches!(
            hqnet_forward(&img, &params, &cfg),
            Err(Error::InvalidArgument(_))
        ));
        // Wrong scale in the config also fails shape validation.
        let other = HQNetConfig {
            scale_factor: 0.125,
            ..tiny_cfg()
        };
        let params = init_hqnet_params(&cfg, 4).unwrap();
        assert!(hqnet_forward(&img, &params, &other).is_err());
    }

    #[test]
    fn every_trainable_tensor_gets_gradient_on_a_probe_batch() {
        let cfg = HQNetConfig {
            residual_from_input: true,
            ..tiny_cfg()
        };
        let params = init_hqnet_params(&cfg, 5).unwrap();
        let img = textured_image(32, 7);
        let target = textured_image(32, 8);
        let prep = prepare(&img, &cfg).unwrap();
        assert!(prep.edges.sum() > 0.0, "probe image must produce edges");
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&params, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_graph(&mut g, &mut ctx, &prep, &cfg, true, &mut rng).unwrap();
        let t = g.leaf(target.to_chw().into_dyn());
        let d = g.sub(out, t);
        let sq = g.mul(d, d);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        for (name, var) in &ctx.vars {
            let gr = grads
                .wrt(*var)
                .unwrap_or_else(|| panic!("{name} received no gradient at all"));
            let norm: f64 = gr.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{name} has an all-zero gradient");
        }
        // Every trainable tensor should appear among the leaves.
        let trainable = params
            .keys()
            .filter(|k| !k.contains(".running_"))
            .count();
        assert_eq!(ctx.vars.len(), trainable, "some tensors never entered the graph");
    }

    #[test]
    fn training_learns_and_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let mut pairs = Vec::new();
        for i in 0..6 {
            let clean = textured_image(32, 100 + i);
            let degraded = crate::imaging::degrade(&clean, &Default::default()).unwrap();
            pairs.push(DegradationPair::new(degraded, clean).unwrap());
        }
        let hyper = TrainHyper {
            epochs: 3,
            batch_size: 3,
            seed: 11,
            ..TrainHyper::default()
        };
        let a = train_hqnet(&pairs, &cfg, &hyper).unwrap();
        assert_eq!(a.epoch_losses.len(), 3);
        assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(
            a.epoch_losses[2] < a.epoch_losses[0],
            "loss failed to drop: {:?}",
            a.epoch_losses
        );
        let b = train_hqnet(&pairs, &cfg, &hyper).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses, "same seed, same history");
        // A different seed takes a different path.
        let c = train_hqnet(
            &pairs,
            &cfg,
            &TrainHyper {
                seed: 12,
                ..hyper.clone()
            },
        )
        .unwrap();
        assert_ne!(a.epoch_losses, c.epoch_losses);
    }

    #[test]
    fn training_rejects_empty_and_mismatched_input() {
        let cfg = tiny_cfg();
        let hyper = TrainHyper::default();
        assert!(matches!(
            train_hqnet(&[], &cfg, &hyper),
            Err(Error::InvalidArgument(_))
        ));
        let img64 = textured_image(64, 0);
        let pair = DegradationPair::new(img64.clone(), img64).unwrap();
        assert!(train_hqnet(&[pair], &cfg, &hyper).is_err(), "wrong resolution");
    }

    #[test]
    fn checkpoint_round_trip_via_wrappers() {
        let cfg = tiny_cfg();
        let params = init_hqnet_params(&cfg, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hq.ckpt");
        save_hqnet(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_hqnet(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2.len(), params.len());
        // f32 narrowing: values agree to f32 precision.
        for (name, t) in &params {
            let u = &params2[name];
            for (a, b) in t.iter().zip(u.iter()) {
                assert!((a - b).abs() <= (a.abs() * 1e-7 + 1e-9));
            }
        }
    }

    #[test]
    fn residual_flag_changes_the_output() {
        let base = tiny_cfg();
        let with_res = HQNetConfig {
            residual_from_input: true,
            ..base.clone()
        };
        let img = textured_image(32, 3);
        let p1 = init_hqnet_params(&base, 7).unwrap();
        let out_plain = hqnet_forward(&img, &p1, &base).unwrap();
        let out_res = hqnet_forward(&img, &p1, &with_res).unwrap();
        assert_ne!(out_plain, out_res);
    }
}
