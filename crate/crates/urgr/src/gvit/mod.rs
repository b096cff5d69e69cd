//! GViT: gesture classification over pixel graphs, and the full
//! inference pipeline that strings detection, cropping, quality
//! improvement and classification together.
//!
//! The classifier replaces a ViT's linear patch embedding with a
//! two-layer graph convolution stack over the 8-neighbour pixel graph:
//! node features flow through GLU-activated GC layers, return to a
//! spatial map, are reduced to the embedding width by a 1x1 conv,
//! pooled into a token grid and handed to a standard pre-norm
//! transformer encoder. Global average pooling plus a one-hidden-layer
//! head produces six class logits.

use std::collections::BTreeMap;

use ndarray::{Array2, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::focus::{focus_pipeline, BBox, Detector, FocusConfig, OracleDetector};
use crate::hqnet::{hqnet_forward, self_attention_graph, HQNetConfig, TrainHyper};
use crate::imaging::resize::bicubic_resize;
use crate::imaging::Image;
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::opt::AdamW;
use crate::nn::{init, validate_shapes, Ctx, Graph, ParamTree, Var};
use crate::pixelgraph::{
    build_adjacency, degree_and_normalize, gcn_stack_graph, image_to_graph, NormalizedPropagation,
};

pub const NUM_CLASSES: usize = 6;

/// Checkpoint kind tag for this model family.
pub const CHECKPOINT_KIND: &str = "gvit";

/// The six gesture classes. Index 1 is the null class, where no
/// gesture is performed; the remainder follow a fixed convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GestureClass {
    Null = 1,
    Pointing = 2,
    ThumbsUp = 3,
    ThumbsDown = 4,
    Beckoning = 5,
    Stop = 6,
}

impl GestureClass {
    pub const ALL: [GestureClass; NUM_CLASSES] = [
        GestureClass::Null,
        GestureClass::Pointing,
        GestureClass::ThumbsUp,
        GestureClass::ThumbsDown,
        GestureClass::Beckoning,
        GestureClass::Stop,
    ];

    /// One-based index in {1..6}.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::invalid(format!("class index must lie in 1..=6, got {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureClass::Null => "null",
            GestureClass::Pointing => "pointing",
            GestureClass::ThumbsUp => "thumbs-up",
            GestureClass::ThumbsDown => "thumbs-down",
            GestureClass::Beckoning => "beckoning",
            GestureClass::Stop => "stop",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown gesture class name {name:?}")))
    }
}

impl Serialize for GestureClass {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.index() as u64)
    }
}

impl<'de> Deserialize<'de> for GestureClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let i = u64::deserialize(d)?;
        GestureClass::from_index(i as usize).map_err(D::Error::custom)
    }
}

/// A categorical distribution over the six classes, kept together with
/// the logits it came from so losses can stay in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: [f64; NUM_CLASSES],
    logits: [f64; NUM_CLASSES],
}

impl ClassDistribution {
    /// Softmax of the logits, numerically stabilised; the probability
    /// vector is explicitly normalised so it sums to 1.
    pub fn from_logits(logits: [f64; NUM_CLASSES]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = logits.map(|l| (l - m).exp());
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        ClassDistribution { probs, logits }
    }

    /// Probabilities in class order (index 1 first). Non-negative, sum 1.
    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64; NUM_CLASSES] {
        &self.logits
    }

    pub fn prob_of(&self, class: GestureClass) -> f64 {
        self.probs[class.index() - 1]
    }
}

/// Most probable class; exact ties resolve to the lowest index.
pub fn classify(dist: &ClassDistribution) -> GestureClass {
    let mut best = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > dist.probs()[best] {
            best = i;
        }
    }
    GestureClass::from_index(best + 1).unwrap()
}

/// Cross-entropy of the distribution against a true label, computed
/// from the logits by log-sum-exp rather than from the (possibly
/// rounded) probabilities.
pub fn cross_entropy(dist: &ClassDistribution, label: GestureClass) -> f64 {
    let logits = dist.logits();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label.index() - 1]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GViTConfig {
    /// Side of the square pixel grid the graph is built on; inputs are
    /// bicubically resampled to this resolution first.
    pub graph_grid: usize,
    /// Pre-GLU output widths of the GC layers; each must be even. The
    /// usable width after gating is half of each entry.
    pub gc_dims: Vec<usize>,
    /// Token grid side after pooling the reduced feature map.
    pub token_grid: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout_between_gc: f64,
    pub num_classes: usize,
}

impl Default for GViTConfig {
    fn default() -> Self {
        GViTConfig {
            graph_grid: 64,
            gc_dims: vec![16, 32],
            token_grid: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            dropout_between_gc: 0.4,
            num_classes: NUM_CLASSES,
        }
    }
}

impl GViTConfig {
    /// Node feature width after the full GC stack.
    pub fn gc_out_dim(&self) -> usize {
        self.gc_dims.last().map(|d| d / 2).unwrap_or(0)
    }

    pub fn token_count(&self) -> usize {
        self.token_grid * self.token_grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "the class taxonomy is fixed at {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.graph_grid == 0 || self.token_grid == 0 || self.token_grid > self.graph_grid {
            return Err(Error::invalid(format!(
                "need 1 <= token grid <= graph grid, got {} and {}",
                self.token_grid, self.graph_grid
            )));
        }
        if self.gc_dims.is_empty() {
            return Err(Error::invalid("at least one GC layer is required"));
        }
        if let Some(d) = self.gc_dims.iter().find(|d| *d % 2 != 0 || **d == 0) {
            return Err(Error::invalid(format!(
                "GC width {d} cannot be split for gating; widths must be even"
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("depth and MLP ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_between_gc) {
            return Err(Error::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout_between_gc
            )));
        }
        Ok(())
    }
}

/// Full tensor layout of the classifier under a config.
pub fn expected_shapes(cfg: &GViTConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    cfg.validate()?;
    let mut m = BTreeMap::new();
    let mut c_in = 3;
    for (i, &d) in cfg.gc_dims.iter().enumerate() {
        m.insert(format!("gc{i}.w"), vec![c_in, d]);
        c_in = d / 2;
    }
    let e = cfg.embed_dim;
    m.insert("reduce.w".into(), vec![e, c_in, 1, 1]);
    m.insert("reduce.b".into(), vec![e]);
    m.insert("vit.pos".into(), vec![cfg.token_count(), e]);
    for b in 0..cfg.depth {
        let p = format!("vit.blk{b}");
        for ln in ["ln1", "ln2"] {
            m.insert(format!("{p}.{ln}.gamma"), vec![e]);
            m.insert(format!("{p}.{ln}.beta"), vec![e]);
        }
        for proj in ["q", "k", "v", "o"] {
            m.insert(format!("{p}.attn.{proj}.w"), vec![e, e]);
            m.insert(format!("{p}.attn.{proj}.b"), vec![e]);
        }
        let hidden = e * cfg.mlp_ratio;
        m.insert(format!("{p}.mlp.fc1.w"), vec![e, hidden]);
        m.insert(format!("{p}.mlp.fc1.b"), vec![hidden]);
        m.insert(format!("{p}.mlp.fc2.w"), vec![hidden, e]);
        m.insert(format!("{p}.mlp.fc2.b"), vec![e]);
    }
    m.insert("vit.ln.gamma".into(), vec![e]);
    m.insert("vit.ln.beta".into(), vec![e]);
    m.insert("head.fc1.w".into(), vec![e, e]);
    m.insert("head.fc1.b".into(), vec![e]);
    m.insert("head.fc2.w".into(), vec![e, NUM_CLASSES]);
    m.insert("head.fc2.b".into(), vec![NUM_CLASSES]);
    Ok(m)
}

pub fn init_gvit_params(cfg: &GViTConfig, seed: u64) -> Result<ParamTree> {
    Ok(init::from_shapes(&expected_shapes(cfg)?, seed))
}

/// Check that a parameter tree matches the layout a config implies.
pub fn validate_params(cfg: &GViTConfig, params: &ParamTree) -> Result<()> {
    validate_shapes(&expected_shapes(cfg)?, params)
}

/// Transformer encoder over a `(token_count, embed_dim)` matrix:
/// learned positional encodings, then `depth` pre-norm blocks of
/// multi-head self-attention and a ReLU MLP, both residual, and a
/// final normalisation. Also returns every head's attention matrix in
/// block order.
pub fn vit_encode_graph(
    g: &mut Graph,
    ctx: &mut Ctx,
    tokens: Var,
    cfg: &GViTConfig,
) -> Result<(Var, Vec<Var>)> {
    let shape = g.value(tokens).shape().to_vec();
    if shape != [cfg.token_count(), cfg.embed_dim] {
        return Err(Error::invalid(format!(
            "encoder expects {} tokens of width {}, got shape {shape:?}",
            cfg.token_count(),
            cfg.embed_dim
        )));
    }
    let pos = ctx.var(g, "vit.pos")?;
    let mut x = g.add(tokens, pos);
    let mut attn_mats = Vec::new();
    for b in 0..cfg.depth {
        let p = format!("vit.blk{b}");
        let h = ctx.layer_norm(g, x, &format!("{p}.ln1"))?;
        let q_w = ctx.var(g, &format!("{p}.attn.q.w"))?;
        let q_b = ctx.var(g, &format!("{p}.attn.q.b"))?;
        let k_w = ctx.var(g, &format!("{p}.attn.k.w"))?;
        let k_b = ctx.var(g, &format!("{p}.attn.k.b"))?;
        let v_w = ctx.var(g, &format!("{p}.attn.v.w"))?;
        let v_b = ctx.var(g, &format!("{p}.attn.v.b"))?;
        let o_w = ctx.var(g, &format!("{p}.attn.o.w"))?;
        let o_b = ctx.var(g, &format!("{p}.attn.o.b"))?;
        let (a_out, mats) =
            self_attention_graph(g, h, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, cfg.heads)?;
        attn_mats.extend(mats);
        x = g.add(x, a_out);
        let h2 = ctx.layer_norm(g, x, &format!("{p}.ln2"))?;
        let f1 = ctx.linear(g, h2, &format!("{p}.mlp.fc1"))?;
        let f1 = g.relu(f1);
        let f2 = ctx.linear(g, f1, &format!("{p}.mlp.fc2"))?;
        x = g.add(x, f2);
    }
    let out = ctx.layer_norm(g, x, "vit.ln")?;
    Ok((out, attn_mats))
}

pub fn vit_encode(tokens: &Array2<f64>, params: &ParamTree, cfg: &GViTConfig) -> Result<Array2<f64>> {
    Ok(vit_encode_with_attention(tokens, params, cfg)?.0)
}

/// Like [`vit_encode`] but also returns the attention matrices of
/// every block and head, for inspection.
pub fn vit_encode_with_attention(
    tokens: &Array2<f64>,
    params: &ParamTree,
    cfg: &GViTConfig,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(params, false);
    let t = g.leaf(tokens.clone().into_dyn());
    let (out, mats) = vit_encode_graph(&mut g, &mut ctx, t, cfg)?;
    let to2 = |v: Var, g: &Graph| {
        g.value(v)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned()
    };
    let weights = mats.iter().map(|&m| to2(m, &g)).collect();
    Ok((to2(out, &g), weights))
}

/// Resample an input frame to the graph grid.
fn downsample(img: &Image, cfg: &GViTConfig) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::invalid("classifier input must have 3 channels"));
    }
    if img.height() == cfg.graph_grid && img.width() == cfg.graph_grid {
        return Ok(img.clone());
    }
    bicubic_resize(img, cfg.graph_grid, cfg.graph_grid)
}

/// Classifier forward pass on an existing tape, from precomputed node
/// features. Returns the `(1, 6)` logits node.
pub fn gvit_graph(
    g: &mut Graph,
    ctx: &mut Ctx,
    features: &Array2<f64>,
    prop: &NormalizedPropagation,
    cfg: &GViTConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let grid = cfg.graph_grid;
    if features.dim() != (grid * grid, 3) {
        return Err(Error::invalid(format!(
            "feature matrix shape {:?} does not match a {grid}x{grid} RGB grid",
            features.dim()
        )));
    }
    let h = g.leaf(features.clone().into_dyn());
    let ws: Vec<Var> = (0..cfg.gc_dims.len())
        .map(|i| ctx.var(g, &format!("gc{i}.w")))
        .collect::<Result<_>>()?;
    let nodes = gcn_stack_graph(
        g,
        h,
        prop,
        &ws,
        cfg.dropout_between_gc,
        ctx.training(),
        rng,
    )?;
    // Row r of the node matrix is pixel (r / grid, r % grid); undo that
    // flattening to get a channels-first map for the reduction conv.
    let c_out = cfg.gc_out_dim();
    let t = g.transpose2d(nodes);
    let spatial = g.reshape(t, &[c_out, grid, grid]);
    let emb = ctx.conv(g, spatial, "reduce", 1, 0)?;
    let tg = cfg.token_grid;
    let pooled = g.avgpool_to(emb, tg, tg);
    let gridded = g.reshape(pooled, &[cfg.embed_dim, tg * tg]);
    let tokens = g.transpose2d(gridded);
    let (encoded, _) = vit_encode_graph(g, ctx, tokens, cfg)?;
    let gap = g.mean_rows(encoded);
    let f1 = ctx.linear(g, gap, "head.fc1")?;
    let f1 = g.relu(f1);
    ctx.linear(g, f1, "head.fc2")
}

fn logits_to_distribution(g: &Graph, logits: Var) -> ClassDistribution {
    let row = g.value(logits).view().into_dimensionality::<Ix2>().unwrap();
    let mut l = [0.0; NUM_CLASSES];
    for (dst, src) in l.iter_mut().zip(row.row(0)) {
        *dst = *src;
    }
    ClassDistribution::from_logits(l)
}

/// Classify one image. Evaluation mode is a pure function of the
/// input and parameters; training mode applies dropout between the GC
/// layers, drawn from a stream fixed per call so the result is still
/// reproducible (the trainer manages its own stream internally).
pub fn gvit_forward(
    img: &Image,
    params: &ParamTree,
    cfg: &GViTConfig,
    training: bool,
) -> Result<ClassDistribution> {
    cfg.validate()?;
    validate_params(cfg, params)?;
    let resized = downsample(img, cfg)?;
    let pg = image_to_graph(&resized)?;
    let prop = degree_and_normalize(&pg.adjacency)?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(params, training);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = gvit_graph(&mut g, &mut ctx, &pg.features, &prop, cfg, &mut rng)?;
    Ok(logits_to_distribution(&g, logits))
}

// ---- training ----

/// One labeled training image. When a bounding box is present the
/// sample runs through the focus pipeline first; without one the image
/// must already be a focused crop.
#[derive(Debug, Clone)]
pub struct GvitSample {
    pub image: Image,
    pub class: GestureClass,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone)]
pub struct TrainedGvit {
    pub params: ParamTree,
    /// Mean per-sample cross-entropy of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

fn focused_crop(
    img: &Image,
    bbox: Option<&BBox>,
    focus_cfg: &FocusConfig,
    hqnet: Option<(&HQNetConfig, &ParamTree)>,
) -> Result<Image> {
    let cropped = match bbox {
        Some(bb) => {
            let mut det = OracleDetector::with_bbox(bb.clone());
            focus_pipeline(img, &mut det, focus_cfg)?
        }
        None => img.clone(),
    };
    match hqnet {
        Some((hc, hp)) => hqnet_forward(&cropped, hp, hc),
        None => Ok(cropped),
    }
}

/// Mini-batch cross-entropy training. Every sample is focus-cropped
/// (when it carries a box) and quality-improved (when HQ-Net
/// parameters are supplied) once up front; training then runs on the
/// cached pixel-graph features. Deterministic per seed; gradients
/// accumulate in sample order within each batch.
pub fn train_gvit(
    samples: &[GvitSample],
    focus_cfg: &FocusConfig,
    hqnet: Option<(&HQNetConfig, &ParamTree)>,
    cfg: &GViTConfig,
    hyper: &TrainHyper,
) -> Result<TrainedGvit> {
    cfg.validate()?;
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    let grid = cfg.graph_grid;
    let prop = degree_and_normalize(&build_adjacency(grid, grid)?)?;
    let mut feats = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let crop = focused_crop(&s.image, s.bbox.as_ref(), focus_cfg, hqnet)?;
        let resized = downsample(&crop, cfg)?;
        feats.push(image_to_graph(&resized)?.features);
        labels.push(s.class.index() - 1);
    }
    let mut params = init_gvit_params(cfg, hyper.seed)?;
    let mut opt = AdamW::new(hyper.learning_rate, hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut grad_acc = ParamTree::new();
            for &i in batch {
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&params, true);
                let logits = gvit_graph(&mut g, &mut ctx, &feats[i], &prop, cfg, &mut rng)?;
                let loss = g.cross_entropy_logits(logits, labels[i]);
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, loss: lv });
                }
                epoch_loss += lv;
                let grads = g.backward(loss);
                for (name, var) in ctx.vars {
                    if let Some(gr) = grads.wrt(var) {
                        match grad_acc.get_mut(&name) {
                            Some(acc) => acc.zip_mut_with(gr, |a, b| *a += b * inv),
                            None => {
                                grad_acc.insert(name, gr.mapv(|v| v * inv));
                            }
                        }
                    }
                }
            }
            opt.step(&mut params, &grad_acc);
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    Ok(TrainedGvit {
        params,
        epoch_losses,
    })
}

pub fn save_gvit(path: impl AsRef<std::path::Path>, cfg: &GViTConfig, params: &ParamTree) -> Result<()> {
    validate_params(cfg, params)?;
    save_checkpoint(path, CHECKPOINT_KIND, cfg, params)
}

pub fn load_gvit(path: impl AsRef<std::path::Path>) -> Result<(GViTConfig, ParamTree)> {
    let (cfg, params): (GViTConfig, ParamTree) = load_checkpoint(path, CHECKPOINT_KIND)?;
    validate_params(&cfg, &params)?;
    Ok((cfg, params))
}

// ---- full pipeline ----

/// Outcome of one inference pass: either a classified gesture with its
/// certainty, or the distinguished no-user condition when detection
/// finds nobody.
#[derive(Debug, Clone, PartialEq)]
pub enum InferResult {
    Gesture {
        class: GestureClass,
        /// Probability the distribution assigns to the predicted
        /// class; always the maximum entry.
        certainty: f64,
        distribution: ClassDistribution,
    },
    NoUser,
}

impl InferResult {
    /// Wire form: `{"class": int, "name": str, "certainty": float}` or
    /// `{"no_user": true}`.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            InferResult::Gesture {
                class, certainty, ..
            } => serde_json::json!({
                "class": class.index(),
                "name": class.name(),
                "certainty": certainty,
            }),
            InferResult::NoUser => serde_json::json!({ "no_user": true }),
        }
    }
}

/// The full pipeline on one frame: detect and focus on the user,
/// optionally improve the crop, classify in evaluation mode. A frame
/// with nobody in it yields [`InferResult::NoUser`] rather than an
/// error; everything else propagates.
pub fn urgr_infer(
    frame: &Image,
    detector: &mut dyn Detector,
    hqnet: Option<(&HQNetConfig, &ParamTree)>,
    gvit: (&GViTConfig, &ParamTree),
    focus_cfg: &FocusConfig,
) -> Result<InferResult> {
    if let Some((hc, _)) = hqnet {
        if focus_cfg.target_size != hc.input_size {
            return Err(Error::invalid(format!(
                "focus produces {0}x{0} crops but the quality net expects {1}x{1}",
                focus_cfg.target_size, hc.input_size
            )));
        }
    }
    let cropped = match focus_pipeline(frame, detector, focus_cfg) {
        Ok(img) => img,
        Err(Error::NoUserFound(_)) => return Ok(InferResult::NoUser),
        Err(e) => return Err(e),
    };
    let improved = match hqnet {
        Some((hc, hp)) => hqnet_forward(&cropped, hp, hc)?,
        None => cropped,
    };
    let dist = gvit_forward(&improved, gvit.1, gvit.0, false)?;
    let class = classify(&dist);
    Ok(InferResult::Gesture {
        class,
        certainty: dist.prob_of(class),
        distribution: dist,
    })
}
