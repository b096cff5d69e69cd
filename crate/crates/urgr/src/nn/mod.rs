//! Reverse-mode automatic differentiation on a flat tape, plus the
//! numeric plumbing every network in this crate shares: sparse
//! matrices, parameter trees, an optimizer, initialisation, checkpoint
//! files and a finite-difference gradient checker.
//!
//! Everything runs in `f64`. Gradient verification against central
//! differences needs the precision headroom; checkpoints narrow to
//! `f32` only at the file boundary.
//!
//! The tape is append-only, so node index order is a topological order
//! and [`Graph::backward`] can walk it in reverse without bookkeeping.
//! Networks rebuild their graph every step; parameters enter as leaves
//! and their gradients are read back by leaf id after the sweep.

pub mod check;
pub mod checkpoint;
pub mod init;
pub mod opt;

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::resize::{resize_plan, ResizeTap};

/// Named parameter storage. A sorted map keeps every iteration order
/// (initialisation, optimizer steps, checkpoint layout) deterministic.
pub type ParamTree = BTreeMap<String, ArrayD<f64>>;

/// Epsilon inside every variance-based normalisation.
pub const NORM_EPS: f64 = 1e-5;

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Graph, &ArrayD<f64>, &mut [Option<ArrayD<f64>>])>;

struct Node {
    value: ArrayD<f64>,
    grad_fn: Option<GradFn>,
}

fn accum(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(s) => s.zip_mut_with(&g, |a, b| *a += *b),
        None => *slot = Some(g),
    }
}

/// Gradients of one scalar with respect to every node that received any.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if the loss depended on it. Interior node
    /// gradients are dropped during the sweep; leaves are retained.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, grad_fn: Option<GradFn>) -> Var {
        self.nodes.push(Node { value, grad_fn });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or parameter. Leaves keep their gradient after
    /// [`Graph::backward`]; everything is differentiated, there is no
    /// requires-grad flag.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on node of shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    fn val2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("node is not 2-D")
    }

    fn val3(&self, v: Var) -> ndarray::ArrayView3<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("node is not 3-D")
    }

    /// Reverse sweep from a scalar loss. Interior gradients are freed
    /// as soon as they have been propagated; leaf gradients survive in
    /// the returned [`Gradients`].
    pub fn backward(&self, loss: Var) -> Gradients {
        let lval = &self.nodes[loss.0].value;
        assert_eq!(
            lval.len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            lval.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(ArrayD::from_elem(lval.raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad_fn.is_none() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let f = self.nodes[i].grad_fn.as_ref().unwrap();
            f(self, &g, &mut grads);
        }
        Gradients { grads }
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "sub: shape mismatch"
        );
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.mapv(|v| -v));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul: shape mismatch"
        );
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                accum(&mut slots[a.0], g * &graph.nodes[b.0].value);
                accum(&mut slots[b.0], g * &graph.nodes[a.0].value);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                accum(&mut slots[a.0], g.mapv(|v| v * c));
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let out = av.dot(&bv).into_dyn();
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = graph.val2(a);
                let bv = graph.val2(b);
                accum(&mut slots[a.0], gm.dot(&bv.t()).into_dyn());
                accum(&mut slots[b.0], av.t().dot(&gm).into_dyn());
            })),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let out = self.val2(a).t().as_standard_layout().to_owned().into_dyn();
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                let gt = g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .t()
                    .as_standard_layout()
                    .to_owned();
                accum(&mut slots[a.0], gt.into_dyn());
            })),
        )
    }

    /// 2-D `x` plus a length-`ncols` bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val2(x);
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias is not 1-D");
        assert_eq!(xv.ncols(), bv.len(), "add_row_bias: width mismatch");
        let out = (&xv + &bv).into_dyn();
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                accum(&mut slots[x.0], g.clone());
                accum(&mut slots[b.0], gm.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// 3-D `(c, h, w)` feature map plus a per-channel bias.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val3(x);
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias is not 1-D");
        assert_eq!(xv.dim().0, bv.len(), "add_channel_bias: channel mismatch");
        let mut out = xv.to_owned();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v + bv[c]);
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, slots| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let gb = Array1::from_iter(gv.axis_iter(Axis(0)).map(|p| p.sum()));
                accum(&mut slots[x.0], g.clone());
                accum(&mut slots[b.0], gb.into_dyn());
            })),
        )
    }

    /// 2-D convolution over a `(c_in, h, w)` map with weight
    /// `(c_out, c_in, kh, kw)`, bias `(c_out,)`, zero padding.
    /// Implemented as im2col + matmul; the patch matrix is rebuilt in
    /// the backward pass instead of being kept on the tape.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1, "conv2d: zero stride");
        let xv = self.val3(x);
        let wv = self.nodes[w.0].value.view();
        assert_eq!(wv.ndim(), 4, "conv2d: weight is not 4-D");
        let (c_in, h, wd) = xv.dim();
        let (c_out, wc_in, kh, kw) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(c_in, wc_in, "conv2d: channel mismatch");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel larger than padded input"
        );
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(&xv, kh, kw, stride, pad);
        let w_mat = wv.to_shape((c_out, c_in * kh * kw)).unwrap().to_owned();
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv2d: bias is not 1-D");
        assert_eq!(bv.len(), c_out, "conv2d: bias length mismatch");
        let mut y_mat = w_mat.dot(&cols);
        for (c, mut row) in y_mat.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v + bv[c]);
        }
        let out = y_mat
            .to_shape(IxDyn(&[c_out, h_out, w_out]))
            .unwrap()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let g_mat = gv.to_shape((c_out, h_out * w_out)).unwrap().to_owned();
                let xv = graph.val3(x);
                let wv = graph.nodes[w.0].value.view();
                let w_mat = wv.to_shape((c_out, c_in * kh * kw)).unwrap().to_owned();
                let cols = im2col(&xv, kh, kw, stride, pad);
                let gw = g_mat.dot(&cols.t());
                let gb = g_mat.sum_axis(Axis(1));
                let g_cols = w_mat.t().dot(&g_mat);
                let gx = col2im(&g_cols.view(), c_in, h, wd, kh, kw, stride, pad);
                accum(
                    &mut slots[w.0],
                    gw.to_shape(IxDyn(&[c_out, c_in, kh, kw])).unwrap().to_owned(),
                );
                accum(&mut slots[b.0], gb.into_dyn());
                accum(&mut slots[x.0], gx.into_dyn());
            })),
        )
    }

    /// Differentiable bicubic resampling of a `(c, h, w)` map to
    /// `(c, out_h, out_w)`. Shares tap plans with the image resizer but
    /// does not clamp, so gradients pass through untouched.
    pub fn bicubic_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.val3(x);
        let (_c, h, w) = xv.dim();
        assert!(out_h > 0 && out_w > 0, "bicubic_to: zero target");
        let row_plan = resize_plan(h, out_h);
        let col_plan = resize_plan(w, out_w);
        let out = apply_plans(&xv, &row_plan, &col_plan);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, slots| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let gx = apply_plans_adjoint(&gv, &row_plan, &col_plan, h, w);
                accum(&mut slots[x.0], gx.into_dyn());
            })),
        )
    }

    /// Adaptive average pooling of a `(c, h, w)` map down to
    /// `(c, out_h, out_w)` tiles.
    pub fn avgpool_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.val3(x);
        let (c, h, w) = xv.dim();
        assert!(
            out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
            "avgpool_to: target {out_h}x{out_w} incompatible with input {h}x{w}"
        );
        let mut out = ndarray::Array3::<f64>::zeros((c, out_h, out_w));
        for ck in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = tile_bounds(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1) = tile_bounds(ox, out_w, w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += xv[[ck, y, xx]];
                        }
                    }
                    out[[ck, oy, ox]] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, slots| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ck in 0..c {
                    for oy in 0..out_h {
                        let (y0, y1) = tile_bounds(oy, out_h, h);
                        for ox in 0..out_w {
                            let (x0, x1) = tile_bounds(ox, out_w, w);
                            let share = gv[[ck, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx[[ck, y, xx]] += share;
                                }
                            }
                        }
                    }
                }
                accum(&mut slots[x.0], gx.into_dyn());
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn selu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| {
            if v > 0.0 {
                SELU_LAMBDA * v
            } else {
                SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
            }
        });
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                let mut gx = graph.nodes[x.0].value.mapv(|v| {
                    if v > 0.0 {
                        SELU_LAMBDA
                    } else {
                        SELU_LAMBDA * SELU_ALPHA * v.exp()
                    }
                });
                gx.zip_mut_with(g, |d, gg| *d *= *gg);
                accum(&mut slots[x.0], gx);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let id = self.push(
            out,
            Some(Box::new(move |_, _, _| unreachable!())),
        );
        // The backward needs the output value; rebuild the closure now
        // that the node id is known.
        self.nodes[id.0].grad_fn = Some(Box::new(move |graph, g, slots| {
            let s = &graph.nodes[id.0].value;
            let mut gx = s.mapv(|v| v * (1.0 - v));
            gx.zip_mut_with(g, |d, gg| *d *= *gg);
            accum(&mut slots[x.0], gx);
        }));
        id
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                let mut gx = graph.nodes[x.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                gx.zip_mut_with(g, |d, gg| *d *= *gg);
                accum(&mut slots[x.0], gx);
            })),
        )
    }

    /// Row-wise softmax of a 2-D array, numerically stabilised.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.val2(x);
        let mut out = xv.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let id = self.push(out.into_dyn(), Some(Box::new(move |_, _, _| unreachable!())));
        self.nodes[id.0].grad_fn = Some(Box::new(move |graph, g, slots| {
            let s = graph.val2(id);
            let gm = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(s.raw_dim());
            for r in 0..s.nrows() {
                let dot: f64 = (0..s.ncols()).map(|c| gm[[r, c]] * s[[r, c]]).sum();
                for c in 0..s.ncols() {
                    gx[[r, c]] = s[[r, c]] * (gm[[r, c]] - dot);
                }
            }
            accum(&mut slots[x.0], gx.into_dyn());
        }));
        id
    }

    /// Per-row layer normalisation of a 2-D array with learned scale
    /// and shift over the feature axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.val2(x);
        let n = xv.ncols();
        let gv = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("layer_norm: gamma is not 1-D");
        let bv = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("layer_norm: beta is not 1-D");
        assert!(gv.len() == n && bv.len() == n, "layer_norm: width mismatch");
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for c in 0..n {
                out[[r, c]] = (row[c] - mean) * inv * gv[c] + bv[c];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |graph, g, slots| {
                let xv = graph.val2(x);
                let gv = graph.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let n = xv.ncols();
                let mut gx = Array2::<f64>::zeros(xv.raw_dim());
                let mut ggamma = Array1::<f64>::zeros(n);
                let mut gbeta = Array1::<f64>::zeros(n);
                for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
                    let mean = row.sum() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..n).map(|c| gm[[r, c]] * gv[c]).collect();
                    let mean_dx: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxx: f64 =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    for c in 0..n {
                        gx[[r, c]] = inv * (dxhat[c] - mean_dx - xhat[c] * mean_dxx);
                        ggamma[c] += gm[[r, c]] * xhat[c];
                        gbeta[c] += gm[[r, c]];
                    }
                }
                accum(&mut slots[x.0], gx.into_dyn());
                accum(&mut slots[gamma.0], ggamma.into_dyn());
                accum(&mut slots[beta.0], gbeta.into_dyn());
            })),
        )
    }

    /// Per-channel spatial normalisation of a `(c, h, w)` map.
    ///
    /// Training mode normalises with the map's own spatial statistics
    /// and returns them so the caller can fold them into running
    /// averages; evaluation mode uses the supplied running statistics,
    /// making the op linear in `x`.
    pub fn norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        training: bool,
    ) -> (Var, Option<(Array1<f64>, Array1<f64>)>) {
        let xv = self.val3(x);
        let (c, h, w) = xv.dim();
        let n = (h * w) as f64;
        let gv = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("norm2d: gamma is not 1-D");
        let bv = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("norm2d: beta is not 1-D");
        assert!(
            gv.len() == c && bv.len() == c && running_mean.len() == c && running_var.len() == c,
            "norm2d: channel mismatch"
        );
        let (mean, var) = if training {
            let mean = Array1::from_iter(xv.axis_iter(Axis(0)).map(|p| p.sum() / n));
            let var = Array1::from_iter(xv.axis_iter(Axis(0)).enumerate().map(|(ck, p)| {
                p.iter().map(|v| (v - mean[ck]).powi(2)).sum::<f64>() / n
            }));
            (mean, var)
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let mut out = xv.to_owned();
        for (ck, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let inv = 1.0 / (var[ck] + NORM_EPS).sqrt();
            plane.mapv_inplace(|v| (v - mean[ck]) * inv * gv[ck] + bv[ck]);
        }
        let stats = training.then(|| (mean.clone(), var.clone()));
        let id = self.push(
            out.into_dyn(),
            Some(Box::new(move |graph, g, slots| {
                let xv = graph.val3(x);
                let gv = graph.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let gm = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gx = ndarray::Array3::<f64>::zeros(xv.raw_dim());
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                for ck in 0..c {
                    let inv = 1.0 / (var[ck] + NORM_EPS).sqrt();
                    if training {
                        let mut mean_dx = 0.0;
                        let mut mean_dxx = 0.0;
                        for y in 0..h {
                            for xx in 0..w {
                                let xhat = (xv[[ck, y, xx]] - mean[ck]) * inv;
                                let dxhat = gm[[ck, y, xx]] * gv[ck];
                                mean_dx += dxhat;
                                mean_dxx += dxhat * xhat;
                                ggamma[ck] += gm[[ck, y, xx]] * xhat;
                                gbeta[ck] += gm[[ck, y, xx]];
                            }
                        }
                        mean_dx /= n;
                        mean_dxx /= n;
                        for y in 0..h {
                            for xx in 0..w {
                                let xhat = (xv[[ck, y, xx]] - mean[ck]) * inv;
                                let dxhat = gm[[ck, y, xx]] * gv[ck];
                                gx[[ck, y, xx]] = inv * (dxhat - mean_dx - xhat * mean_dxx);
                            }
                        }
                    } else {
                        for y in 0..h {
                            for xx in 0..w {
                                let xhat = (xv[[ck, y, xx]] - mean[ck]) * inv;
                                gx[[ck, y, xx]] = gm[[ck, y, xx]] * gv[ck] * inv;
                                ggamma[ck] += gm[[ck, y, xx]] * xhat;
                                gbeta[ck] += gm[[ck, y, xx]];
                            }
                        }
                    }
                }
                accum(&mut slots[x.0], gx.into_dyn());
                accum(&mut slots[gamma.0], ggamma.into_dyn());
                accum(&mut slots[beta.0], gbeta.into_dyn());
            })),
        );
        (id, stats)
    }

    /// Inverted dropout with an explicit random source. Callers skip
    /// the op entirely in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} not in [0, 1)");
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = self.nodes[x.0]
            .value
            .mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let out = &self.nodes[x.0].value * &mask;
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                accum(&mut slots[x.0], g * &mask);
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let spans: Vec<(usize, usize)> = {
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = self.nodes[p.0].value.shape()[axis];
                    let s = (off, len);
                    off += len;
                    s
                })
                .collect()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                for (&id, &(off, len)) in ids.iter().zip(&spans) {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(off..off + len))
                        .to_owned();
                    accum(&mut slots[id], piece);
                }
            })),
        )
    }

    pub fn slice_axis_op(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert!(
            start + len <= shape[axis],
            "slice_axis_op: {start}+{len} exceeds axis of {}",
            shape[axis]
        );
        let out = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                accum(&mut slots[x.0], gx);
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let out = self.nodes[x.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                accum(
                    &mut slots[x.0],
                    g.to_shape(IxDyn(&old)).unwrap().to_owned(),
                );
            })),
        )
    }

    /// Sparse-dense product `m . h` for a symmetric sparse matrix.
    /// Symmetry is a caller contract; the backward pass reuses `m` as
    /// its own transpose.
    pub fn spmm_sym(&mut self, m: Rc<Csr>, h: Var) -> Var {
        let hv = self.val2(h);
        assert_eq!(m.n_cols, hv.nrows(), "spmm_sym: dimension mismatch");
        let out = m.dot_dense(&hv).into_dyn();
        let mb = Rc::clone(&m);
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                accum(&mut slots[h.0], mb.dot_dense(&gm).into_dyn());
            })),
        )
    }

    // ---- reductions and losses ----

    /// Mean over every element; output is 0-D.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        assert!(n > 0, "mean_all of empty node");
        let m = self.nodes[x.0].value.sum() / n as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), m);
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                let gs = *g.iter().next().unwrap() / n as f64;
                let gx = ArrayD::from_elem(graph.nodes[x.0].value.raw_dim(), gs);
                accum(&mut slots[x.0], gx);
            })),
        )
    }

    /// Column means of a 2-D array, kept as a `(1, n)` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.val2(x);
        let (m, n) = xv.dim();
        assert!(m > 0, "mean_rows of empty matrix");
        let out = xv
            .mean_axis(Axis(0))
            .unwrap()
            .into_shape_with_order((1, n))
            .unwrap()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |_, g, slots| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<f64>::zeros((m, n));
                for mut row in gx.axis_iter_mut(Axis(0)) {
                    for c in 0..n {
                        row[c] = gv[[0, c]] / m as f64;
                    }
                }
                accum(&mut slots[x.0], gx.into_dyn());
            })),
        )
    }

    /// Cross-entropy of a `(1, k)` logit row against a 0-based class
    /// index, computed with log-sum-exp rather than from probabilities.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.val2(logits);
        assert_eq!(lv.nrows(), 1, "cross_entropy_logits: expected one row");
        let k = lv.ncols();
        assert!(label < k, "cross_entropy_logits: label {label} out of range {k}");
        let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - lv[[0, label]];
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(
            out,
            Some(Box::new(move |graph, g, slots| {
                let lv = graph.val2(logits);
                let gs = *g.iter().next().unwrap();
                let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = lv.iter().map(|v| (v - m).exp()).sum();
                let mut gx = Array2::<f64>::zeros((1, k));
                for c in 0..k {
                    let p = (lv[[0, c]] - m).exp() / denom;
                    gx[[0, c]] = gs * (p - if c == label { 1.0 } else { 0.0 });
                }
                accum(&mut slots[logits.0], gx.into_dyn());
            })),
        )
    }
}

fn tile_bounds(i: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len / out_len).max(start + 1);
    (start, end)
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h_out * w_out));
    for ck in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ck * kh + dy) * kw + dx;
                for oy in 0..h_out {
                    let sy = (oy * stride + dy) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let sx = (ox * stride + dx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, oy * w_out + ox]] = x[[ck, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &ndarray::ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for ck in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ck * kh + dy) * kw + dx;
                for oy in 0..h_out {
                    let sy = (oy * stride + dy) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let sx = (ox * stride + dx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[ck, sy as usize, sx as usize]] += cols[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    out
}

fn apply_plans(
    x: &ndarray::ArrayView3<f64>,
    row_plan: &[ResizeTap],
    col_plan: &[ResizeTap],
) -> ndarray::Array3<f64> {
    let (c, _h, w) = x.dim();
    let (oh, ow) = (row_plan.len(), col_plan.len());
    let mut rows = ndarray::Array3::<f64>::zeros((c, oh, w));
    for ck in 0..c {
        for (oy, tap) in row_plan.iter().enumerate() {
            for xx in 0..w {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += tap.weight[t] * x[[ck, tap.src[t], xx]];
                }
                rows[[ck, oy, xx]] = acc;
            }
        }
    }
    let mut out = ndarray::Array3::<f64>::zeros((c, oh, ow));
    for ck in 0..c {
        for oy in 0..oh {
            for (ox, tap) in col_plan.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += tap.weight[t] * rows[[ck, oy, tap.src[t]]];
                }
                out[[ck, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`apply_plans`]: scatter each output gradient back
/// through the same taps, columns first (reverse order of the forward).
fn apply_plans_adjoint(
    g: &ndarray::ArrayView3<f64>,
    row_plan: &[ResizeTap],
    col_plan: &[ResizeTap],
    in_h: usize,
    in_w: usize,
) -> ndarray::Array3<f64> {
    let (c, oh, _ow) = g.dim();
    let mut rows = ndarray::Array3::<f64>::zeros((c, oh, in_w));
    for ck in 0..c {
        for oy in 0..oh {
            for (ox, tap) in col_plan.iter().enumerate() {
                let gv = g[[ck, oy, ox]];
                for t in 0..4 {
                    rows[[ck, oy, tap.src[t]]] += tap.weight[t] * gv;
                }
            }
        }
    }
    let mut out = ndarray::Array3::<f64>::zeros((c, in_h, in_w));
    for ck in 0..c {
        for (oy, tap) in row_plan.iter().enumerate() {
            for xx in 0..in_w {
                let gv = rows[[ck, oy, xx]];
                for t in 0..4 {
                    out[[ck, tap.src[t], xx]] += tap.weight[t] * gv;
                }
            }
        }
    }
    out
}

/// Compressed sparse row matrix. The only consumer is the pixel-graph
/// adjacency, so the feature set is deliberately small.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        for &(r, c, _) in &triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut counts = vec![0usize; n_rows];
        let mut last = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                counts[r] += 1;
                last = Some((r, c));
            }
        }
        let mut indptr = vec![0usize; n_rows + 1];
        for r in 0..n_rows {
            indptr[r + 1] = indptr[r] + counts[r];
        }
        Csr {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn dot_dense(&self, rhs: &ndarray::ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.n_cols, rhs.nrows(), "csr dot: dimension mismatch");
        let f = rhs.ncols();
        let mut out = Array2::<f64>::zeros((self.n_rows, f));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut orow = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let rrow = rhs.row(c);
                for k in 0..f {
                    orow[k] += v * rrow[k];
                }
            }
        }
        out
    }

    /// Dense copy for oracles; guarded so tests cannot accidentally
    /// materialise a full-resolution pixel graph.
    pub fn to_dense(&self) -> Array2<f64> {
        assert!(
            self.n_rows <= 4096,
            "to_dense is a test helper, refusing {} rows",
            self.n_rows
        );
        let mut out = Array2::<f64>::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] = v;
            }
        }
        out
    }
}

/// Builder state shared by one forward pass over a named parameter
/// tree: each parameter becomes a tape leaf at most once, and the
/// spatial-normalisation statistics collected in training mode are
/// recorded in layer call order for the caller's running updates.
pub struct Ctx<'a> {
    params: &'a ParamTree,
    pub vars: BTreeMap<String, Var>,
    pub stats: Vec<(String, Array1<f64>, Array1<f64>)>,
    training: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamTree, training: bool) -> Self {
        Ctx {
            params,
            vars: BTreeMap::new(),
            stats: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    fn raw(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params.get(name).ok_or_else(|| {
            Error::invalid(format!(
                "parameter {name} is missing; config and parameters disagree"
            ))
        })
    }

    /// Leaf var for a named tensor, inserted on first use.
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = g.leaf(self.raw(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Convolution using `prefix.w` and `prefix.b`.
    pub fn conv(
        &mut self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.w"))?;
        let b = self.var(g, &format!("{prefix}.b"))?;
        Ok(g.conv2d(x, w, b, stride, pad))
    }

    /// Channel normalisation using `prefix.{gamma,beta,running_mean,running_var}`.
    pub fn norm2d(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.gamma"))?;
        let beta = self.var(g, &format!("{prefix}.beta"))?;
        let rm = self
            .raw(&format!("{prefix}.running_mean"))?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::invalid(format!("{prefix}.running_mean is not 1-D")))?
            .to_owned();
        let rv = self
            .raw(&format!("{prefix}.running_var"))?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::invalid(format!("{prefix}.running_var is not 1-D")))?
            .to_owned();
        let (y, st) = g.norm2d(x, gamma, beta, &rm, &rv, self.training);
        if let Some((m, v)) = st {
            self.stats.push((prefix.to_string(), m, v));
        }
        Ok(y)
    }

    /// Dense affine layer using `prefix.w` (in x out) and `prefix.b`.
    pub fn linear(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.w"))?;
        let b = self.var(g, &format!("{prefix}.b"))?;
        let y = g.matmul(x, w);
        Ok(g.add_row_bias(y, b))
    }

    /// Layer normalisation using `prefix.gamma` and `prefix.beta`.
    pub fn layer_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.gamma"))?;
        let beta = self.var(g, &format!("{prefix}.beta"))?;
        Ok(g.layer_norm(x, gamma, beta))
    }
}

/// Check a parameter tree against an expected name-to-shape layout:
/// no missing or extra tensors, exact shapes, finite values.
pub fn validate_shapes(
    expected: &BTreeMap<String, Vec<usize>>,
    params: &ParamTree,
) -> Result<()> {
    for (name, shape) in expected {
        match params.get(name) {
            None => {
                return Err(Error::invalid(format!(
                    "parameter {name} is missing; config and parameters disagree"
                )))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::invalid(format!(
            "unexpected parameter {extra}; config and parameters disagree"
        )));
    }
    if let Some((name, _)) = params
        .iter()
        .find(|(_, t)| !t.iter().all(|v| v.is_finite()))
    {
        return Err(Error::invalid(format!(
            "parameter {name} contains non-finite values"
        )));
    }
    Ok(())
}
