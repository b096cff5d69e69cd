//! Images as graphs: every pixel is a node, edges join 8-neighbours,
//! and graph-convolution layers propagate features over the symmetric
//! degree-normalised adjacency.
//!
//! Node index convention is row-major, `r = y * width + x`. The
//! adjacency has no self-loops; `build_adjacency_with` can add them for
//! ablation but nothing here defaults to it.

use std::io::Write;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Csr, Graph, Var};

/// An image lifted onto the pixel lattice graph.
#[derive(Debug, Clone)]
pub struct PixelGraph {
    pub height: usize,
    pub width: usize,
    /// One row per node, `height * width` rows of `channels` features.
    pub features: Array2<f64>,
    /// Raw 0/1 adjacency, symmetric with zero diagonal.
    pub adjacency: Rc<Csr>,
}

/// Weights of a single graph-convolution layer.
#[derive(Debug, Clone)]
pub struct GcLayerParams {
    pub weight: Array2<f64>,
    /// Rate used when this layer sits inside a training stack.
    pub dropout_rate: f64,
}

impl GcLayerParams {
    pub fn new(weight: Array2<f64>, dropout_rate: f64) -> Result<Self> {
        if !weight.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("GC layer weight contains non-finite values"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        Ok(GcLayerParams {
            weight,
            dropout_rate,
        })
    }
}

/// Degree-normalised propagation operator D^(-1/2) E D^(-1/2).
#[derive(Debug, Clone)]
pub struct NormalizedPropagation {
    pub a_hat: Rc<Csr>,
    /// Diagonal of D: per-node degree (row sums of E).
    pub degrees: Vec<f64>,
}

/// Activation applied after the propagation and weight product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Glu,
}

/// 8-neighbourhood adjacency of a `height` x `width` lattice.
pub fn build_adjacency(height: usize, width: usize) -> Result<Csr> {
    build_adjacency_with(height, width, false)
}

pub fn build_adjacency_with(height: usize, width: usize, add_self_loops: bool) -> Result<Csr> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "adjacency needs positive dimensions, got {height}x{width}"
        )));
    }
    let n = height * width;
    let mut triplets = Vec::with_capacity(n * 8);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let r = (y * width as isize + x) as usize;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || ny >= height as isize || nx < 0 || nx >= width as isize {
                        continue;
                    }
                    let c = (ny * width as isize + nx) as usize;
                    triplets.push((r, c, 1.0));
                }
            }
            if add_self_loops {
                triplets.push((r, r, 1.0));
            }
        }
    }
    Ok(Csr::from_triplets(n, n, triplets))
}

/// D and D^(-1/2) E D^(-1/2) for a symmetric adjacency.
pub fn degree_and_normalize(e: &Csr) -> Result<NormalizedPropagation> {
    if e.n_rows != e.n_cols {
        return Err(Error::invalid("adjacency must be square"));
    }
    let degrees: Vec<f64> = (0..e.n_rows).map(|r| e.row(r).1.iter().sum()).collect();
    if let Some(i) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::invalid(format!(
            "node {i} is isolated; the degree matrix is not invertible"
        )));
    }
    let mut triplets = Vec::with_capacity(e.nnz());
    for r in 0..e.n_rows {
        let (cols, vals) = e.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            triplets.push((r, c, v / (degrees[r] * degrees[c]).sqrt()));
        }
    }
    Ok(NormalizedPropagation {
        a_hat: Rc::new(Csr::from_triplets(e.n_rows, e.n_cols, triplets)),
        degrees,
    })
}

/// Lift an image onto the lattice graph; feature row `y * w + x` is the
/// pixel's channel vector.
pub fn image_to_graph(img: &Image) -> Result<PixelGraph> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let data = img.data();
    let mut features = Array2::<f64>::zeros((h * w, c));
    for y in 0..h {
        for x in 0..w {
            for ck in 0..c {
                features[[y * w + x, ck]] = data[[y, x, ck]];
            }
        }
    }
    Ok(PixelGraph {
        height: h,
        width: w,
        features,
        adjacency: Rc::new(build_adjacency(h, w)?),
    })
}

/// Gated linear unit over the feature axis: the first half of the
/// channels carries values, the second half gates them.
pub fn glu_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let f = *shape
        .last()
        .ok_or_else(|| Error::invalid("GLU input must have a feature axis"))?;
    if f % 2 != 0 {
        return Err(Error::invalid(format!(
            "GLU needs an even channel count, got {f}"
        )));
    }
    let axis = shape.len() - 1;
    let a = g.slice_axis_op(x, axis, 0, f / 2);
    let b = g.slice_axis_op(x, axis, f / 2, f / 2);
    let gate = g.sigmoid(b);
    Ok(g.mul(a, gate))
}

pub fn glu(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().into_dyn());
    let y = glu_graph(&mut g, xv)?;
    Ok(g.value(y)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

/// One graph convolution on the tape: activation(A_hat . H . W).
pub fn gc_layer_graph(
    g: &mut Graph,
    h: Var,
    prop: &NormalizedPropagation,
    weight: Var,
    activation: Activation,
) -> Result<Var> {
    let n = g.value(h).shape()[0];
    if n != prop.a_hat.n_rows {
        return Err(Error::invalid(format!(
            "feature matrix has {n} rows but the graph has {} nodes",
            prop.a_hat.n_rows
        )));
    }
    let f_in = g.value(h).shape()[1];
    let w_in = g.value(weight).shape()[0];
    if f_in != w_in {
        return Err(Error::invalid(format!(
            "feature width {f_in} does not match weight input {w_in}"
        )));
    }
    let agg = g.spmm_sym(Rc::clone(&prop.a_hat), h);
    let mixed = g.matmul(agg, weight);
    match activation {
        Activation::Identity => Ok(mixed),
        Activation::Glu => glu_graph(g, mixed),
    }
}

/// Evaluation-mode graph convolution on plain arrays.
pub fn gc_layer(
    h: &Array2<f64>,
    prop: &NormalizedPropagation,
    params: &GcLayerParams,
    activation: Activation,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let hv = g.leaf(h.clone().into_dyn());
    let wv = g.leaf(params.weight.clone().into_dyn());
    let y = gc_layer_graph(&mut g, hv, prop, wv, activation)?;
    Ok(g.value(y)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

/// Sequential GC layers with GLU activations on the tape. Dropout with
/// rate `dropout_between` separates consecutive layers in training
/// mode; evaluation mode never touches the random source.
#[allow(clippy::too_many_arguments)]
pub fn gcn_stack_graph(
    g: &mut Graph,
    h: Var,
    prop: &NormalizedPropagation,
    weights: &[Var],
    dropout_between: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if weights.is_empty() {
        return Err(Error::invalid("a GCN stack needs at least one layer"));
    }
    if !(0.0..1.0).contains(&dropout_between) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {dropout_between}"
        )));
    }
    let mut cur = h;
    for (i, &w) in weights.iter().enumerate() {
        if i > 0 && training && dropout_between > 0.0 {
            cur = g.dropout(cur, dropout_between, rng);
        }
        cur = gc_layer_graph(g, cur, prop, w, Activation::Glu)?;
    }
    Ok(cur)
}

/// Evaluation/training entry over a [`PixelGraph`].
pub fn gcn_stack(
    graph: &PixelGraph,
    layers: &[GcLayerParams],
    dropout_between: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let prop = degree_and_normalize(&graph.adjacency)?;
    let mut g = Graph::new();
    let h = g.leaf(graph.features.clone().into_dyn());
    let ws: Vec<Var> = layers
        .iter()
        .map(|l| g.leaf(l.weight.clone().into_dyn()))
        .collect();
    let out = gcn_stack_graph(&mut g, h, &prop, &ws, dropout_between, training, rng)?;
    Ok(g.value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

/// Debug dump: one `i j` line per undirected edge, i < j.
pub fn dump_edge_list(e: &Csr, out: &mut impl Write) -> Result<()> {
    for r in 0..e.n_rows {
        let (cols, _) = e.row(r);
        for &c in cols {
            if r < c {
                writeln!(out, "{r} {c}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: edge iff Chebyshev distance exactly 1.
    fn brute_adjacency(h: usize, w: usize) -> Array2<f64> {
        let n = h * w;
        let mut e = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let (yi, xi) = (i / w, i % w);
                let (yj, xj) = (j / w, j % w);
                let cheb = (yi as isize - yj as isize)
                    .abs()
                    .max((xi as isize - xj as isize).abs());
                if i != j && cheb == 1 {
                    e[[i, j]] = 1.0;
                }
            }
        }
        e
    }

    #[test]
    fn adjacency_matches_brute_force_up_to_six() {
        for h in 1..=6 {
            for w in 1..=6 {
                let got = build_adjacency(h, w).unwrap().to_dense();
                let want = brute_adjacency(h, w);
                assert_eq!(got, want, "mismatch at {h}x{w}");
            }
        }
    }

    #[test]
    fn one_by_two_has_a_single_edge() {
        let e = build_adjacency(1, 2).unwrap();
        assert_eq!(e.nnz(), 2, "one undirected edge stored as two entries");
        let d = e.to_dense();
        assert_eq!(d[[0, 1]], 1.0);
        assert_eq!(d[[1, 0]], 1.0);
        assert_eq!(d[[0, 0]], 0.0);
    }

    #[test]
    fn three_by_three_edge_count_and_degree_multiset() {
        let e = build_adjacency(3, 3).unwrap();
        assert_eq!(e.nnz(), 40, "20 undirected edges");
        let mut degrees: Vec<usize> = (0..9).map(|r| e.row(r).0.len()).collect();
        degrees.sort_unstable();
        assert_eq!(degrees, vec![3, 3, 3, 3, 5, 5, 5, 5, 8]);
    }

    #[test]
    fn self_loop_flag_adds_the_diagonal() {
        let e = build_adjacency_with(2, 2, true).unwrap();
        let d = e.to_dense();
        for i in 0..4 {
            assert_eq!(d[[i, i]], 1.0);
        }
        let plain = build_adjacency(2, 2).unwrap().to_dense();
        for i in 0..4 {
            assert_eq!(plain[[i, i]], 0.0);
        }
    }

    #[test]
    fn transposed_image_gives_permuted_adjacency() {
        let (h, w) = (3, 5);
        let e = build_adjacency(h, w).unwrap().to_dense();
        let et = build_adjacency(w, h).unwrap().to_dense();
        // Node (y, x) of the original maps to (x, y) of the transpose.
        let perm = |i: usize| {
            let (y, x) = (i / w, i % w);
            x * h + y
        };
        for i in 0..h * w {
            for j in 0..h * w {
                assert_eq!(e[[i, j]], et[[perm(i), perm(j)]]);
            }
        }
    }

    #[test]
    fn normalization_on_unit_degree_pair() {
        let e = build_adjacency(1, 2).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let d = prop.a_hat.to_dense();
        assert_eq!(d, arr2(&[[0.0, 1.0], [1.0, 0.0]]));
        assert_eq!(prop.degrees, vec![1.0, 1.0]);
    }

    #[test]
    fn normalization_on_path_of_three() {
        let e = build_adjacency(1, 3).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let d = prop.a_hat.to_dense();
        let v = 1.0 / 2.0f64.sqrt();
        assert!((d[[0, 1]] - v).abs() < 1e-15);
        assert!((d[[1, 0]] - v).abs() < 1e-15);
        assert!((d[[1, 2]] - v).abs() < 1e-15);
        assert_eq!(d[[0, 2]], 0.0);
    }

    #[test]
    fn normalization_rejects_isolated_nodes() {
        let e = Csr::from_triplets(3, 3, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        let err = degree_and_normalize(&e).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(msg) if msg.contains("isolated")));
    }

    #[test]
    fn normalized_rows_sum_to_one_on_regular_graph() {
        // Every node of a 2x2 lattice has degree 3.
        let e = build_adjacency(2, 2).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let d = prop.a_hat.to_dense();
        for r in d.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_keeps_sparsity_pattern_and_symmetry() {
        let e = build_adjacency(4, 5).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let de = e.to_dense();
        let da = prop.a_hat.to_dense();
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(de[[i, j]] == 0.0, da[[i, j]] == 0.0);
                assert!((da[[i, j]] - da[[j, i]]).abs() < 1e-15);
                if de[[i, j]] != 0.0 {
                    let expect = 1.0 / (prop.degrees[i] * prop.degrees[j]).sqrt();
                    assert!((da[[i, j]] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn image_to_graph_matches_indexing_contract() {
        let img = Image::from_fn(4, 4, 3, |y, x, c| {
            (y as f64 * 0.2 + x as f64 * 0.05 + c as f64 * 0.01).min(1.0)
        })
        .unwrap();
        let pg = image_to_graph(&img).unwrap();
        assert_eq!(pg.features.dim(), (16, 3));
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(pg.features[[y * 4 + x, c]], img.data()[[y, x, c]]);
                }
            }
        }
        let direct = build_adjacency(4, 4).unwrap();
        assert_eq!(*pg.adjacency, direct);
    }

    #[test]
    fn gc_layer_swaps_rows_on_the_two_node_graph() {
        let e = build_adjacency(1, 2).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let h = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let params = GcLayerParams::new(Array2::eye(2), 0.0).unwrap();
        let out = gc_layer(&h, &prop, &params, Activation::Identity).unwrap();
        assert_eq!(out, arr2(&[[3.0, 4.0], [1.0, 2.0]]));
    }

    #[test]
    fn gc_layer_zero_features_stay_zero_under_identity() {
        let e = build_adjacency(3, 3).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let h = Array2::<f64>::zeros((9, 4));
        let params = GcLayerParams::new(Array2::eye(4), 0.0).unwrap();
        let out = gc_layer(&h, &prop, &params, Activation::Identity).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gc_layer_matrix_form_equals_nodewise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = build_adjacency(3, 3).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let h = Array2::from_shape_fn((9, 4), |_| rng.gen::<f64>() - 0.5);
        let w = Array2::from_shape_fn((4, 5), |_| rng.gen::<f64>() - 0.5);
        let params = GcLayerParams::new(w.clone(), 0.0).unwrap();
        let got = gc_layer(&h, &prop, &params, Activation::Identity).unwrap();
        // Node-wise sum over neighbours with 1/sqrt(deg deg) weights.
        let de = e.to_dense();
        for i in 0..9 {
            let mut agg = ndarray::Array1::<f64>::zeros(4);
            for j in 0..9 {
                if de[[i, j]] != 0.0 {
                    let coef = 1.0 / (prop.degrees[i] * prop.degrees[j]).sqrt();
                    for f in 0..4 {
                        agg[f] += coef * h[[j, f]];
                    }
                }
            }
            let row = agg.dot(&w);
            for f in 0..5 {
                assert!(
                    (got[[i, f]] - row[f]).abs() < 1e-10,
                    "node {i} feature {f}: {} vs {}",
                    got[[i, f]],
                    row[f]
                );
            }
        }
    }

    #[test]
    fn gc_layer_rejects_shape_mismatches() {
        let e = build_adjacency(2, 2).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let params = GcLayerParams::new(Array2::eye(3), 0.0).unwrap();
        let wrong_rows = Array2::<f64>::zeros((5, 3));
        assert!(gc_layer(&wrong_rows, &prop, &params, Activation::Identity).is_err());
        let wrong_cols = Array2::<f64>::zeros((4, 2));
        assert!(gc_layer(&wrong_cols, &prop, &params, Activation::Identity).is_err());
    }

    proptest! {
        #[test]
        fn gc_layer_is_linear_in_features(
            seed in 0u64..1000,
            alpha in -2.0..2.0f64,
            beta in -2.0..2.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = build_adjacency(3, 4).unwrap();
            let prop = degree_and_normalize(&e).unwrap();
            let h1 = Array2::from_shape_fn((12, 3), |_| rng.gen::<f64>() - 0.5);
            let h2 = Array2::from_shape_fn((12, 3), |_| rng.gen::<f64>() - 0.5);
            let w = Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>() - 0.5);
            let params = GcLayerParams::new(w, 0.0).unwrap();
            let mixed = gc_layer(
                &(alpha * &h1 + beta * &h2),
                &prop,
                &params,
                Activation::Identity,
            )
            .unwrap();
            let separate = alpha
                * &gc_layer(&h1, &prop, &params, Activation::Identity).unwrap()
                + beta * &gc_layer(&h2, &prop, &params, Activation::Identity).unwrap();
            for (a, b) in mixed.iter().zip(separate.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn glu_gate_conventions() {
        // Gate half zero: sigmoid(0) = 0.5.
        let x = arr2(&[[2.0, 4.0, 0.0, 0.0], [-1.0, 3.0, 0.0, 0.0]]);
        let out = glu(&x).unwrap();
        assert_eq!(out, arr2(&[[1.0, 2.0], [-0.5, 1.5]]));
        // Saturating gate passes values through.
        let x = arr2(&[[2.0, -3.0, 20.0, 20.0]]);
        let out = glu(&x).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-8);
        assert!((out[[0, 1]] + 3.0).abs() < 1e-8);
        // Channel halving.
        let x = Array2::<f64>::zeros((3, 10));
        assert_eq!(glu(&x).unwrap().dim(), (3, 5));
        // Odd channel count is rejected.
        let x = Array2::<f64>::zeros((3, 5));
        assert!(matches!(glu(&x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn glu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = Array2::from_shape_fn((3, 6), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let run = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone().into_dyn());
            let y = glu_graph(&mut g, xv).unwrap();
            let sq = g.mul(y, y);
            let loss = g.mean_all(sq);
            (g.scalar(loss), g, xv, loss)
        };
        let (_, g, xv, loss) = run(&x0);
        let grads = g.backward(loss);
        let step = 1e-5;
        let mut worst = 0.0f64;
        for idx in [[0usize, 0usize], [1, 3], [2, 5], [0, 2]] {
            let ana = grads.wrt(xv).unwrap()[ndarray::IxDyn(&idx)];
            let mut xp = x0.clone();
            xp[idx] += step;
            let mut xm = x0.clone();
            xm[idx] -= step;
            let num = (run(&xp).0 - run(&xm).0) / (2.0 * step);
            worst = worst.max(crate::nn::check::rel_err(ana, num));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn stack_eval_mode_ignores_seed() {
        let img = Image::from_fn(4, 4, 3, |y, x, c| {
            ((y + 2 * x + c) % 5) as f64 / 5.0
        })
        .unwrap();
        let pg = image_to_graph(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let layers = vec![
            GcLayerParams::new(
                Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() - 0.5),
                0.4,
            )
            .unwrap(),
            GcLayerParams::new(
                Array2::from_shape_fn((2, 6), |_| rng.gen::<f64>() - 0.5),
                0.4,
            )
            .unwrap(),
        ];
        let a = gcn_stack(&pg, &layers, 0.4, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gcn_stack(&pg, &layers, 0.4, false, &mut ChaCha8Rng::seed_from_u64(999)).unwrap();
        assert_eq!(a, b);
        // Training mode with different seeds must differ.
        let c = gcn_stack(&pg, &layers, 0.4, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = gcn_stack(&pg, &layers, 0.4, true, &mut ChaCha8Rng::seed_from_u64(999)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn single_layer_stack_equals_gc_layer_with_glu() {
        let img = Image::from_fn(3, 3, 3, |y, x, c| ((y * 3 + x + c) % 7) as f64 / 7.0).unwrap();
        let pg = image_to_graph(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() - 0.5);
        let layer = GcLayerParams::new(w, 0.0).unwrap();
        let stack =
            gcn_stack(&pg, &[layer.clone()], 0.0, false, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        let prop = degree_and_normalize(&pg.adjacency).unwrap();
        let single = gc_layer(&pg.features, &prop, &layer, Activation::Glu).unwrap();
        assert_eq!(stack, single);
    }

    #[test]
    fn two_layer_stack_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let e = build_adjacency(4, 4).unwrap();
        let prop = degree_and_normalize(&e).unwrap();
        let h0 = Array2::from_shape_fn((16, 3), |_| rng.gen::<f64>());
        let w1 = Array2::from_shape_fn((3, 8), |_| rng.gen::<f64>() - 0.5);
        let w2 = Array2::from_shape_fn((4, 6), |_| rng.gen::<f64>() - 0.5);
        let run = |w1: &Array2<f64>, w2: &Array2<f64>| {
            let mut g = Graph::new();
            let hv = g.leaf(h0.clone().into_dyn());
            let w1v = g.leaf(w1.clone().into_dyn());
            let w2v = g.leaf(w2.clone().into_dyn());
            let out = gcn_stack_graph(
                &mut g,
                hv,
                &prop,
                &[w1v, w2v],
                0.0,
                false,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            (g.scalar(loss), g, w1v, w2v, loss)
        };
        let (_, g, w1v, w2v, loss) = run(&w1, &w2);
        let grads = g.backward(loss);
        let step = 1e-5;
        let mut worst = 0.0f64;
        for idx in [[0usize, 0usize], [2, 5], [1, 3]] {
            let ana = grads.wrt(w1v).unwrap()[ndarray::IxDyn(&idx)];
            let mut p = w1.clone();
            p[idx] += step;
            let mut m = w1.clone();
            m[idx] -= step;
            let num = (run(&p, &w2).0 - run(&m, &w2).0) / (2.0 * step);
            worst = worst.max(crate::nn::check::rel_err(ana, num));
        }
        for idx in [[0usize, 0usize], [3, 5], [2, 1]] {
            let ana = grads.wrt(w2v).unwrap()[ndarray::IxDyn(&idx)];
            let mut p = w2.clone();
            p[idx] += step;
            let mut m = w2.clone();
            m[idx] -= step;
            let num = (run(&w1, &p).0 - run(&w1, &m).0) / (2.0 * step);
            worst = worst.max(crate::nn::check::rel_err(ana, num));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn edge_list_dump_is_sorted_unique_pairs() {
        let e = build_adjacency(1, 3).unwrap();
        let mut buf = Vec::new();
        dump_edge_list(&e, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "0 1\n1 2\n");
    }

    #[test]
    fn gc_params_validation() {
        assert!(GcLayerParams::new(arr2(&[[f64::NAN]]), 0.0).is_err());
        assert!(GcLayerParams::new(arr2(&[[1.0]]), 1.0).is_err());
        assert!(GcLayerParams::new(arr2(&[[1.0]]), -0.1).is_err());
        assert!(GcLayerParams::new(arr2(&[[1.0]]), 0.4).is_ok());
    }
}
