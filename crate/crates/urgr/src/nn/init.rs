//! Deterministic parameter initialisation. Every draw comes from the
//! caller's ChaCha stream, so a seed fixes the full parameter tree
//! across platforms.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};

/// Kaiming-style uniform draw with bound sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    assert!(fan_in > 0, "kaiming_uniform: zero fan-in");
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 * bound - bound)
}

/// Uniform draw in [-bound, bound].
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 * bound - bound)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Fan-in of a conv weight shaped `(c_out, c_in, kh, kw)`.
pub fn conv_fan_in(shape: &[usize]) -> usize {
    assert_eq!(shape.len(), 4, "conv weights are 4-D");
    shape[1] * shape[2] * shape[3]
}

/// Initialise a full parameter tree from a shape layout, keyed by name
/// suffix: `.w` draws Kaiming-uniform (conv fan-in for 4-D, leading
/// dim for 2-D), `.pos` draws a small uniform, `.gamma` and
/// `.running_var` start at one, everything else (biases, betas,
/// running means) at zero. Iteration follows sorted name order with
/// one ChaCha stream, so a seed fixes every tensor.
pub fn from_shapes(
    shapes: &std::collections::BTreeMap<String, Vec<usize>>,
    seed: u64,
) -> super::ParamTree {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = super::ParamTree::new();
    for (name, shape) in shapes {
        let tensor = if name.ends_with(".w") {
            let fan_in = if shape.len() == 4 {
                conv_fan_in(shape)
            } else {
                shape[0]
            };
            kaiming_uniform(&mut rng, shape, fan_in)
        } else if name.ends_with(".pos") {
            uniform(&mut rng, shape, 0.02)
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            ones(shape)
        } else {
            zeros(shape)
        };
        params.insert(name.clone(), tensor);
    }
    params
}
