//! Central finite-difference verification of analytic gradients.
//!
//! The checker perturbs a sample of coordinates per tensor (all of
//! them for small tensors) and compares the numeric slope against the
//! analytic gradient. It is library code rather than test-only code
//! because the acceptance suite drives it across every network.

use ndarray::IxDyn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamTree;

/// Outcome of a gradient check over one or more tensors.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor that absorbs finite-difference noise
/// when both slopes are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the scalar loss at a given parameter tree; `analytic`
/// maps tensor names to gradients of that same loss. For each named
/// tensor, up to `coords_per_tensor` coordinates are sampled (seeded,
/// so reruns check the same ones).
pub fn check_gradients(
    f: &mut dyn FnMut(&ParamTree) -> f64,
    params: &ParamTree,
    analytic: &ParamTree,
    coords_per_tensor: usize,
    step: f64,
    seed: u64,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    for (name, grad) in analytic {
        let tensor = params
            .get(name)
            .unwrap_or_else(|| panic!("analytic gradient for unknown tensor {name}"));
        assert_eq!(
            tensor.shape(),
            grad.shape(),
            "gradient shape mismatch for {name}"
        );
        let n = tensor.len();
        let picks: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_tensor).into_vec()
        };
        for flat in picks {
            let idx = flat_to_index(tensor.shape(), flat);
            let original = tensor[IxDyn(&idx)];
            work.get_mut(name).unwrap()[IxDyn(&idx)] = original + step;
            let plus = f(&work);
            work.get_mut(name).unwrap()[IxDyn(&idx)] = original - step;
            let minus = f(&work);
            work.get_mut(name).unwrap()[IxDyn(&idx)] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(grad[IxDyn(&idx)], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{name}{idx:?}: analytic {} vs numeric {numeric}",
                    grad[IxDyn(&idx)]
                );
            }
        }
    }
    report
}

fn flat_to_index(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}
