//! Finite-difference verification of backward passes.

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

/// Central-difference step. Small enough for curvature, large enough to stay
/// above f64 rounding noise on O(1) values.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Relative tolerance used by the layer test suites.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Compares the analytic gradient of `build` against central differences for
/// every element of every input, returning the worst relative error
/// |a − n| / (max(|a|, |n|) + 1e-6).
///
/// `build` receives freshly constructed leaves holding (possibly perturbed)
/// copies of `inputs` and must return a scalar loss built from them.
pub fn gradcheck<F>(inputs: &[(Vec<f64>, Vec<usize>)], build: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let make = |datas: &[Vec<f64>]| -> Result<Vec<Tensor>> {
        datas
            .iter()
            .zip(inputs)
            .map(|(d, (_, shape))| Tensor::leaf(d.clone(), shape))
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();

    let leaves = make(&base)?;
    let loss = build(&leaves)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |datas: &[Vec<f64>]| -> Result<f64> {
        no_grad(|| {
            let leaves = make(datas)?;
            let loss = build(&leaves)?;
            Ok(loss.data()[0])
        })
    };

    let mut worst = 0.0f64;
    for (li, (data, _)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[li][ei] += GRADCHECK_EPS;
            let mut minus = base.clone();
            minus[li][ei] -= GRADCHECK_EPS;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * GRADCHECK_EPS);
            let a = analytic[li][ei];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Asserts that `gradcheck` stays within `GRADCHECK_TOL`, with a readable
/// failure message naming the op under test.
pub fn assert_grads_match<F>(name: &str, inputs: &[(Vec<f64>, Vec<usize>)], build: F)
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let worst = gradcheck(inputs, build)
        .unwrap_or_else(|e| panic!("gradcheck setup for {name} failed: {e}"));
    assert!(
        worst < GRADCHECK_TOL,
        "FAIL {name}: worst relative gradient error {worst:.3e} >= {GRADCHECK_TOL:.0e}"
    );
}
