//! Central-difference gradient verification.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare analytic gradients against central differences.
///
/// `build` must deterministically construct the same graph on every call,
/// returning the scalar loss node; `params` are registered as the first
/// leaves, in order. Returns the maximum relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over all
/// parameter elements. The absolute floor in the denominator absorbs
/// central-difference roundoff (≈ machine ε / step) on elements whose
/// true gradient is exactly zero, e.g. parameters a softmax is shift
/// invariant in. Runs in f64: pair with a step in [1e-6, 1e-3].
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone(), grad)).collect();
        let loss = build(&mut tape, &ids)?;
        if let Some((idx, op)) = tape.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value at graph node {idx} ({op})"
            )));
        }
        Ok((tape, loss))
    };

    let (tape, loss) = eval(params, true)?;
    let grads = tape.backward(loss)?;

    // leaves were registered first, ids 0..params.len()
    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(NodeId(pi))
            .ok_or_else(|| Error::Numeric(format!("no gradient for parameter {pi}")))?
            .clone();
        for e in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += step;
            let (tp, lp) = eval(&plus, false)?;
            let fp = tp.value(lp).item();

            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= step;
            let (tm, lm) = eval(&minus, false)?;
            let fm = tm.value(lm).item();

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-6);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
