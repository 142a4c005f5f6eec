//! Central finite-difference gradient checking.
//!
//! Used by the test suites of every differentiable component. The numeric
//! side re-runs the forward closure on perturbed copies of the inputs and
//! never touches the reverse pass.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the analytic gradient
/// and the central-difference estimate, taken over all inputs together.
/// When both gradients vanish the absolute error is returned instead.
pub fn check_gradients<F>(inputs: &[Tensor], forward: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = forward(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| {
            if t.requires_grad() {
                tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()
            } else {
                Vec::new()
            }
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = forward(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::Contract("gradient check needs a scalar output".into()));
        }
        Ok(v[0])
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for ti in 0..work.len() {
        if !work[ti].requires_grad() {
            continue;
        }
        for j in 0..work[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient vectors differ in length");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
