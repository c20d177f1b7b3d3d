use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every input element.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub elements: usize,
}

/// Reduces a non-scalar output to a scalar with a fixed random projection,
/// so the check covers the whole Jacobian rather than only its column sums.
fn scalarize(tape: &mut Tape, y: Var) -> Result<Var> {
    if tape.value(y).is_scalar() {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj = Tensor::from_fn(tape.shape(y), |_| rng.gen_range(-1.0..1.0));
    let proj = tape.constant(proj);
    let prod = tape.mul(y, proj)?;
    tape.sum(prod)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, y)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds its output on the supplied tape from the input handles. Every
/// element of every input is perturbed, so keep inputs small.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, y)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_element: 0, elements: 0 };
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst_input = i;
                report.worst_element = j;
            }
            report.elements += 1;
        }
    }
    Ok(report)
}
