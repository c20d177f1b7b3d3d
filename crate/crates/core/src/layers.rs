//! Named-parameter layer helpers shared by the learned blocks.

use crate::tensor::{BoundParams, Result, Tape, Var};

pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// `conv2d` with `{name}.kernel` and `{name}.bias`.
pub(crate) fn conv(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.kernel"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

/// Affine map with `{name}.weight` (`in×out`) and `{name}.bias`.
pub(crate) fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.linear(x, w, b)
}
