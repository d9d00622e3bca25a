use super::{Tape, Tensor, Var};
use crate::error::{contract_err, Result};

/// Analytic gradient of a scalar-valued tape function next to its
/// central-difference estimate, coordinate by coordinate.
pub fn gradient_errors<F>(f: F, x: &Tensor, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract_err!("gradcheck eps {eps} outside [1e-7, 1e-3]"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(contract_err!(
            "gradcheck function must return a scalar, got shape {:?}",
            tape.shape(y)
        ));
    }
    let analytic = tape.backward(y)?.get_or_zeros(xv, x.shape()).into_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.constant(Tensor::new(x.shape(), data)?);
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok((analytic, numeric))
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn fd_gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (analytic, numeric) = gradient_errors(f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}
