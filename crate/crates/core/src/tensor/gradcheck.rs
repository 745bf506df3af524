use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both are zero.
pub fn rel_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.zip_with(b, |x, y| x - y)?.norm_l2();
    let scale = a.norm_l2() + b.norm_l2();
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

/// Compare tape gradients with central differences for every input of `f`.
///
/// Non-scalar outputs are contracted with a fixed, non-uniform weight tensor
/// so every output element contributes with a distinct coefficient. Returns
/// the relative error per input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let loss = contract(&out)?;
        let value = loss.value().item()?;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let gs = vars
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let mut probe = inputs.to_vec();
        let numeric = finite_diff_grad(
            |xi| {
                probe[i] = xi.clone();
                Ok(eval(&probe, false)?.0)
            },
            x,
            eps,
        )?;
        errors.push(rel_error(&analytic[i], &numeric)?);
    }
    Ok(errors)
}

fn contract<'t>(out: &Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    if shape.iter().product::<usize>() == 1 {
        return out.sum_all();
    }
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|i| 0.5 + ((i as f64) * 0.7548776662).fract()).collect();
    let w = out.tape().leaf(Tensor::from_parts(shape, weights));
    out.mul(&w)?.sum_all()
}
