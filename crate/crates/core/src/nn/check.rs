use super::{Ctx, NormMode, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Tape vs finite-difference gradient agreement for one named input or
/// parameter.
///
/// `rel_error` is `‖a − b‖ / max(‖a‖ + ‖b‖, GRAD_FLOOR)`: gradients that are
/// structurally zero (a key bias under softmax, a conv bias in front of batch
/// norm) would otherwise turn finite-difference round-off into a relative
/// error near 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
}

pub const GRAD_FLOOR: f64 = 1e-4;

/// Finite-difference check of a layer function against every input and
/// every parameter of `store`.
///
/// `f` must map the bound context and input variables to a scalar loss.
/// Batch-norm statistics are never updated while probing. When
/// `max_coords` is set, only that many evenly spaced coordinates per tensor
/// are probed.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    mode: NormMode,
    eps: f64,
    max_coords: Option<usize>,
    f: F,
) -> Result<Vec<GradCheck>>
where
    F: for<'a, 't> Fn(&mut Ctx<'a, 't>, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mode = match mode {
        NormMode::Train { .. } => NormMode::Train { update_stats: false },
        NormMode::Eval => NormMode::Eval,
    };
    let eval = |store: &mut ParamStore, xs: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let tape = Tape::new();
        let mut ctx = store.bind(&tape, mode);
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut ctx, &vars)?;
        let value = loss.value().item()?;
        if !grads {
            return Ok((value, Vec::new(), Vec::new()));
        }
        let g = tape.backward(loss)?;
        let gx = vars
            .iter()
            .map(|v| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect();
        Ok((value, gx, ctx.param_grads(&g)))
    };
    let (_, gx, gp) = eval(store, inputs, true)?;
    let coords = |n: usize| -> Vec<usize> {
        match max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        }
    };
    let compare = |analytic: &Tensor, numeric: Vec<f64>, idx: &[usize]| -> Result<f64> {
        let a: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        let (a, b) = (
            Tensor::from_parts(vec![a.len()], a),
            Tensor::from_parts(vec![numeric.len()], numeric),
        );
        let diff = a.zip_with(&b, |x, y| x - y)?.norm_l2();
        Ok(diff / (a.norm_l2() + b.norm_l2()).max(GRAD_FLOOR))
    };
    let mut out = Vec::new();
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let idx = coords(inputs[i].numel());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let plus = eval(store, &xs, false)?.0;
            xs[i].data_mut()[j] = orig - eps;
            let minus = eval(store, &xs, false)?.0;
            xs[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        out.push(GradCheck {
            name: format!("input{i}"),
            rel_error: compare(&gx[i], numeric, &idx)?,
            checked: idx.len(),
        });
    }
    for p in 0..store.params().len() {
        let idx = coords(store.params()[p].value.numel());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = store.params()[p].value.data()[j];
            store.params_mut()[p].value.data_mut()[j] = orig + eps;
            let plus = eval(store, inputs, false)?.0;
            store.params_mut()[p].value.data_mut()[j] = orig - eps;
            let minus = eval(store, inputs, false)?.0;
            store.params_mut()[p].value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        out.push(GradCheck {
            name: store.params()[p].name.clone(),
            rel_error: compare(&gp[p], numeric, &idx)?,
            checked: idx.len(),
        });
    }
    Ok(out)
}
