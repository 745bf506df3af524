use super::{Ctx, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Var;
use rand::Rng;

/// `x·W + b` over the last axis, with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.weight(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&ctx.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(&ctx.var(b)),
            None => Ok(y),
        }
    }
}
