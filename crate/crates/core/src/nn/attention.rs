use super::{Ctx, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;
use rand::Rng;

/// Query/key/value/output projections of one attention layer.
///
/// Each projection is `d×d` with a bias; `heads` must divide `d`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_out: Linear,
    pub heads: usize,
}

/// Multi-head self-attention over `[B, n, d]` tokens.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub weights: AttentionWeights,
    pub dim: usize,
}

impl Mhsa {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let weights = AttentionWeights {
            w_q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            w_k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            w_v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            w_out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        };
        Ok(Self { weights, dim })
    }

    pub fn num_params(&self) -> usize {
        let w = &self.weights;
        w.w_q.num_params() + w.w_k.num_params() + w.w_v.num_params() + w.w_out.num_params()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }

    /// Output tokens and the `[B, h, n, n]` attention probabilities.
    pub fn forward_with_weights<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Shape {
                op: "mhsa",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let h = self.weights.heads;
        let dh = d / h;
        // [B, n, d] -> [B·h, n, dh]
        let split = |v: Var<'t>| -> Result<Var<'t>> {
            v.reshape(&[b, n, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, n, dh])
        };
        let q = split(self.weights.w_q.forward(ctx, x)?)?;
        let k = split(self.weights.w_k.forward(ctx, x)?)?;
        let v = split(self.weights.w_v.forward(ctx, x)?)?;
        let scores = q.matmul(&k.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt());
        let probs = scores.softmax();
        let mixed = probs
            .matmul(&v)?
            .reshape(&[b, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, d])?;
        let out = self.weights.w_out.forward(ctx, &mixed)?;
        Ok((out, probs.reshape(&[b, h, n, n])?))
    }
}
