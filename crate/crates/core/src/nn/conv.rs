use super::{Ctx, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Var;
use rand::Rng;

/// Square-kernel 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.weight(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            rng,
        );
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    /// Output extent along one spatial axis, if the kernel fits.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        (input + 2 * self.padding >= self.kernel).then(|| (input + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let bias = self.bias.map(|b| ctx.var(b));
        x.conv2d(&ctx.var(self.weight), bias.as_ref(), self.stride, self.padding)
    }
}
