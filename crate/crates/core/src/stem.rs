//! Stem front-ends: component-string grammar, construction and forward pass.
//!
//! A stem is described by a string such as `3Conv+3BN+3ReLU+1Proj`: each item
//! is a count followed by a layer kind, joined by `+`. Items that share a run
//! (the part before or after the single `Proj`) are interleaved round by round,
//! so `3Conv+3BN+3ReLU+1Proj` expands to `(Conv, BN, ReLU) × 3, Proj`, and in
//! `3Conv+1Proj+1ReLU` the ReLU follows the projection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::Var;

/// Component strings covered by the ablation grids: the stem-component
/// sweep plus the GELU variant.
pub const TABLE_STEMS: [&str; 9] = [
    "3Conv+3BN+3ReLU+1Proj",
    "3Conv+3BN+1Proj",
    "3Conv+3ReLU+1Proj",
    "3Conv+1Proj",
    "3Conv+1Proj+1ReLU",
    "1Proj+1BN+1ReLU",
    "1Proj+1ReLU",
    "1Proj",
    "3Conv+3BN+3GELU+1Proj",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Bn,
    Relu,
    Gelu,
    Proj,
}

impl LayerKind {
    pub fn token(&self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::Bn => "BN",
            LayerKind::Relu => "ReLU",
            LayerKind::Gelu => "GELU",
            LayerKind::Proj => "Proj",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            LayerKind::Conv,
            LayerKind::Bn,
            LayerKind::Relu,
            LayerKind::Gelu,
            LayerKind::Proj,
        ]
        .into_iter()
        .find(|k| k.token() == s)
    }

    fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Proj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemItem {
    pub count: usize,
    pub kind: LayerKind,
}

/// Parsed stem description.
///
/// `kernels` and `strides` hold one entry per weighted layer (each `Conv` in
/// order, then the `Proj`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub items: Vec<StemItem>,
    pub layers: Vec<LayerKind>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
}

fn spec_err(spec: &str, reason: impl Into<String>) -> Error {
    Error::StemSpec {
        spec: spec.to_string(),
        reason: reason.into(),
    }
}

fn parse_items(spec: &str) -> Result<Vec<StemItem>> {
    if spec.trim().is_empty() {
        return Err(spec_err(spec, "empty"));
    }
    spec.split('+')
        .map(|raw| {
            let item = raw.trim();
            let digits = item.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return Err(spec_err(spec, format!("item {item:?} lacks a count")));
            }
            let count: usize = item[..digits]
                .parse()
                .map_err(|_| spec_err(spec, format!("bad count in {item:?}")))?;
            if count == 0 {
                return Err(spec_err(spec, format!("zero count in {item:?}")));
            }
            let kind = LayerKind::parse(&item[digits..])
                .ok_or_else(|| spec_err(spec, format!("unknown layer kind in {item:?}")))?;
            Ok(StemItem { count, kind })
        })
        .collect()
}

/// Round-robin expansion of one run of items.
fn interleave(run: &[StemItem]) -> Vec<LayerKind> {
    let rounds = run.iter().map(|i| i.count).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for item in run {
            if item.count > r {
                out.push(item.kind);
            }
        }
    }
    out
}

impl StemSpec {
    /// Parse a component string and attach strides, checking that they
    /// multiply to `patch_size`. Conv kernels default to 3 and the projection
    /// kernel to its stride.
    pub fn parse(spec: &str, strides: &[usize], patch_size: usize) -> Result<Self> {
        let items = parse_items(spec)?;
        let projs: usize = items
            .iter()
            .filter(|i| i.kind == LayerKind::Proj)
            .map(|i| i.count)
            .sum();
        if projs != 1 {
            return Err(spec_err(spec, format!("exactly one Proj required, found {projs}")));
        }
        let split = items.iter().position(|i| i.kind == LayerKind::Proj).unwrap();
        let mut layers = interleave(&items[..split]);
        layers.push(LayerKind::Proj);
        layers.extend(interleave(&items[split + 1..]));
        if let Some(pos) = layers.iter().position(LayerKind::has_weights) {
            if pos > 0 {
                return Err(spec_err(spec, "normalisation/activation before the first Conv"));
            }
        }
        let convs = layers.iter().filter(|k| **k == LayerKind::Conv).count();
        if strides.len() != convs + 1 {
            return Err(spec_err(
                spec,
                format!("{} strides given for {} weighted layers", strides.len(), convs + 1),
            ));
        }
        if strides.contains(&0) {
            return Err(spec_err(spec, "zero stride"));
        }
        let product: usize = strides.iter().product();
        if product != patch_size {
            return Err(spec_err(
                spec,
                format!("stride product {product} differs from patch size {patch_size}"),
            ));
        }
        let mut kernels = vec![3; convs];
        kernels.push(strides[convs]);
        Ok(Self {
            items,
            layers,
            kernels,
            strides: strides.to_vec(),
        })
    }

    pub fn with_kernels(mut self, kernels: &[usize]) -> Result<Self> {
        if kernels.len() != self.kernels.len() || kernels.contains(&0) {
            return Err(spec_err(
                &self.render(),
                format!(
                    "{} kernels given for {} weighted layers",
                    kernels.len(),
                    self.kernels.len()
                ),
            ));
        }
        self.kernels = kernels.to_vec();
        Ok(self)
    }

    /// The canonical component string.
    pub fn render(&self) -> String {
        self.items
            .iter()
            .map(|i| format!("{}{}", i.count, i.kind.token()))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn num_convs(&self) -> usize {
        self.layers.iter().filter(|k| **k == LayerKind::Conv).count()
    }

    pub fn is_patchify(&self) -> bool {
        self.num_convs() == 0
    }
}

impl fmt::Display for StemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Strides used by default: first conv stride 2, later convs stride 1, and
/// the projection covers the remaining factor of the patch size.
pub fn default_strides(spec: &str, patch_size: usize) -> Result<Vec<usize>> {
    let convs: usize = parse_items(spec)?
        .iter()
        .filter(|i| i.kind == LayerKind::Conv)
        .map(|i| i.count)
        .sum();
    if convs == 0 {
        return Ok(vec![patch_size]);
    }
    if patch_size % 2 != 0 {
        return Err(spec_err(spec, format!("patch size {patch_size} is odd")));
    }
    let mut s = vec![2];
    s.extend(std::iter::repeat_n(1, convs - 1));
    s.push(patch_size / 2);
    Ok(s)
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::parse(s).ok_or_else(|| Error::Config(format!("unknown layer kind {s:?}")))
    }
}

#[derive(Clone, Debug)]
enum StemLayer {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Relu,
    Gelu,
}

/// Patch tokens produced by a stem.
pub struct StemOutput<'t> {
    /// `[B, n, d]`.
    pub tokens: Var<'t>,
    /// Token grid `(rows, cols)`; `n = rows · cols`.
    pub grid: (usize, usize),
}

/// A built stem: image `[B, 3, H, W]` to tokens `[B, n, d]`.
#[derive(Clone, Debug)]
pub struct Stem {
    pub spec: StemSpec,
    pub image_size: usize,
    pub embed_dim: usize,
    pub grid: usize,
    layers: Vec<StemLayer>,
}

pub const IMAGE_CHANNELS: usize = 3;

impl Stem {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &StemSpec,
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        mid_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        let product: usize = spec.strides.iter().product();
        if product != patch_size {
            return Err(Error::Config(format!(
                "stride product {product} differs from patch size {patch_size}"
            )));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut channels = IMAGE_CHANNELS;
        let mut size = image_size;
        let mut weighted = 0;
        for (i, kind) in spec.layers.iter().enumerate() {
            let name = format!("stem.{i}");
            let layer = match kind {
                LayerKind::Conv | LayerKind::Proj => {
                    let (k, s) = (spec.kernels[weighted], spec.strides[weighted]);
                    weighted += 1;
                    let (out, padding) = if *kind == LayerKind::Conv {
                        (mid_channels, k / 2)
                    } else {
                        (embed_dim, k.saturating_sub(s) / 2)
                    };
                    let followed_by_bn = spec.layers.get(i + 1) == Some(&LayerKind::Bn);
                    let conv = Conv2d::new(store, &name, channels, out, k, s, padding, !followed_by_bn, rng);
                    size = conv.out_extent(size).ok_or_else(|| {
                        Error::Config(format!("kernel {k} larger than padded input {size} in {name}"))
                    })?;
                    channels = out;
                    StemLayer::Conv(conv)
                }
                LayerKind::Bn => StemLayer::Bn(BatchNorm2d::new(store, &name, channels)),
                LayerKind::Relu => StemLayer::Relu,
                LayerKind::Gelu => StemLayer::Gelu,
            };
            layers.push(layer);
        }
        let grid = image_size / patch_size;
        if size != grid {
            return Err(Error::Config(format!(
                "stem {} yields a {size}×{size} grid, expected {grid}×{grid}",
                spec.render()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            image_size,
            embed_dim,
            grid,
            layers,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                StemLayer::Conv(c) => c.num_params(),
                StemLayer::Bn(b) => b.num_params(),
                StemLayer::Relu | StemLayer::Gelu => 0,
            })
            .sum()
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, images: &Var<'t>) -> Result<StemOutput<'t>> {
        let shape = images.shape();
        let expected = [
            shape.first().copied().unwrap_or(0),
            IMAGE_CHANNELS,
            self.image_size,
            self.image_size,
        ];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(Error::Shape {
                op: "stem",
                lhs: shape,
                rhs: expected.to_vec(),
            });
        }
        let mut x = *images;
        for layer in &self.layers {
            x = match layer {
                StemLayer::Conv(c) => c.forward(ctx, &x)?,
                StemLayer::Bn(b) => b.forward(ctx, &x)?,
                StemLayer::Relu => x.relu(),
                StemLayer::Gelu => x.gelu(),
            };
        }
        let s = x.shape();
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = x.reshape(&[b, d, h * w])?.permute(&[0, 2, 1])?;
        Ok(StemOutput { tokens, grid: (h, w) })
    }
}

/// Prepend the class token and add positional embeddings.
///
/// `tokens` is `[B, n, d]`, `pos` is `[n + 1, d]`, `cls` is `[d]`.
pub fn add_pos_cls<'t>(tokens: &Var<'t>, pos: &Var<'t>, cls: &Var<'t>) -> Result<Var<'t>> {
    let ts = tokens.shape();
    let (ps, cs) = (pos.shape(), cls.shape());
    if ts.len() != 3 || ps != [ts[1] + 1, ts[2]] || cs != [ts[2]] {
        return Err(Error::Shape {
            op: "add_pos_cls",
            lhs: ts,
            rhs: ps,
        });
    }
    let (b, n, d) = (ts[0], ts[1], ts[2]);
    let cls = cls.reshape(&[1, 1, d])?.broadcast_to(&[b, 1, d])?;
    Var::concat(&[cls, *tokens], 1)?.add(&pos.reshape(&[1, n + 1, d])?)
}

/// Learned class token and positional table for a stem with `n` tokens.
#[derive(Clone, Debug)]
pub struct PosCls {
    pub pos: ParamId,
    pub cls: ParamId,
}

impl PosCls {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, tokens: usize, dim: usize, rng: &mut R) -> Self {
        use crate::nn::INIT_STD;
        use crate::tensor::Tensor;
        let pos = store.add(
            "pos_embed",
            Tensor::trunc_normal(&[tokens + 1, dim], INIT_STD, rng),
            false,
        );
        let cls = store.add("cls_token", Tensor::trunc_normal(&[dim], INIT_STD, rng), false);
        Self { pos, cls }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, tokens: &Var<'t>) -> Result<Var<'t>> {
        add_pos_cls(tokens, &ctx.var(self.pos), &ctx.var(self.cls))
    }
}
