//! Stem + pre-norm encoder + class-token head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Buffer, Ctx, Ffn, FfnVariant, LayerNorm, Linear, Mhsa, NormMode, Param, ParamStore};
use crate::stem::{PosCls, Stem, StemSpec};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem: String,
    pub strides: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<Vec<usize>>,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn: FfnVariant,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub mid_channels: usize,
}

impl Default for ModelConfig {
    /// Desk-scale conv-stem model on 32×32 inputs.
    fn default() -> Self {
        Self {
            stem: "3Conv+3BN+3ReLU+1Proj".into(),
            strides: vec![2, 1, 1, 2],
            kernels: Some(vec![3, 3, 3, 2]),
            image_size: 32,
            patch_size: 4,
            embed_dim: 192,
            depth: 6,
            heads: 3,
            ffn: FfnVariant::Mlp,
            ffn_ratio: 4,
            num_classes: 10,
            mid_channels: 64,
        }
    }
}

impl ModelConfig {
    /// Same architecture with the patchify stem.
    pub fn patchify(&self) -> Self {
        Self {
            stem: "1Proj".into(),
            strides: vec![self.patch_size],
            kernels: None,
            ..self.clone()
        }
    }

    pub fn stem_spec(&self) -> Result<StemSpec> {
        let spec = StemSpec::parse(&self.stem, &self.strides, self.patch_size)?;
        match &self.kernels {
            Some(k) => spec.with_kernels(k),
            None => Ok(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.embed_dim < 2 || self.mid_channels == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(
                "embed_dim ≥ 2, mid_channels ≥ 1, ffn_ratio ≥ 1 required".into(),
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        self.stem_spec().map(|_| ())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: Option<LayerNorm>,
    ffn: Ffn,
}

impl Block {
    fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let x = x.add(&self.attn.forward(ctx, &self.ln1.forward(ctx, x)?)?)?;
        let h = match &self.ln2 {
            Some(ln) => ln.forward(ctx, &x)?,
            None => x,
        };
        x.add(&self.ffn.forward(ctx, &h)?)
    }
}

/// One captured token matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub label: String,
    /// `[B, n', d]`.
    pub tokens: Tensor,
    /// Whether row 0 of every sample is the class token.
    pub has_cls: bool,
}

/// Token matrices captured during one forward pass: the stem output, the
/// tokens after positional embedding, and every encoder block output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub entries: Vec<TraceEntry>,
}

pub struct ForwardOutput<'t> {
    /// `[B, classes]`.
    pub logits: Var<'t>,
    pub trace: Option<LayerTrace>,
    /// Bound parameters, in store order.
    pub params: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: Stem,
    pos_cls: PosCls,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = config.stem_spec()?;
        let stem = Stem::build(
            &mut store,
            &spec,
            config.image_size,
            config.patch_size,
            config.embed_dim,
            config.mid_channels,
            &mut rng,
        )?;
        let d = config.embed_dim;
        let pos_cls = PosCls::new(&mut store, stem.num_tokens(), d, &mut rng);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = format!("blocks.{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), d),
                attn: Mhsa::new(&mut store, &format!("{name}.attn"), d, config.heads, &mut rng)?,
                ln2: config
                    .ffn
                    .pre_norm()
                    .then(|| LayerNorm::new(&mut store, &format!("{name}.ln2"), d)),
                ffn: Ffn::new(
                    &mut store,
                    &format!("{name}.ffn"),
                    d,
                    config.ffn_ratio,
                    config.ffn,
                    &mut rng,
                )?,
            });
        }
        let norm = LayerNorm::new(&mut store, "norm", d);
        let head = Linear::new(&mut store, "head", d, config.num_classes, true, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            stem,
            pos_cls,
            blocks,
            norm,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn stem_num_params(&self) -> usize {
        self.stem.num_params()
    }

    pub fn num_tokens(&self) -> usize {
        self.stem.num_tokens()
    }

    /// Full forward pass from images `[B, 3, H, W]`.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        images: &Tensor,
        mode: NormMode,
        capture: bool,
    ) -> Result<ForwardOutput<'t>> {
        let mut ctx = self.store.bind(tape, mode);
        let x = tape.leaf(images.clone());
        let (logits, trace) = forward_parts(
            &mut ctx,
            &self.stem,
            &self.pos_cls,
            &self.blocks,
            &self.norm,
            &self.head,
            &x,
            capture,
        )?;
        Ok(ForwardOutput {
            logits,
            trace,
            params: ctx.vars().to_vec(),
        })
    }

    /// Forward pass on an already bound context (the store must be this
    /// model's or share its layout).
    pub fn forward_ctx<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        images: &Var<'t>,
        capture: bool,
    ) -> Result<(Var<'t>, Option<LayerTrace>)> {
        forward_parts(
            ctx,
            &self.stem,
            &self.pos_cls,
            &self.blocks,
            &self.norm,
            &self.head,
            images,
            capture,
        )
    }

    /// Forward pass that starts from stem tokens `[B, n, d]` supplied as a
    /// tape variable, skipping the stem.
    pub fn forward_tokens<'t>(&mut self, tape: &'t Tape, tokens: &Tensor, mode: NormMode) -> Result<Var<'t>> {
        let mut ctx = self.store.bind(tape, mode);
        let t = tape.leaf(tokens.clone());
        let (logits, _) = encode(&mut ctx, &self.pos_cls, &self.blocks, &self.norm, &self.head, &t, false)?;
        Ok(logits)
    }

    /// Stem tokens only.
    pub fn stem_tokens(&mut self, images: &Tensor, mode: NormMode) -> Result<Tensor> {
        let tape = Tape::new();
        let mut ctx = self.store.bind(&tape, mode);
        let x = tape.leaf(images.clone());
        let out = self.stem.forward(&mut ctx, &x)?;
        let v = out.tokens.value();
        Ok((*v).clone())
    }

    /// Eval-mode logits and, when asked, the layer trace.
    pub fn predict(&mut self, images: &Tensor, capture: bool) -> Result<(Tensor, Option<LayerTrace>)> {
        let tape = Tape::new();
        let out = self.forward(&tape, images, NormMode::Eval, capture)?;
        let logits = (*out.logits.value()).clone();
        Ok((logits, out.trace))
    }

    /// Training-mode loss and the gradient of every parameter (store order).
    pub fn loss_and_grads(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        smoothing: f64,
        mode: NormMode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let out = self.forward(&tape, images, mode, false)?;
        let loss = out.logits.cross_entropy(labels, smoothing)?;
        let grads = tape.backward(loss)?;
        let value = loss.value().item()?;
        let gs = out
            .params
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect();
        Ok((value, gs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.store.params().to_vec(),
            buffers: self.store.buffers().to_vec(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Model::build(&ckpt.config, 0)?;
        let mut stored = ParamStore::new();
        for p in ckpt.params {
            stored.add(p.name, p.value, p.decay);
        }
        for b in ckpt.buffers {
            stored.add_buffer(b.name, b.value);
        }
        model.store.load_from(&stored)?;
        Ok(model)
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_parts<'t>(
    ctx: &mut Ctx<'_, 't>,
    stem: &Stem,
    pos_cls: &PosCls,
    blocks: &[Block],
    norm: &LayerNorm,
    head: &Linear,
    images: &Var<'t>,
    capture: bool,
) -> Result<(Var<'t>, Option<LayerTrace>)> {
    let tokens = stem.forward(ctx, images)?.tokens;
    encode(ctx, pos_cls, blocks, norm, head, &tokens, capture)
}

fn encode<'t>(
    ctx: &mut Ctx<'_, 't>,
    pos_cls: &PosCls,
    blocks: &[Block],
    norm: &LayerNorm,
    head: &Linear,
    tokens: &Var<'t>,
    capture: bool,
) -> Result<(Var<'t>, Option<LayerTrace>)> {
    let mut trace = capture.then(LayerTrace::default);
    let mut record = |label: String, v: &Var<'t>, has_cls: bool| {
        if let Some(t) = trace.as_mut() {
            t.entries.push(TraceEntry {
                label,
                tokens: (*v.value()).clone(),
                has_cls,
            });
        }
    };
    record("stem".into(), tokens, false);
    let mut x = pos_cls.forward(ctx, tokens)?;
    record("pos_embed".into(), &x, true);
    for (i, block) in blocks.iter().enumerate() {
        x = block.forward(ctx, &x)?;
        record(format!("block{}", i + 1), &x, true);
    }
    let x = norm.forward(ctx, &x)?;
    let d = x.shape()[2];
    let cls = x.narrow(1, 0, 1)?;
    let b = cls.shape()[0];
    let logits = head.forward(ctx, &cls.reshape(&[b, d])?)?;
    Ok((logits, trace))
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels, 0.0)
}

pub const CHECKPOINT_FORMAT: &str = "vitstem-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: a JSON object with the model config echoed alongside
/// every named parameter and running-statistics buffer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
}
