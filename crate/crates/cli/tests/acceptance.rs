//! Acceptance suite: one PASS/FAIL line per criterion A1–A9.
//!
//! Exact criteria (gradients, identities, optimizer oracles, determinism,
//! the Conv1D/Linear equivalence) fail the process when they fail. The
//! directional training criteria (A3, A4, A5, A9's divergence clause) are
//! measured and reported at desk scale; a FAIL there is printed but does not
//! abort the suite.
//!
//! Desk scale: 2000 synthetic 32×32 images in 10 classes, 10 epochs, a
//! 3-block d=32 encoder, patch 8. Grid learning rates are the reference
//! values ×8 (5e-4 → 4e-3, 1e-3 → 8e-3, 1e-4 → 8e-4) and warmups 5 → 2,
//! 20 → 5 epochs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitstem::model::{cross_entropy_loss, Model, ModelConfig};
use vitstem::nn::{
    check_param_gradients, layernorm, BatchNorm2d, Conv2d, Ffn, FfnVariant, GradCheck, LayerNorm, Linear, Mhsa,
    NormMode, Param, ParamStore,
};
use vitstem::tensor::check_gradients;
use vitstem::train::{AdamW, Objective, Optimizer, RunReport, Sam, Sgd};
use vitstem::{Tape, Tensor, Var};
use vitstem_cli::config::parse_config_str;
use vitstem_cli::sweep::{run_sweep, SweepOutcome};
use vitstem_cli::verify::{self, Theorem1Params, Theorem2Params};

const FULL: &str = "3Conv+3BN+3ReLU+1Proj";
const HIGH_LR: f64 = 8e-3;
const BASE_LR: f64 = 4e-3;
const DESK_WARMUP: usize = 2;
const LONG_WARMUP: usize = 5;
const CLASSES: usize = 10;

struct Outcome {
    id: &'static str,
    pass: bool,
    /// Exact criteria abort the suite on failure.
    exact: bool,
    detail: String,
}

fn report(o: &Outcome) {
    let kind = if o.exact { "" } else { " (directional)" };
    println!("{} {}{kind}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- A1

/// Worst relative error per tolerance class.
#[derive(Default)]
struct GradTally {
    elementwise: (f64, String),
    composite: (f64, String),
    checks: usize,
}

impl GradTally {
    fn add(&mut self, name: &str, elementwise: bool, errs: impl IntoIterator<Item = f64>) {
        let slot = if elementwise {
            &mut self.elementwise
        } else {
            &mut self.composite
        };
        for e in errs {
            self.checks += 1;
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > slot.0 {
                *slot = (e, name.to_string());
            }
        }
    }

    fn add_checks(&mut self, name: &str, checks: &[GradCheck]) {
        for c in checks {
            self.add(&format!("{name}/{}", c.name), false, [c.rel_error]);
        }
    }
}

fn op_grads<F>(t: &mut GradTally, name: &str, elementwise: bool, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> vitstem::Result<Var<'t>>,
{
    match check_gradients(inputs, f, 1e-5) {
        Ok(errs) => t.add(name, elementwise, errs),
        Err(e) => t.add(&format!("{name} ({e})"), elementwise, [f64::INFINITY]),
    }
}

fn param_grads<F>(
    t: &mut GradTally,
    name: &str,
    store: &mut ParamStore,
    x: Tensor,
    mode: NormMode,
    coords: Option<usize>,
    f: F,
) where
    F: for<'a, 't> Fn(&mut vitstem::nn::Ctx<'a, 't>, &[Var<'t>]) -> vitstem::Result<Var<'t>>,
{
    match check_param_gradients(store, &[x], mode, 1e-5, coords, f) {
        Ok(c) => t.add_checks(name, &c),
        Err(e) => t.add(&format!("{name} ({e})"), false, [f64::INFINITY]),
    }
}

fn probe<'t>(y: &Var<'t>) -> vitstem::Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
    y.mul(&y.tape().leaf(w))?.sum_all()
}

/// Central differences are meaningless across a kink, so inputs of piecewise
/// ops are kept at least `KINK_MARGIN` away from theirs.
const KINK_MARGIN: f64 = 1e-3;

fn off_kink(t: &Tensor, kink: &Tensor) -> Tensor {
    let mut out = t.clone();
    for (v, k) in out.data_mut().iter_mut().zip(kink.data()) {
        if (*v - k).abs() < KINK_MARGIN {
            *v = k + if *v >= *k { KINK_MARGIN } else { -KINK_MARGIN };
        }
    }
    out
}

fn grad_seed(t: &mut GradTally, seed: u64) {
    let mut r = rng(seed);
    let mut u = |shape: &[usize]| Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
    let (a, b) = (u(&[3, 4]), u(&[3, 4]));
    let pos = u(&[3, 4]).map(|v| 1.25 + 0.75 * v);
    let (alpha, beta) = (u(&[1]).data()[0], 2.0 * u(&[1]).data()[0]);
    let zeros = Tensor::zeros(&[3, 4]);
    let a_relu = off_kink(&a, &zeros);
    let a_srelu = off_kink(&a, &zeros.map(|_| -alpha));
    let b_max = off_kink(&b, &a);

    // Elementwise.
    let ab = [a.clone(), b.clone()];
    op_grads(t, "add", true, &ab, |_, v| v[0].add(&v[1]));
    op_grads(t, "sub", true, &ab, |_, v| v[0].sub(&v[1]));
    op_grads(t, "mul", true, &ab, |_, v| v[0].mul(&v[1]));
    op_grads(t, "div", true, &[a.clone(), pos.clone()], |_, v| v[0].div(&v[1]));
    op_grads(t, "maximum", true, &[a.clone(), b_max], |_, v| v[0].maximum(&v[1]));
    op_grads(t, "neg", true, &ab[..1], |_, v| Ok(v[0].neg()));
    op_grads(t, "exp", true, &ab[..1], |_, v| Ok(v[0].exp()));
    op_grads(t, "log", true, std::slice::from_ref(&pos), |_, v| v[0].log());
    op_grads(t, "sqrt", true, std::slice::from_ref(&pos), |_, v| v[0].sqrt());
    op_grads(t, "relu", true, std::slice::from_ref(&a_relu), |_, v| Ok(v[0].relu()));
    op_grads(t, "gelu", true, &ab[..1], |_, v| Ok(v[0].gelu()));
    op_grads(t, "scale", true, &ab[..1], |_, v| Ok(v[0].scale(-1.7)));
    op_grads(t, "shift", true, &ab[..1], |_, v| Ok(v[0].shift(0.3)));
    op_grads(t, "square", true, &ab[..1], |_, v| v[0].square());
    op_grads(t, "scaled_relu", true, std::slice::from_ref(&a_srelu), move |_, v| {
        Ok(v[0].scaled_relu(alpha, beta))
    });

    // Broadcasting, reductions, shape ops.
    let x3 = u(&[2, 3, 4]);
    op_grads(t, "broadcast_add", false, &[x3.clone(), u(&[4])], |_, v| {
        v[0].add(&v[1])
    });
    op_grads(t, "broadcast_mul", false, &[x3.clone(), u(&[3, 1])], |_, v| {
        v[0].mul(&v[1])
    });
    op_grads(t, "broadcast_to", false, &[u(&[1, 4])], |_, v| {
        v[0].broadcast_to(&[3, 4])
    });
    op_grads(t, "sum", false, std::slice::from_ref(&x3), |_, v| v[0].sum(&[1], false));
    op_grads(t, "sum_all", false, std::slice::from_ref(&x3), |_, v| v[0].sum_all());
    op_grads(t, "mean", false, std::slice::from_ref(&x3), |_, v| {
        v[0].mean(&[0, 2], true)
    });
    op_grads(t, "mean_all", false, std::slice::from_ref(&x3), |_, v| v[0].mean_all());
    op_grads(t, "max", false, std::slice::from_ref(&x3), |_, v| v[0].max(&[2], false));
    op_grads(t, "matmul", false, &[u(&[3, 4]), u(&[4, 5])], |_, v| v[0].matmul(&v[1]));
    op_grads(t, "batched_matmul", false, &[x3.clone(), u(&[2, 4, 2])], |_, v| {
        v[0].matmul(&v[1])
    });
    op_grads(t, "reshape", false, std::slice::from_ref(&x3), |_, v| {
        v[0].reshape(&[6, 4])
    });
    op_grads(t, "permute", false, std::slice::from_ref(&x3), |_, v| {
        v[0].permute(&[2, 0, 1])
    });
    op_grads(t, "transpose_last", false, std::slice::from_ref(&x3), |_, v| {
        v[0].transpose_last()
    });
    op_grads(t, "concat", false, &[x3.clone(), u(&[2, 2, 4])], |_, v| {
        Var::concat(&v[..2], 1)
    });
    op_grads(t, "narrow", false, std::slice::from_ref(&x3), |_, v| {
        v[0].narrow(1, 1, 2)
    });
    op_grads(
        t,
        "softmax",
        false,
        std::slice::from_ref(&x3),
        |_, v| Ok(v[0].softmax()),
    );
    op_grads(t, "log_softmax", false, std::slice::from_ref(&x3), |_, v| {
        Ok(v[0].log_softmax())
    });
    let labels = [2usize, 0, 4];
    op_grads(t, "cross_entropy", false, &[u(&[3, 5]).scale(3.0)], move |_, v| {
        v[0].cross_entropy(&labels, 0.1)
    });
    let img = u(&[2, 3, 6, 6]);
    op_grads(t, "conv2d", false, &[img.clone(), u(&[4, 3, 3, 3]), u(&[4])], |_, v| {
        v[0].conv2d(&v[1], Some(&v[2]), 2, 1)
    });
    op_grads(t, "conv2d_nobias", false, &[img.clone(), u(&[2, 3, 2, 2])], |_, v| {
        v[0].conv2d(&v[1], None, 2, 0)
    });
    op_grads(t, "layernorm", false, &[x3.clone(), u(&[4]), u(&[4])], |_, v| {
        layernorm(&v[0], &v[1], &v[2], 1e-6)
    });

    // Layers with parameters.
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut r);
    param_grads(t, "linear", &mut store, x3.clone(), NormMode::Eval, None, |c, v| {
        probe(&lin.forward(c, &v[0])?)
    });
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, 2, 1, true, &mut r);
    param_grads(t, "conv", &mut store, img.clone(), NormMode::Eval, None, |c, v| {
        probe(&conv.forward(c, &v[0])?)
    });
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3);
    *store.param_mut(bn.gamma) = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut r);
    *store.param_mut(bn.bias) = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut r);
    param_grads(
        t,
        "batchnorm",
        &mut store,
        img.clone(),
        NormMode::TRAIN,
        None,
        |c, v| probe(&bn.forward(c, &v[0])?),
    );
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4);
    param_grads(
        t,
        "layernorm_layer",
        &mut store,
        x3.clone(),
        NormMode::Eval,
        None,
        |c, v| probe(&ln.forward(c, &v[0])?),
    );
    let tokens = Tensor::rand_uniform(&[2, 5, 8], -1.0, 1.0, &mut r);
    let mut store = ParamStore::new();
    let attn = Mhsa::new(&mut store, "attn", 8, 2, &mut r).expect("valid heads");
    param_grads(t, "mhsa", &mut store, tokens.clone(), NormMode::Eval, None, |c, v| {
        probe(&attn.forward(c, &v[0])?)
    });
    for variant in FfnVariant::ALL {
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, "ffn", 8, 2, variant, &mut r).expect("valid ffn");
        param_grads(
            t,
            &format!("ffn:{variant}"),
            &mut store,
            tokens.clone(),
            NormMode::TRAIN,
            None,
            |c, v| probe(&ffn.forward(c, &v[0])?),
        );
    }

    // Whole conv-stem model, reduced width.
    let small = ModelConfig {
        stem: FULL.into(),
        strides: vec![2, 1, 1, 2],
        kernels: Some(vec![3, 3, 3, 2]),
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        ffn: FfnVariant::Mlp,
        ffn_ratio: 2,
        num_classes: 3,
        mid_channels: 4,
    };
    model_grads(t, "vit_c(reduced)", &small, seed, 2, Some(6));
}

fn model_grads(t: &mut GradTally, name: &str, cfg: &ModelConfig, seed: u64, batch: usize, coords: Option<usize>) {
    let mut model = Model::build(cfg, seed).expect("valid model");
    let x = Tensor::rand_uniform(
        &[batch, 3, cfg.image_size, cfg.image_size],
        -1.0,
        1.0,
        &mut rng(seed + 7),
    );
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let m = model.clone();
    param_grads(t, name, &mut model.store, x, NormMode::TRAIN, coords, |c, v| {
        let logits = m.forward_ctx(c, &v[0], false)?.0;
        cross_entropy_loss(&logits, &labels)
    });
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut t = GradTally::default();
    for seed in 0..100 {
        grad_seed(&mut t, seed);
    }
    // The desk configuration itself, probing a few coordinates per tensor.
    let desk_seeds = 3;
    for seed in 0..desk_seeds {
        model_grads(&mut t, "vit_c(desk)", &ModelConfig::default(), seed, 2, Some(1));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = t.elementwise.0 < 1e-6 && t.composite.0 < 1e-4;
    Outcome {
        id: "A1",
        pass,
        exact: true,
        detail: format!(
            "{} checks over 100 seeds (+{desk_seeds} desk-model seeds); worst elementwise {:.2e} ({}) < 1e-6, \
             worst other {:.2e} ({}) < 1e-4; {secs:.0}s",
            t.checks, t.elementwise.0, t.elementwise.1, t.composite.0, t.composite.1
        ),
    }
}

// ---------------------------------------------------------------- A2, A6

fn a2() -> Outcome {
    let start = Instant::now();
    let rep = verify::theorem1(&Theorem1Params::default()).expect("theorem1 suite runs");
    let secs = start.elapsed().as_secs_f64();
    let details: Vec<String> = rep
        .predicates
        .iter()
        .map(|p| format!("{}: {}", p.name, p.detail))
        .collect();
    Outcome {
        id: "A2",
        pass: verify::all_hold(&rep.predicates) && secs < 60.0,
        exact: true,
        detail: format!("{}; {secs:.1}s", details.join("; ")),
    }
}

fn a6() -> Outcome {
    let start = Instant::now();
    let rep = verify::theorem2(&Theorem2Params::default()).expect("theorem2 suite runs");
    let secs = start.elapsed().as_secs_f64();
    let m = &rep.moments;
    let analytic_ok = (m.analytic_mu - 0.25).abs() < 1e-15 && (m.analytic_sigma2 - 5.0 / 48.0).abs() < 1e-15;
    let details: Vec<String> = rep
        .predicates
        .iter()
        .map(|p| format!("{}: {}", p.name, p.detail))
        .collect();
    Outcome {
        id: "A6",
        pass: verify::all_hold(&rep.predicates) && analytic_ok && secs < 300.0,
        exact: true,
        detail: format!("{}; analytic (1/4, 5/48) {analytic_ok}; {secs:.1}s", details.join("; ")),
    }
}

// ---------------------------------------------------------------- A7

struct Quad {
    params: Vec<Param>,
    c: Vec<f64>,
}

impl Quad {
    fn new(w: &[f64], c: &[f64]) -> Self {
        Self {
            params: vec![Param {
                name: "w".into(),
                value: Tensor::new(&[w.len()], w.to_vec()).unwrap(),
                decay: true,
            }],
            c: c.to_vec(),
        }
    }
}

impl Objective for Quad {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Σ c_k w_k²/2 + Σ w_k⁴/4.
    fn loss_and_grads(&mut self, _first: bool) -> vitstem::Result<(f64, Vec<Tensor>)> {
        let w = self.params[0].value.data();
        let loss = w
            .iter()
            .zip(&self.c)
            .map(|(x, c)| c * x * x / 2.0 + x.powi(4) / 4.0)
            .sum();
        let g: Vec<f64> = w.iter().zip(&self.c).map(|(x, c)| c * x + x.powi(3)).collect();
        Ok((loss, vec![Tensor::new(&[g.len()], g)?]))
    }
}

fn a7() -> Outcome {
    // AdamW, first step on w=1, g=1, lr=0.1, decay 0.01: m̂ = v̂ = 1.
    let mut p = vec![Param {
        name: "w".into(),
        value: Tensor::new(&[1], vec![1.0]).unwrap(),
        decay: true,
    }];
    AdamW::new(0.01)
        .step(&mut p, &[Tensor::new(&[1], vec![1.0]).unwrap()], 0.1)
        .unwrap();
    let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01;
    let adam_err = (p[0].value.data()[0] - want).abs();

    // SAM on f = w²/2 from w = 2, ρ = 0.1, SGD lr 0.1: g = 2, ŵ = 2.1, w ← 2 − 0.21.
    struct Half(Vec<Param>);
    impl Objective for Half {
        fn params(&self) -> &[Param] {
            &self.0
        }
        fn params_mut(&mut self) -> &mut [Param] {
            &mut self.0
        }
        fn loss_and_grads(&mut self, _first: bool) -> vitstem::Result<(f64, Vec<Tensor>)> {
            let w = self.0[0].value.data()[0];
            Ok((w * w / 2.0, vec![Tensor::new(&[1], vec![w])?]))
        }
    }
    let mut obj = Half(vec![Param {
        name: "w".into(),
        value: Tensor::new(&[1], vec![2.0]).unwrap(),
        decay: true,
    }]);
    Sam::new(0.1, Sgd::default()).step(&mut obj, 0.1).unwrap();
    let sam_err = (obj.0[0].value.data()[0] - 1.79).abs();

    let (mut a, mut b) = (
        Quad::new(&[0.7, -1.3, 0.2], &[1.0, 3.0, 0.5]),
        Quad::new(&[0.7, -1.3, 0.2], &[1.0, 3.0, 0.5]),
    );
    let mut sam = Sam::new(0.0, AdamW::new(0.05));
    let mut base = AdamW::new(0.05);
    let mut bitwise = true;
    for _ in 0..100 {
        sam.step(&mut a, 0.01).unwrap();
        let (_, g) = b.loss_and_grads(true).unwrap();
        base.step(&mut b.params, &g, 0.01).unwrap();
        bitwise &= a.params[0].value.data() == b.params[0].value.data();
    }
    Outcome {
        id: "A7",
        pass: adam_err < 1e-10 && sam_err < 1e-10 && bitwise,
        exact: true,
        detail: format!(
            "AdamW first step error {adam_err:.1e}; SAM quadratic error {sam_err:.1e}; \
             SAM(ρ=0) ≡ AdamW bitwise over 100 steps: {bitwise}"
        ),
    }
}

// ---------------------------------------------------------------- desk sweeps

fn desk_config(name: &str, out: &Path, seeds: &str, tail: &str) -> String {
    format!(
        r#"
name = "{name}"
out_dir = "{}"
seeds = {seeds}
checkpoints = [2, 5]

[model]
stem = "{FULL}"
strides = [2, 2, 1, 2]
kernels = [3, 3, 3, 2]
image_size = 32
patch_size = 8
embed_dim = 32
depth = 3
heads = 2
ffn = "mlp"
ffn_ratio = 2
num_classes = {CLASSES}
mid_channels = 16

[train]
lr = {HIGH_LR}
warmup_epochs = {DESK_WARMUP}
total_epochs = 10
batch_size = 64
dataset = "synth:7:2000:{CLASSES}"
min_lr = 8e-6
probe_batch = 32
{tail}
"#,
        out.display()
    )
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn sweep(text: &str) -> SweepOutcome {
    let cfg = parse_config_str(text).expect("acceptance config is valid");
    let start = Instant::now();
    let out = run_sweep(&cfg, jobs()).expect("sweep runs");
    eprintln!(
        "  sweep {}: {} runs in {:.0}s",
        cfg.name,
        out.summary.runs,
        start.elapsed().as_secs_f64()
    );
    out
}

/// Reports of one grid point, by seed order.
fn runs<'a>(o: &'a SweepOutcome, stem: &str, lr: f64, warmup: usize) -> Vec<&'a RunReport> {
    o.table()
        .rows
        .iter()
        .zip(&o.reports)
        .filter(|(r, _)| r.point.stem == stem && r.point.lr == lr && r.point.warmup == warmup)
        .map(|(_, rep)| rep.as_ref().expect("run completed without error"))
        .collect()
}

/// Final accuracy with diverged runs scored at chance.
fn scored(r: &RunReport) -> f64 {
    r.final_top1.unwrap_or(1.0 / CLASSES as f64)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_runs(rs: &[&RunReport]) -> String {
    rs.iter()
        .map(|r| r.final_top1.map_or("crash".into(), |v| format!("{v:.3}")))
        .collect::<Vec<_>>()
        .join("/")
}

fn a3(grid: &SweepOutcome) -> Outcome {
    let conv = runs(grid, FULL, HIGH_LR, DESK_WARMUP);
    let patch = runs(grid, "1Proj", HIGH_LR, DESK_WARMUP);
    let all_patch_diverged = patch.iter().all(|r| r.diverged);
    let gap = mean(conv.iter().map(|r| scored(r))) - mean(patch.iter().map(|r| scored(r)));
    let stability = all_patch_diverged || gap >= 0.02;

    let mut conv_crashes = Vec::new();
    for (row, rep) in grid.table().rows.iter().zip(&grid.reports) {
        if row.point.stem == FULL && row.point.warmup >= DESK_WARMUP && rep.as_ref().is_none_or(|r| r.diverged) {
            conv_crashes.push(format!("{} s{}", row.point, row.seed));
        }
    }
    Outcome {
        id: "A3",
        pass: stability && conv_crashes.is_empty(),
        exact: false,
        detail: format!(
            "at lr {HIGH_LR}, warmup {DESK_WARMUP}: patchify {} vs conv {} (mean gap {:.3}, need patchify all \
             diverged or gap ≥ 0.02); conv-stem divergences at warmup ≥ {DESK_WARMUP}: {}",
            fmt_runs(&patch),
            fmt_runs(&conv),
            gap,
            if conv_crashes.is_empty() {
                "none".to_string()
            } else {
                conv_crashes.join(", ")
            }
        ),
    }
}

struct AblationRow {
    label: String,
    stem: String,
    reports: Vec<RunReport>,
}

impl AblationRow {
    /// A row is a crash when most of its seeds diverged.
    fn crashed(&self) -> bool {
        2 * self.reports.iter().filter(|r| r.diverged).count() > self.reports.len()
    }

    fn mean_top1(&self) -> f64 {
        mean(self.reports.iter().filter_map(|r| r.final_top1))
    }
}

fn a4(grid: &SweepOutcome, ablation: &SweepOutcome) -> Outcome {
    let mut rows = Vec::new();
    let take = |o: &SweepOutcome, stem: &str, lr: f64, wm: usize| -> Vec<RunReport> {
        runs(o, stem, lr, wm).into_iter().cloned().collect()
    };
    let component_rows = [
        FULL,
        "3Conv+3BN+1Proj",
        "3Conv+3ReLU+1Proj",
        "3Conv+1Proj",
        "3Conv+1Proj+1ReLU",
        "1Proj+1BN+1ReLU",
        "1Proj+1ReLU",
        "1Proj",
    ];
    for stem in component_rows {
        let src = if stem == FULL || stem == "1Proj" {
            grid
        } else {
            ablation
        };
        rows.push(AblationRow {
            label: format!("{stem} wm{DESK_WARMUP}"),
            stem: stem.into(),
            reports: take(src, stem, HIGH_LR, DESK_WARMUP),
        });
        if stem == "3Conv+1Proj" {
            rows.push(AblationRow {
                label: format!("{stem} wm{LONG_WARMUP}"),
                stem: stem.into(),
                reports: take(ablation, stem, HIGH_LR, LONG_WARMUP),
            });
        }
    }
    rows.push(AblationRow {
        label: format!("1Proj baseline lr {BASE_LR}"),
        stem: "1Proj".into(),
        reports: take(grid, "1Proj", BASE_LR, DESK_WARMUP),
    });
    assert_eq!(rows.len(), 10);

    let mut live: Vec<&AblationRow> = rows.iter().filter(|r| !r.crashed()).collect();
    live.sort_by(|a, b| b.mean_top1().total_cmp(&a.mean_top1()));
    let full_first = live
        .first()
        .is_some_and(|r| r.stem == FULL && r.label.ends_with(&format!("wm{DESK_WARMUP}")));
    let bare = &rows[3];
    let bare_ok = bare.crashed() || live.last().is_some_and(|r| std::ptr::eq(*r, bare));
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            let acc: Vec<&RunReport> = r.reports.iter().collect();
            if r.crashed() {
                format!("{} crash [{}]", r.label, fmt_runs(&acc))
            } else {
                format!("{} {:.3} [{}]", r.label, r.mean_top1(), fmt_runs(&acc))
            }
        })
        .collect();
    Outcome {
        id: "A4",
        pass: full_first && bare_ok,
        exact: false,
        detail: format!(
            "full spec first among non-crashed rows: {full_first} (top: {}); 3Conv+1Proj at warmup {DESK_WARMUP} \
             crashes or ranks last: {bare_ok}; rows: {}",
            live.first().map_or("none".into(), |r| r.label.clone()),
            table.join("; ")
        ),
    }
}

/// Mean cosine similarity over the first third of the final profile.
fn early_cos(r: &RunReport) -> Option<f64> {
    if r.diverged {
        return None;
    }
    let snap = r.diversity.last()?;
    let v = snap.profile.values();
    let k = v.len().div_ceil(3);
    Some(mean(v[..k].iter().copied()))
}

/// Diversity needs trained models, so these runs keep the non-finite and
/// explosion clauses but never stop early for chance-level accuracy.
fn a5(dir: &Path) -> Outcome {
    let trained = sweep(&desk_config(
        "diversity",
        &dir.join("diversity"),
        "[0, 1, 2]",
        &format!(
            "\n[train.divergence]\nafter_fraction = 2.0\n\n[sweep]\nstems = [\"1Proj\", \"{FULL}\"]\nlrs = [{BASE_LR}]\n"
        ),
    ));
    let conv = runs(&trained, FULL, BASE_LR, DESK_WARMUP);
    let patch = runs(&trained, "1Proj", BASE_LR, DESK_WARMUP);
    let mut gaps = Vec::new();
    let mut per_seed = Vec::new();
    for (c, p) in conv.iter().zip(&patch) {
        match (early_cos(c), early_cos(p)) {
            (Some(cv), Some(pv)) => {
                gaps.push(pv - cv);
                per_seed.push(format!("conv {cv:.3} vs patchify {pv:.3}"));
            }
            _ => per_seed.push("diverged".into()),
        }
    }
    let complete = gaps.len() == conv.len();
    let gap = if gaps.is_empty() {
        f64::NAN
    } else {
        mean(gaps.iter().copied())
    };
    let labels = conv
        .first()
        .and_then(|r| r.diversity.last())
        .map(|s| s.profile.entries.iter().map(|e| e.label.clone()).collect::<Vec<_>>())
        .unwrap_or_default();
    Outcome {
        id: "A5",
        pass: complete && gap >= 0.05,
        exact: false,
        detail: format!(
            "lr {BASE_LR}, warmup {DESK_WARMUP}, trained to completion; first third of {labels:?}: {}; mean gap \
             {gap:.3} (need ≥ 0.05)",
            per_seed.join(", ")
        ),
    }
}

fn a8(dir: &Path, grid: &SweepOutcome) -> Outcome {
    let read = |p: PathBuf| std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    // A fresh two-stem sweep run twice, serially and on all workers.
    let mut outputs = Vec::new();
    for (k, jobs) in [(0, 1), (1, jobs().max(2))] {
        let out = dir.join(format!("a8-{k}"));
        let text = desk_config(
            "a8",
            &out,
            "[0, 1]",
            &format!("\n[sweep]\nstems = [\"1Proj\", \"{FULL}\"]\n"),
        )
        .replace("total_epochs = 10", "total_epochs = 3")
        .replace("warmup_epochs = 2", "warmup_epochs = 1")
        .replace("synth:7:2000", "synth:7:400");
        let cfg = parse_config_str(&text).unwrap();
        let res = run_sweep(&cfg, jobs).unwrap();
        let reports: Vec<String> = res
            .reports
            .iter()
            .map(|r| serde_json::to_string(&r.as_ref().unwrap().metrics_only()).unwrap())
            .collect();
        outputs.push((read(out.join("table.csv")), read(out.join("summary.json")), reports));
    }
    let fresh_equal = outputs[0] == outputs[1];

    // Two rows of the main grid, re-run from their own configs.
    let mut reruns_equal = true;
    let picks = [0usize, grid.reports.len() - 1];
    let ds = vitstem::train::load_dataset(&grid.reports[0].as_ref().unwrap().train.dataset).unwrap();
    for &i in &picks {
        let orig = grid.reports[i].as_ref().unwrap();
        let (_, again) = vitstem::train::train_on(&ds, &orig.model, &orig.train).unwrap();
        reruns_equal &= again.metrics_only() == orig.metrics_only();
    }
    Outcome {
        id: "A8",
        pass: fresh_equal && reruns_equal,
        exact: true,
        detail: format!(
            "sweep re-run (1 vs {} workers) tables, summary and reports identical: {fresh_equal}; \
             grid rows {picks:?} re-trained bit-identically: {reruns_equal}",
            jobs().max(2)
        ),
    }
}

fn conv1d_matches_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dim = r.random_range(2..10);
    let ratio = r.random_range(1..4);
    let mut lin_store = ParamStore::new();
    let lin = Ffn::new(&mut lin_store, "f", dim, ratio, FfnVariant::Mlp, &mut r).unwrap();
    let mut conv_store = ParamStore::new();
    let conv = Ffn::new(&mut conv_store, "f", dim, ratio, FfnVariant::Conv1dGelu, &mut r).unwrap();
    for i in 0..lin_store.params().len() {
        let src = lin_store.params()[i].value.map(|v| 3.0 * v + 0.05);
        lin_store.params_mut()[i].value = src.clone();
        conv_store.params_mut()[i].value = if src.rank() == 2 {
            let (a, b) = (src.shape()[0], src.shape()[1]);
            src.t().unwrap().reshape(&[b, a, 1, 1]).unwrap()
        } else {
            src
        };
    }
    let x = Tensor::rand_uniform(&[3, 7, dim], -2.0, 2.0, &mut r);
    let tape = Tape::new();
    let mut ctx = lin_store.bind(&tape, NormMode::Eval);
    let a = lin.forward(&mut ctx, &tape.leaf(x.clone())).unwrap().value();
    let mut ctx = conv_store.bind(&tape, NormMode::Eval);
    let b = conv.forward(&mut ctx, &tape.leaf(x)).unwrap().value();
    a.max_abs_diff(&b).unwrap()
}

fn a9(noln: &SweepOutcome) -> (Outcome, Outcome) {
    let equiv = (0..100).map(conv1d_matches_linear).fold(0.0, f64::max);
    let reps: Vec<&RunReport> = noln.reports.iter().map(|r| r.as_ref().unwrap()).collect();
    let steps_per_epoch = 1800usize.div_ceil(64);
    let limit = (0.2 * (10 * steps_per_epoch) as f64) as usize;
    let early: Vec<String> = reps
        .iter()
        .map(|r| match r.diverged_step {
            Some(s) => format!("diverged at step {s}"),
            None => format!("no divergence (final {:.3})", r.final_top1.unwrap_or(f64::NAN)),
        })
        .collect();
    let pass = reps.iter().all(|r| r.diverged_step.is_some_and(|s| s < limit));
    (
        Outcome {
            id: "A9",
            pass,
            exact: false,
            detail: format!(
                "no-layernorm FFN, conv stem, lr {HIGH_LR}, warmup {DESK_WARMUP}: {} (need divergence before step \
                 {limit} of {} in every seed)",
                early.join(", "),
                10 * steps_per_epoch
            ),
        },
        Outcome {
            id: "A9",
            pass: equiv <= 1e-12,
            exact: true,
            detail: format!("kernel-1 Conv1D FFN equals the Linear FFN: max |Δ| {equiv:.2e} ≤ 1e-12 over 100 seeds"),
        },
    )
}

fn main() {
    let start = Instant::now();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    println!("acceptance: {} worker(s), artifacts in {}", jobs(), dir.display());

    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    emit(a1());
    emit(a2());

    let grid = sweep(&desk_config(
        "stability",
        &dir.join("stability"),
        "[0, 1, 2]",
        &format!(
            "\n[sweep]\nstems = [\"1Proj\", \"{FULL}\"]\nlrs = [8e-4, {BASE_LR}, {HIGH_LR}]\nwarmups = [0, {DESK_WARMUP}, {LONG_WARMUP}]\n"
        ),
    ));
    emit(a3(&grid));

    let mut points = String::new();
    for stem in [
        "3Conv+3BN+1Proj",
        "3Conv+3ReLU+1Proj",
        "3Conv+1Proj",
        "3Conv+1Proj+1ReLU",
        "1Proj+1BN+1ReLU",
        "1Proj+1ReLU",
    ] {
        points += &format!("\n[[points]]\nstem = \"{stem}\"\n");
    }
    points += &format!("\n[[points]]\nstem = \"3Conv+1Proj\"\nwarmup = {LONG_WARMUP}\n");
    let ablation = sweep(&desk_config(
        "components",
        &dir.join("components"),
        "[0, 1, 2]",
        &points,
    ));
    emit(a4(&grid, &ablation));
    emit(a5(&dir));
    emit(a6());
    emit(a7());
    emit(a8(&dir, &grid));

    let noln = sweep(
        &desk_config("encoder", &dir.join("encoder"), "[0, 1, 2]", "")
            .replace("ffn = \"mlp\"", "ffn = \"no-layernorm\""),
    );
    let (directional, exact) = a9(&noln);
    emit(directional);
    emit(exact);

    println!("\nsummary ({:.0}s):", start.elapsed().as_secs_f64());
    for o in &outcomes {
        report(o);
    }
    let hard_failures: Vec<&str> = outcomes.iter().filter(|o| o.exact && !o.pass).map(|o| o.id).collect();
    if !hard_failures.is_empty() {
        eprintln!("exact criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
