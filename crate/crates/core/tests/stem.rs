use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitstem::model::{Model, ModelConfig};
use vitstem::nn::{check_param_gradients, NormMode, ParamStore};
use vitstem::stem::{add_pos_cls, default_strides, LayerKind, Stem, StemSpec, TABLE_STEMS};
use vitstem::{Error, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn build(spec: &StemSpec, image: usize, patch: usize, embed: usize, mid: usize) -> (ParamStore, Stem) {
    let mut store = ParamStore::new();
    let stem = Stem::build(&mut store, spec, image, patch, embed, mid, &mut rng(1)).unwrap();
    (store, stem)
}

fn mean_cos(tokens: &[Vec<f64>]) -> f64 {
    let n = tokens.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dot: f64 = tokens[i].iter().zip(&tokens[j]).map(|(a, b)| a * b).sum();
                acc += dot / (norm(&tokens[i]) * norm(&tokens[j]));
            }
        }
    }
    acc / (n * (n - 1)) as f64
}

#[test]
fn parse_patchify_and_full_conv_stem() {
    let p = StemSpec::parse("1Proj", &[16], 16).unwrap();
    assert_eq!(p.layers, vec![LayerKind::Proj]);
    assert!(p.is_patchify());
    assert_eq!(p.kernels, vec![16]);

    let c = StemSpec::parse("3Conv+3BN+3ReLU+1Proj", &[2, 1, 1, 8], 16)
        .unwrap()
        .with_kernels(&[7, 3, 3, 8])
        .unwrap();
    use LayerKind::*;
    assert_eq!(c.layers, vec![Conv, Bn, Relu, Conv, Bn, Relu, Conv, Bn, Relu, Proj]);
    assert_eq!(c.strides, vec![2, 1, 1, 8]);
    assert_eq!(c.kernels, vec![7, 3, 3, 8]);
    assert_eq!(c.num_convs(), 3);
}

#[test]
fn parse_trailing_items_follow_projection() {
    use LayerKind::*;
    let s = StemSpec::parse("3Conv+1Proj+1ReLU", &[2, 1, 1, 8], 16).unwrap();
    assert_eq!(s.layers, vec![Conv, Conv, Conv, Proj, Relu]);
    let s = StemSpec::parse("1Proj+1BN+1ReLU", &[16], 16).unwrap();
    assert_eq!(s.layers, vec![Proj, Bn, Relu]);
    let s = StemSpec::parse("3Conv+3ReLU+1Proj", &[2, 1, 1, 8], 16).unwrap();
    assert_eq!(s.layers, vec![Conv, Relu, Conv, Relu, Conv, Relu, Proj]);
}

#[test]
fn parse_errors() {
    let bad: &[(&str, &[usize], usize)] = &[
        ("2Conv+2Proj", &[2, 1, 8], 16),
        ("3Conv+3BN", &[2, 1, 1], 4),
        ("", &[4], 4),
        ("Proj", &[4], 4),
        ("1Foo+1Proj", &[2, 2], 4),
        ("0Conv+1Proj", &[4], 4),
        ("1Proj", &[2, 2], 4),
        ("3Conv+1Proj", &[2, 1, 8], 16),
        ("3Conv+1Proj", &[2, 1, 1, 4], 16),
        ("1ReLU+1Conv+1Proj", &[2, 2], 4),
        ("1Conv+1Proj", &[0, 4], 4),
    ];
    for (spec, strides, patch) in bad {
        let err = StemSpec::parse(spec, strides, *patch).unwrap_err();
        assert!(matches!(err, Error::StemSpec { .. }), "{spec}: {err}");
    }
    let msg = StemSpec::parse("2Conv+2Proj", &[2, 1, 8], 16).unwrap_err().to_string();
    assert!(msg.contains("exactly one Proj"), "{msg}");
}

#[test]
fn table_strings_round_trip() {
    for s in TABLE_STEMS {
        let strides = default_strides(s, 16).unwrap();
        assert_eq!(StemSpec::parse(s, &strides, 16).unwrap().render(), s);
        assert_eq!(StemSpec::parse(s, &strides, 16).unwrap().to_string(), s);
    }
    assert_eq!(default_strides("3Conv+1Proj", 4).unwrap(), vec![2, 1, 1, 2]);
    assert_eq!(default_strides("1Proj+1ReLU", 4).unwrap(), vec![4]);
}

#[test]
fn token_counts() {
    let spec = StemSpec::parse("3Conv+3BN+3ReLU+1Proj", &[2, 1, 1, 2], 4)
        .unwrap()
        .with_kernels(&[3, 3, 3, 2])
        .unwrap();
    let (_, stem) = build(&spec, 32, 4, 16, 4);
    assert_eq!(stem.num_tokens(), 64);

    let imagenet = StemSpec::parse("3Conv+3BN+3ReLU+1Proj", &[2, 1, 1, 8], 16)
        .unwrap()
        .with_kernels(&[7, 3, 3, 8])
        .unwrap();
    let (_, stem) = build(&imagenet, 224, 16, 8, 2);
    assert_eq!(stem.num_tokens(), 196);

    let mut store = ParamStore::new();
    let p5 = StemSpec::parse("1Proj", &[5], 5).unwrap();
    assert!(matches!(
        Stem::build(&mut store, &p5, 32, 5, 8, 4, &mut rng(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn token_count_matches_stride_arithmetic_across_grids() {
    let strides_grid: [&[usize]; 3] = [&[2, 1, 1, 2], &[2, 2, 1, 1], &[1, 1, 2, 2]];
    for s in TABLE_STEMS {
        let options: Vec<Vec<usize>> = if s.contains("Conv") {
            strides_grid.iter().map(|v| v.to_vec()).collect()
        } else {
            vec![vec![4]]
        };
        for strides in options {
            let spec = StemSpec::parse(s, &strides, 4).unwrap();
            let (mut store, stem) = build(&spec, 16, 4, 8, 3);
            let tape = Tape::new();
            let mut ctx = store.bind(&tape, NormMode::TRAIN);
            let x = tape.leaf(uniform(&[2, 3, 16, 16], 2));
            let out = stem.forward(&mut ctx, &x).unwrap();
            let side = strides.iter().fold(16, |h, s| h / s);
            assert_eq!(out.grid, (side, side), "{s} {strides:?}");
            assert_eq!(out.tokens.shape(), vec![2, side * side, 8]);
        }
    }
}

#[test]
fn patchify_on_constant_image_gives_identical_tokens() {
    let spec = StemSpec::parse("1Proj", &[4], 4).unwrap();
    let (mut store, stem) = build(&spec, 16, 4, 8, 1);
    let tape = Tape::new();
    let mut ctx = store.bind(&tape, NormMode::Eval);
    let x = tape.leaf(Tensor::full(&[1, 3, 16, 16], 0.7));
    let tokens = stem.forward(&mut ctx, &x).unwrap().tokens.value();
    let rows: Vec<Vec<f64>> = (0..16).map(|i| tokens.data()[i * 8..(i + 1) * 8].to_vec()).collect();
    assert!(rows.iter().all(|r| r == &rows[0]));
    assert!((mean_cos(&rows) - 1.0).abs() < 1e-12);
}

#[test]
fn patchify_equals_unfold_then_matmul() {
    let (p, d, image) = (4, 6, 12);
    let spec = StemSpec::parse("1Proj", &[p], p).unwrap();
    let (mut store, stem) = build(&spec, image, p, d, 1);
    let bias = store.find("stem.0.bias").unwrap();
    *store.param_mut(bias) = uniform(&[d], 5);
    let w = store.params()[0].value.clone(); // [d, 3, p, p]
    let b = store.param(bias).clone();
    let x = uniform(&[2, 3, image, image], 3);
    let tape = Tape::new();
    let mut ctx = store.bind(&tape, NormMode::Eval);
    let got = stem.forward(&mut ctx, &tape.leaf(x.clone())).unwrap().tokens.value();

    let g = image / p;
    let plen = 3 * p * p;
    let wmat = w.reshape(&[d, plen]).unwrap().t().unwrap();
    for bi in 0..2 {
        let mut patches = Vec::with_capacity(g * g * plen);
        for gi in 0..g {
            for gj in 0..g {
                for c in 0..3 {
                    for u in 0..p {
                        for v in 0..p {
                            patches.push(x.at(&[bi, c, gi * p + u, gj * p + v]));
                        }
                    }
                }
            }
        }
        let want = Tensor::new(&[g * g, plen], patches).unwrap().matmul(&wmat).unwrap();
        for t in 0..g * g {
            for k in 0..d {
                let diff = got.at(&[bi, t, k]) - (want.at(&[t, k]) + b.data()[k]);
                assert!(diff.abs() < 1e-10);
            }
        }
    }
}

#[test]
fn conv_stem_gradient() {
    let spec = StemSpec::parse("3Conv+3BN+3ReLU+1Proj", &[2, 1, 1, 2], 4)
        .unwrap()
        .with_kernels(&[3, 3, 3, 2])
        .unwrap();
    let (mut store, stem) = build(&spec, 8, 4, 4, 3);
    for p in store.params_mut() {
        p.value = p.value.map(|v| 20.0 * v + 0.03);
    }
    let x = uniform(&[2, 3, 8, 8], 4);
    let checks = check_param_gradients(&mut store, &[x], NormMode::TRAIN, 1e-5, None, |ctx, v| {
        let t = stem.forward(ctx, &v[0])?.tokens;
        let w = Tensor::new(
            &t.shape(),
            (0..t.value().numel()).map(|i| (i % 7) as f64 - 3.0).collect(),
        )?;
        t.mul(&ctx.tape.leaf(w))?.sum_all()
    })
    .unwrap();
    for c in &checks {
        assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
    }
}

#[test]
fn conv_stem_adds_under_ten_percent_parameters_at_desk_scale() {
    let conv = ModelConfig::default();
    let patch = conv.patchify();
    let a = Model::build(&conv, 0).unwrap().num_params() as f64;
    let b = Model::build(&patch, 0).unwrap().num_params() as f64;
    assert!(a > b);
    assert!((a - b) / b < 0.10, "{a} vs {b}");
}

#[test]
fn add_pos_cls_examples() {
    let tape = Tape::new();
    let tokens = uniform(&[2, 3, 4], 1);
    let t = tape.leaf(tokens.clone());
    let out = add_pos_cls(&t, &tape.leaf(Tensor::zeros(&[4, 4])), &tape.leaf(Tensor::zeros(&[4]))).unwrap();
    let out = out.value();
    assert_eq!(out.shape(), &[2, 4, 4]);
    for b in 0..2 {
        for k in 0..4 {
            assert_eq!(out.at(&[b, 0, k]), 0.0);
        }
        for n in 0..3 {
            for k in 0..4 {
                assert_eq!(out.at(&[b, n + 1, k]), tokens.at(&[b, n, k]));
            }
        }
    }

    let bad = tape.leaf(Tensor::zeros(&[3, 4]));
    assert!(add_pos_cls(&t, &bad, &tape.leaf(Tensor::zeros(&[4]))).is_err());
}

#[test]
fn positional_rows_diversify_identical_tokens() {
    let tape = Tape::new();
    let row = [0.5, 1.0, -0.3, 0.8];
    let tokens = Tensor::new(&[1, 5, 4], row.repeat(5)).unwrap();
    let before: Vec<Vec<f64>> = (0..5).map(|_| row.to_vec()).collect();
    let pos = uniform(&[6, 4], 9).scale(0.5);
    let cls = uniform(&[4], 10);
    let out = add_pos_cls(&tape.leaf(tokens), &tape.leaf(pos), &tape.leaf(cls))
        .unwrap()
        .value();
    let after: Vec<Vec<f64>> = (1..6).map(|i| out.data()[i * 4..(i + 1) * 4].to_vec()).collect();
    assert!((mean_cos(&before) - 1.0).abs() < 1e-12);
    assert!(mean_cos(&after) < mean_cos(&before));
}
