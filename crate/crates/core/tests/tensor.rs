use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitstem::tensor::{check_gradients, finite_diff_grad, rel_error};
use vitstem::{Error, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_example() {
    let m = uniform(&[3, 4], 1);
    assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);

    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[0.0, 1.0]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);

    let tape = Tape::new();
    let c = tape.leaf(a.clone()).matmul(&tape.leaf(b)).unwrap();
    assert_eq!(c.value().data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let err = uniform(&[2, 3], 1).matmul(&uniform(&[4, 2], 2)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");

    let tape = Tape::new();
    let a = tape.leaf(uniform(&[2, 3], 1));
    let b = tape.leaf(uniform(&[4, 2], 2));
    assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let a = uniform(&[5, 7], 3);
    let b = uniform(&[7, 3], 4);
    let errs = check_gradients(&[a, b], |_, v| v[0].matmul(&v[1])?.sum_all(), 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn batched_matmul_gradients() {
    let a = uniform(&[2, 3, 4], 5);
    let b = uniform(&[2, 4, 5], 6);
    let shared = uniform(&[4, 2], 7);
    let errs = check_gradients(&[a.clone(), b], |_, v| v[0].matmul(&v[1]), 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    let errs = check_gradients(&[a, shared], |_, v| v[0].matmul(&v[1]), 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let x = tape.leaf(uniform(&[3, 2], 1));
    let z = tape.leaf(Tensor::zeros(&[3, 2]));
    assert_eq!(*x.add(&z).unwrap().value(), *x.value());

    let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let b = tape.leaf(t(&[3], &[2.0, 2.0, 2.0]));
    assert_eq!(a.mul(&b).unwrap().value().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn elementwise_errors() {
    let tape = Tape::new();
    let a = tape.leaf(uniform(&[2, 3], 1));
    let b = tape.leaf(uniform(&[4], 2));
    assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    let neg = tape.leaf(t(&[2], &[1.0, -1.0]));
    assert!(matches!(neg.log(), Err(Error::Domain { .. })));
    assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
}

#[test]
fn elementwise_gradients() {
    let x = uniform(&[4, 4], 11);
    let y = uniform(&[4, 4], 12).map(|v| v.abs() + 0.5);
    let pos = uniform(&[4, 4], 13).map(|v| v.abs() + 0.1);
    let tol = 1e-6;
    let checks: Vec<(&str, Vec<f64>)> = vec![
        (
            "exp",
            check_gradients(&[x.clone()], |_, v| Ok(v[0].exp()), 1e-5).unwrap(),
        ),
        (
            "add",
            check_gradients(&[x.clone(), y.clone()], |_, v| v[0].add(&v[1]), 1e-5).unwrap(),
        ),
        (
            "sub",
            check_gradients(&[x.clone(), y.clone()], |_, v| v[0].sub(&v[1]), 1e-5).unwrap(),
        ),
        (
            "mul",
            check_gradients(&[x.clone(), y.clone()], |_, v| v[0].mul(&v[1]), 1e-5).unwrap(),
        ),
        (
            "div",
            check_gradients(&[x.clone(), y.clone()], |_, v| v[0].div(&v[1]), 1e-5).unwrap(),
        ),
        (
            "max",
            check_gradients(&[x.clone(), y.clone()], |_, v| v[0].maximum(&v[1]), 1e-5).unwrap(),
        ),
        ("log", check_gradients(&[pos.clone()], |_, v| v[0].log(), 1e-5).unwrap()),
        (
            "sqrt",
            check_gradients(&[pos.clone()], |_, v| v[0].sqrt(), 1e-5).unwrap(),
        ),
        (
            "gelu",
            check_gradients(&[x.clone()], |_, v| Ok(v[0].gelu()), 1e-5).unwrap(),
        ),
        (
            "square",
            check_gradients(&[x.clone()], |_, v| v[0].square(), 1e-5).unwrap(),
        ),
    ];
    for (name, errs) in checks {
        assert!(errs.iter().all(|&e| e < tol), "{name}: {errs:?}");
    }
}

#[test]
fn broadcast_gradients() {
    let a = uniform(&[2, 3, 4], 1);
    let row = uniform(&[4], 2);
    let col = uniform(&[2, 1, 4], 3);
    let errs = check_gradients(&[a.clone(), row], |_, v| v[0].mul(&v[1]), 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    let errs = check_gradients(&[a, col], |_, v| v[0].div(&v[1].shift(3.0)), 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(x.sum_all().unwrap().value().item().unwrap(), 10.0);
    let c = tape.leaf(Tensor::full(&[3, 5], 2.5));
    assert_eq!(c.mean_all().unwrap().value().item().unwrap(), 2.5);
    assert_eq!(x.sum(&[0], false).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(x.max(&[1], false).unwrap().value().data(), &[2.0, 4.0]);
    assert!(matches!(x.sum(&[2], false), Err(Error::Axis { .. })));

    let y = uniform(&[3, 4, 2], 7);
    for axes in [&[0usize][..], &[1], &[2], &[0, 2]] {
        let errs = check_gradients(&[y.clone()], |_, v| v[0].mean(axes, true), 1e-5).unwrap();
        assert!(errs[0] < 1e-6, "{axes:?}: {errs:?}");
        let errs = check_gradients(&[y.clone()], |_, v| v[0].max(axes, false), 1e-5).unwrap();
        assert!(errs[0] < 1e-6, "{axes:?}: {errs:?}");
    }
}

#[test]
fn broadcast_add_sum_matches_naive_grid() {
    let shapes: &[(&[usize], &[usize])] = &[
        (&[4, 4, 4], &[4]),
        (&[4, 1, 3], &[2, 1]),
        (&[1, 4], &[3, 1]),
        (&[2, 3, 4], &[2, 1, 4]),
        (&[3], &[4, 2, 3]),
    ];
    for (i, (sa, sb)) in shapes.iter().enumerate() {
        let a = uniform(sa, 100 + i as u64);
        let b = uniform(sb, 200 + i as u64);
        let tape = Tape::new();
        let got = tape
            .leaf(a.clone())
            .add(&tape.leaf(b.clone()))
            .unwrap()
            .sum_all()
            .unwrap()
            .value()
            .item()
            .unwrap();

        // Naive: pad shapes to rank 3 and walk the full output grid.
        let pad = |s: &[usize]| {
            let mut p = vec![1; 3 - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let out: Vec<usize> = (0..3).map(|k| pa[k].max(pb[k])).collect();
        let mut want = 0.0;
        for i0 in 0..out[0] {
            for i1 in 0..out[1] {
                for i2 in 0..out[2] {
                    let ia = [i0 % pa[0], i1 % pa[1], i2 % pa[2]];
                    let ib = [i0 % pb[0], i1 % pb[1], i2 % pb[2]];
                    want += a.data()[(ia[0] * pa[1] + ia[1]) * pa[2] + ia[2]]
                        + b.data()[(ib[0] * pb[1] + ib[1]) * pb[2] + ib[2]];
                }
            }
        }
        assert!((got - want).abs() < 1e-12, "{sa:?}+{sb:?}: {got} vs {want}");
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let w = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]));
    let g = tape.backward(w.sum_all().unwrap()).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let w = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]));
    let unused = tape.leaf(t(&[2], &[5.0, 6.0]));
    let loss = w.mul(&w).unwrap().sum_all().unwrap().scale(0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.3, -1.0, 2.0]);
    assert!(g.get(unused).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let tape = Tape::new();
    let w = tape.leaf(uniform(&[3], 1));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    let other = Tape::new();
    let l = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_examples() {
    let x = uniform(&[2, 3], 9);
    let g = finite_diff_grad(|x| Ok(x.sum()), &x, 1e-5).unwrap();
    assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));

    let g = finite_diff_grad(|x| Ok(x.data()[0] * x.data()[0]), &Tensor::scalar(3.0), 1e-4).unwrap();
    assert!((g.item().unwrap() - 6.0).abs() < 1e-6);

    assert!(finite_diff_grad(|x| Ok(x.sum()), &x, 0.0).is_err());
}

#[test]
fn random_mlp_backward_matches_finite_differences() {
    let x = uniform(&[4, 5], 1);
    let w1 = uniform(&[5, 8], 2);
    let b1 = uniform(&[8], 3);
    let w2 = uniform(&[8, 3], 4);
    let errs = check_gradients(
        &[x, w1, b1, w2],
        |_, v| {
            let h = v[0].matmul(&v[1])?.add(&v[2])?.gelu();
            h.matmul(&v[3])?.log_softmax().mean_all()
        },
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
}

#[test]
fn shape_op_gradients() {
    let x = uniform(&[2, 3, 4], 21);
    let y = uniform(&[2, 2, 4], 22);
    let cases: Vec<Vec<f64>> = vec![
        check_gradients(&[x.clone()], |_, v| v[0].permute(&[2, 0, 1]), 1e-5).unwrap(),
        check_gradients(&[x.clone()], |_, v| v[0].reshape(&[6, 4]), 1e-5).unwrap(),
        check_gradients(&[x.clone()], |_, v| v[0].narrow(1, 1, 2), 1e-5).unwrap(),
        check_gradients(&[x.clone()], |_, v| v[0].transpose_last(), 1e-5).unwrap(),
        check_gradients(&[x.clone(), y], |_, v| Var::concat(&[v[0], v[1]], 1), 1e-5).unwrap(),
        check_gradients(&[uniform(&[3, 1], 23)], |_, v| v[0].broadcast_to(&[2, 3, 4]), 1e-5).unwrap(),
        check_gradients(&[x.clone()], |_, v| Ok(v[0].softmax()), 1e-5).unwrap(),
        check_gradients(&[x], |_, v| Ok(v[0].log_softmax()), 1e-5).unwrap(),
    ];
    for errs in cases {
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }
}

#[test]
fn conv2d_examples() {
    let tape = Tape::new();
    let x = uniform(&[2, 3, 5, 5], 1);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let y = tape.leaf(x.clone()).conv2d(&tape.leaf(w), None, 1, 0).unwrap();
    assert_eq!(*y.value(), x);

    let ones = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
    let k = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
    let y = ones.conv2d(&k, None, 2, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.value().item().unwrap(), 4.0);

    let big = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
    let small = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
    assert!(matches!(small.conv2d(&big, None, 1, 0), Err(Error::Shape { .. })));
}

#[test]
fn conv2d_matches_direct_loop() {
    let x = uniform(&[2, 3, 7, 6], 31);
    let w = uniform(&[4, 3, 3, 3], 32);
    let b = uniform(&[4], 33);
    let (stride, pad) = (2, 1);
    let tape = Tape::new();
    let y = tape
        .leaf(x.clone())
        .conv2d(&tape.leaf(w.clone()), Some(&tape.leaf(b.clone())), stride, pad)
        .unwrap();
    let y = y.value();
    let (oh, ow) = ((7 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1);
    assert_eq!(y.shape(), &[2, 4, oh, ow]);
    for n in 0..2 {
        for o in 0..4 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let s = (j * stride + kj) as isize - pad as isize;
                                if r >= 0 && s >= 0 && r < 7 && s < 6 {
                                    acc += x.at(&[n, c, r as usize, s as usize]) * w.at(&[o, c, ki, kj]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[n, o, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv2d_gradient() {
    let x = uniform(&[2, 3, 8, 8], 41);
    let w = uniform(&[4, 3, 3, 3], 42);
    let b = uniform(&[4], 43);
    let errs = check_gradients(&[x, w, b], |_, v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1), 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
}

#[test]
fn cross_entropy_examples_and_gradient() {
    let tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[3, 5]));
    let loss = logits.cross_entropy(&[0, 2, 4], 0.0).unwrap();
    assert!((loss.value().item().unwrap() - 5f64.ln()).abs() < 1e-12);

    let dominant = tape.leaf(t(&[1, 3], &[800.0, 0.0, -5.0]));
    let loss = dominant.cross_entropy(&[0], 0.0).unwrap().value().item().unwrap();
    assert!(loss.abs() < 1e-300 || loss == 0.0);

    assert!(matches!(logits.cross_entropy(&[0, 5, 1], 0.0), Err(Error::Contract(_))));

    let x = uniform(&[4, 6], 51).scale(3.0);
    let errs = check_gradients(&[x.clone()], |_, v| v[0].cross_entropy(&[1, 0, 5, 3], 0.0), 1e-5).unwrap();
    assert!(errs[0] < 1e-6, "{errs:?}");
    let errs = check_gradients(&[x], |_, v| v[0].cross_entropy(&[1, 0, 5, 3], 0.1), 1e-5).unwrap();
    assert!(errs[0] < 1e-6, "{errs:?}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(uniform(&[3, 4], 5));
        let w = tape.leaf(uniform(&[4, 4], 6));
        (*x.matmul(&w).unwrap().gelu().softmax().value()).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn tensor_constructor_contracts() {
    assert!(Tensor::new(&[2, 0], vec![]).is_err());
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::scalar(1.0).item().is_ok());
    assert!(Tensor::zeros(&[2]).item().is_err());
    let trunc = Tensor::trunc_normal(&[5000], 0.02, &mut rng(3));
    assert!(trunc.data().iter().all(|v| v.abs() <= 0.04));
    assert_eq!(rel_error(&trunc, &trunc).unwrap(), 0.0);
}
