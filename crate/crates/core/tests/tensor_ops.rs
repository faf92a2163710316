//! Operator oracles: naive-loop forward references and finite-difference
//! gradient checks in double precision.

use advxfer_core::tensor::{
    finite_diff_check, BatchNormConfig, BnMode, Graph, RunningStats, Result, Tensor, TensorError,
    Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let v = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), v).unwrap()
}

/// Direct 6-nested-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.values()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.values()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

/// `sum(out * probe)` so every output coordinate contributes to the gradient.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = g.leaf(random(g.value(out).dims(), seed));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

#[test]
fn conv_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 1, 4, 4], 1.0));
    let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.value(y).dims(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).values(), &[9.0; 4]);
}

#[test]
fn conv_output_shape() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8]));
    let w = g.leaf(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(g.value(y).dims(), &[1, 4, 4, 4]);
}

#[test]
fn conv_channel_mismatch_names_axes() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8]));
    let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3]));
    match g.conv2d(x, w, 1, 1) {
        Err(TensorError::DimensionMismatch { axes, .. }) => {
            assert!(axes.contains("axis 1"), "{axes}")
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv_matches_naive_loop() {
    let x = random(&[1, 2, 5, 5], 1);
    let w = random(&[3, 2, 3, 3], 2);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let y = g.conv2d(xv, wv, 1, 0).unwrap();
    assert!(max_rel(g.value(y).values(), &naive_conv(&x, &w, 1, 0)) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn conv_matches_naive_on_random_shapes(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let x = random(&[n, c, h, w], seed);
        let wt = random(&[o, c, k, k], seed ^ 0xabc);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(wt.clone());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        prop_assert!(max_rel(g.value(y).values(), &naive_conv(&x, &wt, stride, pad)) < 1e-6);
    }

    #[test]
    fn cross_entropy_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 4), shift in -50.0f64..50.0, label in 0usize..4) {
        let ce = |vals: &[f64]| {
            let mut g = Graph::<f64>::new();
            let z = g.leaf(Tensor::from_f64(&[1, 4], vals).unwrap());
            let l = g.softmax_cross_entropy(z, &[label]).unwrap();
            g.value(l).values()[0]
        };
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let (a, b) = (ce(&logits), ce(&shifted));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn conv_gradients() {
    let x = random(&[2, 2, 5, 5], 3);
    let w = random(&[3, 2, 3, 3], 4);
    let wc = w.clone();
    let check = finite_diff_check(
        |g, x| {
            let wv = g.leaf(wc.clone());
            let y = g.conv2d(x, wv, 2, 1)?;
            probe(g, y, 5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "input: {check:?}");
    let check = finite_diff_check(
        |g, w| {
            let xv = g.leaf(x.clone());
            let y = g.conv2d(xv, w, 2, 1)?;
            probe(g, y, 5)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "weight: {check:?}");
}

fn bn_forward(
    g: &mut Graph<f64>,
    x: Var,
    gamma: &Tensor<f64>,
    beta: &Tensor<f64>,
    stats: &RunningStats<f64>,
    mode: BnMode,
) -> Result<Var> {
    let gv = g.leaf(gamma.clone());
    let bv = g.leaf(beta.clone());
    Ok(g.batchnorm2d(x, gv, bv, stats, mode, BatchNormConfig::default())?.0)
}

#[test]
fn batchnorm_train_normalizes() {
    // channel values 3 and 7 alternate: mean 5, std 2
    let c = 3;
    let vals: Vec<f64> = (0..2 * c * 16).map(|i| if i % 2 == 0 { 3.0 } else { 7.0 }).collect();
    let x = Tensor::new(vec![2, c, 4, 4], vals).unwrap();
    let stats = RunningStats::new(c);
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let gamma = Tensor::full(&[c], 1.0);
    let beta = Tensor::zeros(&[c]);
    let gv = g.leaf(gamma);
    let bv = g.leaf(beta);
    let (y, batch) = g
        .batchnorm2d(xv, gv, bv, &stats, BnMode::Train, BatchNormConfig::default())
        .unwrap();
    let batch = batch.unwrap();
    assert!(batch.mean.iter().all(|&m| (m - 5.0).abs() < 1e-12));
    let out = g.value(y).values();
    for ch in 0..c {
        let vals: Vec<f64> = (0..2)
            .flat_map(|s| out[(s * c + ch) * 16..][..16].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_running_update() {
    let mut stats = RunningStats::<f64>::new(1);
    let batch = advxfer_core::tensor::BatchStats {
        mean: vec![2.0],
        var_unbiased: vec![3.0],
    };
    stats.update(&batch, 0.1);
    assert!((stats.mean.values()[0] - 0.2).abs() < 1e-15);
    assert!((stats.var.values()[0] - 1.2).abs() < 1e-15);
}

#[test]
fn batchnorm_constant_batch_is_finite() {
    let stats = RunningStats::new(2);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 2, 1, 1], 4.0).with_grad(true));
    let y = bn_forward(&mut g, x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &stats, BnMode::Train)
        .unwrap();
    assert!(g.value(y).is_finite());
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn batchnorm_eval_is_pure() {
    let mut stats = RunningStats::new(2);
    stats.mean = Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap();
    stats.var = Tensor::from_f64(&[2], &[1.5, 0.7]).unwrap();
    let x = random(&[3, 2, 4, 4], 9);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = bn_forward(&mut g, xv, &random(&[2], 1), &random(&[2], 2), &stats, BnMode::Eval)
            .unwrap();
        g.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn batchnorm_gradients() {
    let x = random(&[3, 2, 3, 3], 11);
    let gamma = random(&[2], 12);
    let beta = random(&[2], 13);
    let mut stats = RunningStats::new(2);
    stats.mean = random(&[2], 14);
    stats.var = Tensor::from_f64(&[2], &[0.8, 1.3]).unwrap();
    for mode in [BnMode::Train, BnMode::Eval] {
        let check = finite_diff_check(
            |g, x| {
                let y = bn_forward(g, x, &gamma, &beta, &stats, mode)?;
                probe(g, y, 15)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "{mode:?} input: {check:?}");
        let check = finite_diff_check(
            |g, gm| {
                let xv = g.leaf(x.clone());
                let bv = g.leaf(beta.clone());
                let y = g.batchnorm2d(xv, gm, bv, &stats, mode, BatchNormConfig::default())?.0;
                probe(g, y, 15)
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "{mode:?} gamma: {check:?}");
        let check = finite_diff_check(
            |g, bt| {
                let xv = g.leaf(x.clone());
                let gv = g.leaf(gamma.clone());
                let y = g.batchnorm2d(xv, gv, bt, &stats, mode, BatchNormConfig::default())?.0;
                probe(g, y, 15)
            },
            &beta,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "{mode:?} beta: {check:?}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    // keep every coordinate at least 0.1 away from 0
    let mut x = random(&[40], 21);
    for v in x.values_mut() {
        *v = if *v >= 0.0 { *v + 0.1 } else { *v - 0.1 };
    }
    let check = finite_diff_check(
        |g, x| {
            let y = g.relu(x);
            probe(g, y, 22)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "{check:?}");
}

#[test]
fn pool_add_linear_gradients() {
    let x = random(&[2, 3, 4, 4], 31);
    let check = finite_diff_check(
        |g, x| {
            let y = g.global_avg_pool(x)?;
            probe(g, y, 32)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "pool: {check:?}");

    let other = random(&[2, 3, 4, 4], 33);
    let check = finite_diff_check(
        |g, x| {
            let b = g.leaf(other.clone());
            let y = g.add(x, b)?;
            probe(g, y, 34)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "add: {check:?}");

    let inp = random(&[3, 5], 35);
    let w = random(&[4, 5], 36);
    let b = random(&[4], 37);
    let lin = |g: &mut Graph<f64>, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = g.linear(x, w, b)?;
        probe(g, y, 38)
    };
    let c = finite_diff_check(
        |g, x| {
            let (wv, bv) = (g.leaf(w.clone()), g.leaf(b.clone()));
            lin(g, x, wv, bv)
        },
        &inp,
        1e-5,
    )
    .unwrap();
    assert!(c.max_rel_err < 1e-6, "linear x: {c:?}");
    let c = finite_diff_check(
        |g, wv| {
            let (xv, bv) = (g.leaf(inp.clone()), g.leaf(b.clone()));
            lin(g, xv, wv, bv)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(c.max_rel_err < 1e-6, "linear w: {c:?}");
    let c = finite_diff_check(
        |g, bv| {
            let (xv, wv) = (g.leaf(inp.clone()), g.leaf(w.clone()));
            lin(g, xv, wv, bv)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(c.max_rel_err < 1e-6, "linear b: {c:?}");
}

fn ce_value(logits: &[f64], label: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::from_f64(&[1, logits.len()], logits).unwrap());
    let l = g.softmax_cross_entropy(z, &[label]).unwrap();
    g.value(l).values()[0]
}

#[test]
fn cross_entropy_values() {
    // reference values evaluated at 40 significant digits
    assert!((ce_value(&[0.0; 4], 2) - 1.386_294_361_119_890_6).abs() < 1e-12);
    assert!((ce_value(&[10.0, 0.0, 0.0, 0.0], 0) - 1.361_905_149_382_536_3e-4).abs() < 1e-15);
    assert!((ce_value(&[2.0, 1.0, 0.0, -1.0], 1) - 1.440_189_698_561_195_3).abs() < 1e-12);
}

#[test]
fn cross_entropy_vanishes_for_confident_correct_logit() {
    let mut prev = f64::INFINITY;
    for big in [1.0, 5.0, 10.0, 20.0, 40.0] {
        let l = ce_value(&[big, 0.0, 0.0], 0);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-16);
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::zeros(&[2, 1]));
    assert!(matches!(g.softmax_cross_entropy(z, &[0, 0]), Err(TensorError::Config(_))));
    let z = g.leaf(Tensor::zeros(&[1, 3]));
    assert!(g.softmax_cross_entropy(z, &[3]).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let z = random(&[4, 5], 41);
    let labels = [0, 4, 2, 2];
    let check = finite_diff_check(|g, z| g.softmax_cross_entropy(z, &labels), &z, 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-6, "{check:?}");
}

/// conv -> bn -> relu -> pool -> linear -> cross-entropy
fn micro_net(g: &mut Graph<f64>, x: Var, params: &[Tensor<f64>], stats: &RunningStats<f64>) -> Result<Var> {
    let w = g.leaf(params[0].clone());
    let h = g.conv2d(x, w, 1, 1)?;
    let gm = g.leaf(params[1].clone());
    let bt = g.leaf(params[2].clone());
    let (h, _) = g.batchnorm2d(h, gm, bt, stats, BnMode::Train, BatchNormConfig::default())?;
    let h = g.relu(h);
    let h = g.global_avg_pool(h)?;
    let lw = g.leaf(params[3].clone());
    let lb = g.leaf(params[4].clone());
    let z = g.linear(h, lw, lb)?;
    g.softmax_cross_entropy(z, &[1, 0, 2])
}

#[test]
fn composite_gradient() {
    let x = random(&[3, 2, 5, 5], 51);
    let params = vec![
        random(&[4, 2, 3, 3], 52),
        random(&[4], 53),
        random(&[4], 54),
        random(&[3, 4], 55),
        random(&[3], 56),
    ];
    let stats = RunningStats::new(4);
    let check = finite_diff_check(|g, x| micro_net(g, x, &params, &stats), &x, 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-6, "{check:?}");
}

#[test]
fn single_precision_gradient_within_1e2() {
    let x = random(&[2, 2, 5, 5], 61).cast::<f32>();
    let w = random(&[3, 2, 3, 3], 62).cast::<f32>();
    let r = random(&[2, 3, 5, 5], 63).cast::<f32>();
    let check = finite_diff_check(
        |g, x| {
            let wv = g.leaf(w.clone());
            let y = g.conv2d(x, wv, 1, 1)?;
            let y = g.relu(y);
            let rv = g.leaf(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-2, "{check:?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let x = random(&[2, 3, 9, 9], 71);
    let w = random(&[5, 3, 3, 3], 72);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone().with_grad(true));
        let wv = g.leaf(w.clone().with_grad(true));
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        (g.value(y).clone(), grads.get(wv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
}
