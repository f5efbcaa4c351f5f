use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{CflError, Result};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference gradient of `loss_fn` at `params`.
fn finite_diff<F>(params: &ParamSet, loss_fn: &F, eps: f64) -> ParamSet
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |p: &ParamSet| grad_of(p, |t, v| loss_fn(t, v)).unwrap().0;
    let mut out = ParamSet::new();
    for (id, t) in params.iter() {
        let mut g = Tensor::zeros(t.shape());
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.get_mut(id).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(id).unwrap().data_mut()[i] -= eps;
            g.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        out.insert(id.clone(), g);
    }
    out
}

fn max_rel_error(a: &ParamSet, b: &ParamSet) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            let denom = u.abs().max(v.abs()).max(1e-6);
            worst = worst.max((u - v).abs() / denom);
        }
    }
    worst
}

fn check_fd<F>(params: &ParamSet, loss_fn: F)
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let (_, analytic) = grad_of(params, |t, v| loss_fn(t, v)).unwrap();
    let numeric = finite_diff(params, &loss_fn, 1e-5);
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "max relative gradient error {}", err);
}

#[test]
fn square_gradient() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(3.0));
    let (loss, g) = grad_of(&p, |t, v| {
        let w = v["w"];
        let sq = t.mul(w, w)?;
        t.sum(sq)
    })
    .unwrap();
    assert_eq!(loss, 9.0);
    assert_eq!(g.get("w").unwrap().data(), &[6.0]);
}

#[test]
fn constant_loss_has_zero_grads() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::full(&[2, 2], 1.5));
    let (_, g) = grad_of(&p, |t, _| {
        let c = t.leaf(Tensor::scalar(4.0));
        t.sum(c)
    })
    .unwrap();
    assert!(g.get("a").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_scalar_loss_is_unsupported() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::full(&[2], 1.0));
    let err = grad_of(&p, |_, v| Ok(v["a"])).unwrap_err();
    assert!(matches!(err, CflError::Unsupported(_)));
}

#[test]
fn foreign_variable_is_unsupported() {
    let mut other = Tape::new();
    let stray = other.leaf(Tensor::scalar(1.0));
    let mut p = ParamSet::new();
    p.insert("a", Tensor::scalar(1.0));
    let err = grad_of(&p, |t, v| t.add(v["a"], stray)).unwrap_err();
    assert!(matches!(err, CflError::Unsupported(_)));
}

#[test]
fn uniform_logits_cross_entropy_is_ln_c() {
    for c in [2usize, 5, 10, 37] {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::full(&[3, c], 0.25));
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, c - 1]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - (c as f64).ln()).abs() < 1e-12, "{} vs ln {}", v, c);
    }
}

#[test]
fn sgd_step_arithmetic() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(1.0));
    let mut g = ParamSet::new();
    g.insert("w", Tensor::scalar(0.5));
    assert_eq!(sgd_step(&p, &g, 0.1).unwrap().get("w").unwrap().data(), &[0.95]);
    assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
    let mut bad = ParamSet::new();
    bad.insert("v", Tensor::scalar(0.5));
    assert!(matches!(sgd_step(&p, &bad, 0.1), Err(CflError::Structural(_))));
}

#[test]
fn two_steps_equal_one_step_with_summed_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.insert("a", rand_tensor(&mut rng, &[3, 4]));
    p.insert("b", rand_tensor(&mut rng, &[5]));
    let g1: ParamSet = p.iter().map(|(k, t)| (k.clone(), rand_tensor(&mut rng, t.shape()))).collect();
    let g2: ParamSet = p.iter().map(|(k, t)| (k.clone(), rand_tensor(&mut rng, t.shape()))).collect();
    let two = sgd_step(&sgd_step(&p, &g1, 0.05).unwrap(), &g2, 0.05).unwrap();
    let one = sgd_step(&p, &g1.axpy(1.0, &g2).unwrap(), 0.05).unwrap();
    for ((_, x), (_, y)) in two.iter().zip(one.iter()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_dense_net_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let labels = [1usize, 2];
        let mut p = ParamSet::new();
        p.insert("c.w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        p.insert("c.b", rand_tensor(&mut rng, &[3]));
        p.insert("d.w", rand_tensor(&mut rng, &[4, 3]));
        p.insert("d.b", rand_tensor(&mut rng, &[4]));
        check_fd(&p, |t, v| {
            let xi = t.leaf(x.clone());
            let h = t.conv2d(xi, v["c.w"], 2)?;
            let h = t.channel_bias(h, v["c.b"])?;
            let h = t.relu(h)?;
            let h = t.global_avg_pool(h)?;
            let logits = t.dense(h, v["d.w"], v["d.b"])?;
            t.softmax_cross_entropy(logits, &labels)
        });
    }
}

#[test]
fn channel_routing_and_soft_gating_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 4, 4, 4]);
    let mut p = ParamSet::new();
    p.insert("w", rand_tensor(&mut rng, &[2, 2, 3, 3]));
    p.insert("g.w", rand_tensor(&mut rng, &[2, 4]));
    p.insert("g.b", rand_tensor(&mut rng, &[2]));
    check_fd(&p, |t, v| {
        let xi = t.leaf(x.clone());
        let sel = t.gather_channels(xi, &[3, 1])?;
        let branch = t.conv2d(sel, v["w"], 1)?;
        let branch = t.scatter_channels(branch, &[0, 2], 4)?;
        let pooled = t.global_avg_pool(xi)?;
        let logits = t.dense(pooled, v["g.w"], v["g.b"])?;
        let diff = t.column_diff(logits)?;
        let p_exec = t.sigmoid(diff)?;
        let gated = t.scale_samples(branch, p_exec)?;
        let masked = t.mask_samples(gated, &[1.0, 0.0, 1.0])?;
        let out = t.add(xi, masked)?;
        let sq = t.mul(out, out)?;
        t.sum(sq)
    });
}

#[test]
fn mse_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 3]);
    let target: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut p = ParamSet::new();
    p.insert("w", rand_tensor(&mut rng, &[1, 3]));
    p.insert("b", rand_tensor(&mut rng, &[1]));
    check_fd(&p, |t, v| {
        let xi = t.leaf(x.clone());
        let y = t.dense(xi, v["w"], v["b"])?;
        let y = t.sigmoid(y)?;
        t.mse(y, &target)
    });
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        forward_conv(&x, &w, 1).unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
