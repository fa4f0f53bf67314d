//! Shared test oracles: central finite differences, naive reference
//! convolutions, and per-op gradient-check runners. Everything here is
//! independent of the engine's optimized kernel implementations.

#![allow(dead_code)] // each test target uses a different subset

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unet_core::model::{build_unet, ModelConfig};
use unet_core::ops::{
    backprop, batchnorm_train, concat_channels, conv2d, conv_transpose2d, maxpool2x2, relu,
    sigmoid, BatchNormState, ConvKernel, Mode, OpGrads,
};
use unet_core::tensor::Tensor;
use unet_core::train::{bce_loss, soft_dice_loss};

pub const FD_STEP: f64 = 1e-3;

/// Central-difference gradient of `eval` w.r.t. `values`, one coordinate at
/// a time: (J(v + h) - J(v - h)) / 2h with the quotient taken in f64.
/// `values` is restored afterwards.
pub fn finite_diff(values: &mut [f32], step: f64, mut eval: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = (orig as f64 + step) as f32;
        let plus = eval(values);
        values[i] = (orig as f64 - step) as f32;
        let minus = eval(values);
        values[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Max-norm relative error between an analytic gradient vector and its
/// finite-difference estimate: max_i |a_i - n_i| scaled by the largest
/// magnitude present (floored at 1e-6 so all-zero gradients compare clean).
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .map(|v| v.abs() as f64)
        .chain(numeric.iter().map(|v| v.abs()))
        .fold(1e-6_f64, f64::max);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (*a as f64 - n).abs())
        .fold(0.0_f64, f64::max)
        / scale
}

/// Weighted sum of a tensor against a fixed projection, accumulated in f64.
/// Used as the scalar objective for per-op gradient checks.
pub fn project(y: &Tensor, weights: &[f64]) -> f64 {
    assert_eq!(y.len(), weights.len());
    y.data().iter().zip(weights).map(|(v, w)| *v as f64 * w).sum()
}

pub fn rand_tensor(shape: [usize; 4], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

pub fn projection(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

fn upstream_from(proj: &[f64], shape: [usize; 4]) -> Tensor {
    let mut u = Tensor::zeros(shape);
    for (v, p) in u.data_mut().iter_mut().zip(proj) {
        *v = *p as f32;
    }
    u
}

/// Naive seven-loop 2-D convolution (stride 1, zero padding): the reference
/// the optimized kernel is checked against.
pub fn conv2d_naive(x: &Tensor, weights: &Tensor, bias: &[f32], pad: usize) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weights.shape();
    assert_eq!(cin, wcin);
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut y = Tensor::zeros([n, cout, oh, ow]);
    for ni in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xi = oi + ky;
                                let xj = oj + kx;
                                if xi < pad || xj < pad {
                                    continue;
                                }
                                let (xi, xj) = (xi - pad, xj - pad);
                                if xi >= h || xj >= w {
                                    continue;
                                }
                                acc += x.at(ni, ci, xi, xj) * weights.at(co, ci, ky, kx);
                            }
                        }
                    }
                    y.set(ni, co, oi, oj, acc);
                }
            }
        }
    }
    y
}

/// Naive scatter reference for the 2x2 stride-2 transposed convolution.
pub fn conv_transpose2d_naive(x: &Tensor, weights: &Tensor, bias: &[f32]) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weights.shape();
    assert_eq!(cin, wcin);
    assert_eq!((kh, kw), (2, 2));
    let mut y = Tensor::zeros([n, cout, 2 * h, 2 * w]);
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    y.set(ni, co, i, j, bias[co]);
                }
            }
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..w {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let prev = y.at(ni, co, 2 * i + ky, 2 * j + kx);
                                y.set(
                                    ni,
                                    co,
                                    2 * i + ky,
                                    2 * j + kx,
                                    prev + x.at(ni, ci, i, j) * weights.at(co, ci, ky, kx),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Gradient-check runners: each returns the worst relative error found for
// one seeded instance of the op, checking every input and parameter tensor.
// ---------------------------------------------------------------------------

/// conv2d: dx, dweights, dbias against finite differences.
pub fn gradcheck_conv2d(shape: [usize; 4], cout: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rand_tensor(shape, -1.0, 1.0, &mut rng);
    let mut weights = rand_tensor([cout, shape[1], 3, 3], -0.5, 0.5, &mut rng);
    let mut bias: Vec<f32> = (0..cout).map(|_| rng.gen::<f32>() - 0.5).collect();
    let proj = projection(shape[0] * cout * shape[2] * shape[3], &mut rng);

    let kernel = ConvKernel::new(weights.clone(), bias.clone(), 1, 1).unwrap();
    let (y, rec) = conv2d(&x, &kernel).unwrap();
    let upstream = upstream_from(&proj, y.shape());
    let (dx, dw, db) = match backprop(&rec, &upstream).unwrap() {
        OpGrads::Conv { dx, dweights, dbias } => (dx, dweights, dbias),
        _ => unreachable!(),
    };

    let (ws, bs) = (weights.clone(), bias.clone());
    let fd_x = finite_diff(x.data_mut(), FD_STEP, |vals| {
        let xt = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        let k = ConvKernel::new(ws.clone(), bs.clone(), 1, 1).unwrap();
        project(&conv2d(&xt, &k).unwrap().0, &proj)
    });
    let xs = x.clone();
    let fd_w = finite_diff(weights.data_mut(), FD_STEP, |vals| {
        let wt = Tensor::from_vec([cout, shape[1], 3, 3], vals.to_vec()).unwrap();
        let k = ConvKernel::new(wt, bs.clone(), 1, 1).unwrap();
        project(&conv2d(&xs, &k).unwrap().0, &proj)
    });
    let fd_b = finite_diff(&mut bias, FD_STEP, |vals| {
        let k = ConvKernel::new(ws.clone(), vals.to_vec(), 1, 1).unwrap();
        project(&conv2d(&xs, &k).unwrap().0, &proj)
    });

    max_rel_err(dx.data(), &fd_x)
        .max(max_rel_err(dw.data(), &fd_w))
        .max(max_rel_err(&db, &fd_b))
}

/// conv_transpose2d: dx, dweights, dbias against finite differences.
pub fn gradcheck_conv_transpose(shape: [usize; 4], cout: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rand_tensor(shape, -1.0, 1.0, &mut rng);
    let mut weights = rand_tensor([cout, shape[1], 2, 2], -0.5, 0.5, &mut rng);
    let mut bias: Vec<f32> = (0..cout).map(|_| rng.gen::<f32>() - 0.5).collect();
    let proj = projection(shape[0] * cout * 4 * shape[2] * shape[3], &mut rng);

    let kernel = ConvKernel::new(weights.clone(), bias.clone(), 0, 2).unwrap();
    let (y, rec) = conv_transpose2d(&x, &kernel).unwrap();
    let upstream = upstream_from(&proj, y.shape());
    let (dx, dw, db) = match backprop(&rec, &upstream).unwrap() {
        OpGrads::Conv { dx, dweights, dbias } => (dx, dweights, dbias),
        _ => unreachable!(),
    };

    let (ws, bs) = (weights.clone(), bias.clone());
    let fd_x = finite_diff(x.data_mut(), FD_STEP, |vals| {
        let xt = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        let k = ConvKernel::new(ws.clone(), bs.clone(), 0, 2).unwrap();
        project(&conv_transpose2d(&xt, &k).unwrap().0, &proj)
    });
    let xs = x.clone();
    let fd_w = finite_diff(weights.data_mut(), FD_STEP, |vals| {
        let wt = Tensor::from_vec([cout, shape[1], 2, 2], vals.to_vec()).unwrap();
        let k = ConvKernel::new(wt, bs.clone(), 0, 2).unwrap();
        project(&conv_transpose2d(&xs, &k).unwrap().0, &proj)
    });
    let fd_b = finite_diff(&mut bias, FD_STEP, |vals| {
        let k = ConvKernel::new(ws.clone(), vals.to_vec(), 0, 2).unwrap();
        project(&conv_transpose2d(&xs, &k).unwrap().0, &proj)
    });

    max_rel_err(dx.data(), &fd_x)
        .max(max_rel_err(dw.data(), &fd_w))
        .max(max_rel_err(&db, &fd_b))
}

/// Maxpool input with every 2x2 window built from well-separated levels, so
/// finite differences never cross an argmax flip.
pub fn pool_safe_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let [n, c, h, w] = shape;
    let mut x = Tensor::zeros(shape);
    let mut levels = [0.1f32, 0.35, 0.6, 0.85];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..h / 2 {
                for oj in 0..w / 2 {
                    for i in (1..4).rev() {
                        levels.swap(i, rng.gen_range(0..=i));
                    }
                    for (t, level) in levels.iter().enumerate() {
                        let (di, dj) = (t / 2, t % 2);
                        let jitter = 0.02 * rng.gen::<f32>() - 0.01;
                        x.set(ni, ci, 2 * oi + di, 2 * oj + dj, level + jitter);
                    }
                }
            }
        }
    }
    x
}

pub fn gradcheck_maxpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 2, 6, 6];
    let mut x = pool_safe_tensor(shape, &mut rng);
    let proj = projection(2 * 3 * 3, &mut rng);

    let (y, rec) = maxpool2x2(&x).unwrap();
    let upstream = upstream_from(&proj, y.shape());
    let dx = match backprop(&rec, &upstream).unwrap() {
        OpGrads::MaxPool { dx } => dx,
        _ => unreachable!(),
    };
    let fd = finite_diff(x.data_mut(), FD_STEP, |vals| {
        let xt = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        project(&maxpool2x2(&xt).unwrap().0, &proj)
    });
    max_rel_err(dx.data(), &fd)
}

pub fn gradcheck_batchnorm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 2, 3, 3];
    let mut x = rand_tensor(shape, -2.0, 2.0, &mut rng);
    let mut gamma: Vec<f32> = (0..2).map(|_| 0.5 + rng.gen::<f32>()).collect();
    let mut beta: Vec<f32> = (0..2).map(|_| rng.gen::<f32>() - 0.5).collect();
    let proj = projection(x.len(), &mut rng);

    let fresh_state = |g: &[f32], b: &[f32]| {
        let mut s = BatchNormState::new(2, 0.1, 1e-5).unwrap();
        s.gamma = g.to_vec();
        s.beta = b.to_vec();
        s
    };

    let mut state = fresh_state(&gamma, &beta);
    let (y, rec) = batchnorm_train(&x, &mut state).unwrap();
    let upstream = upstream_from(&proj, y.shape());
    let (dx, dgamma, dbeta) = match backprop(&rec, &upstream).unwrap() {
        OpGrads::BatchNorm { dx, dgamma, dbeta } => (dx, dgamma, dbeta),
        _ => unreachable!(),
    };

    let (gs, bs) = (gamma.clone(), beta.clone());
    let fd_x = finite_diff(x.data_mut(), FD_STEP, |vals| {
        let xt = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        let mut s = fresh_state(&gs, &bs);
        project(&batchnorm_train(&xt, &mut s).unwrap().0, &proj)
    });
    let xs = x.clone();
    let fd_g = finite_diff(&mut gamma, FD_STEP, |vals| {
        let mut s = fresh_state(vals, &bs);
        project(&batchnorm_train(&xs, &mut s).unwrap().0, &proj)
    });
    let fd_b = finite_diff(&mut beta, FD_STEP, |vals| {
        let mut s = fresh_state(&gs, vals);
        project(&batchnorm_train(&xs, &mut s).unwrap().0, &proj)
    });

    max_rel_err(dx.data(), &fd_x)
        .max(max_rel_err(&dgamma, &fd_g))
        .max(max_rel_err(&dbeta, &fd_b))
}

/// ReLU (inputs kept away from the kink) and sigmoid, combined.
pub fn gradcheck_activations(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 2, 4, 4];
    let mut x = Tensor::zeros(shape);
    for v in x.data_mut() {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        *v = sign * (0.2 + 0.8 * rng.gen::<f32>());
    }
    let proj = projection(x.len(), &mut rng);
    let upstream = upstream_from(&proj, shape);

    let (_, rec) = relu(&x);
    let dr = backprop(&rec, &upstream).unwrap();
    let fd_r = finite_diff(x.data_mut(), FD_STEP, |vals| {
        let xt = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        project(&relu(&xt).0, &proj)
    });

    let (_, rec) = sigmoid(&x);
    let ds = backprop(&rec, &upstream).unwrap();
    let fd_s = finite_diff(x.data_mut(), FD_STEP, |vals| {
        let xt = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        project(&sigmoid(&xt).0, &proj)
    });

    max_rel_err(dr.dx().data(), &fd_r).max(max_rel_err(ds.dx().data(), &fd_s))
}

pub fn gradcheck_concat(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sa = [1, 2, 3, 3];
    let sb = [1, 3, 3, 3];
    let mut a = rand_tensor(sa, -1.0, 1.0, &mut rng);
    let b = rand_tensor(sb, -1.0, 1.0, &mut rng);
    let proj = projection(5 * 9, &mut rng);

    let (y, rec) = concat_channels(&a, &b).unwrap();
    let upstream = upstream_from(&proj, y.shape());
    let (da, db) = match backprop(&rec, &upstream).unwrap() {
        OpGrads::Concat { da, db } => (da, db),
        _ => unreachable!(),
    };

    let bb = b.clone();
    let fd_a = finite_diff(a.data_mut(), FD_STEP, |vals| {
        let at = Tensor::from_vec(sa, vals.to_vec()).unwrap();
        project(&concat_channels(&at, &bb).unwrap().0, &proj)
    });
    let aa = a.clone();
    let mut bm = b.clone();
    let fd_b = finite_diff(bm.data_mut(), FD_STEP, |vals| {
        let bt = Tensor::from_vec(sb, vals.to_vec()).unwrap();
        project(&concat_channels(&aa, &bt).unwrap().0, &proj)
    });

    max_rel_err(da.data(), &fd_a).max(max_rel_err(db.data(), &fd_b))
}

/// Soft dice and BCE loss gradients against finite differences.
pub fn gradcheck_losses(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 1, 4, 4];
    let mut probs = rand_tensor(shape, 0.05, 0.95, &mut rng);
    let truth = Tensor::from_vec(
        shape,
        (0..16).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();

    let (_, grad_d) = soft_dice_loss(&probs, &truth, 1.0).unwrap();
    let t1 = truth.clone();
    let fd_d = finite_diff(probs.data_mut(), FD_STEP, |vals| {
        let p = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        soft_dice_loss(&p, &t1, 1.0).unwrap().0
    });
    let (_, grad_b) = bce_loss(&probs, &truth).unwrap();
    let fd_b = finite_diff(probs.data_mut(), FD_STEP, |vals| {
        let p = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        bce_loss(&p, &t1).unwrap().0
    });

    max_rel_err(grad_d.data(), &fd_d).max(max_rel_err(grad_b.data(), &fd_b))
}

/// End-to-end gradient check on a depth-1 base-2 model with the soft dice
/// loss. Coordinates that disagree at the base step are re-estimated at
/// smaller steps: batch norm centers pre-activations at zero, so a few
/// elements inevitably sit within the step of a ReLU kink; the kink
/// artifact shrinks with the step while a genuine bug would not. Absolute
/// differences below the FD noise floor count as agreement (a conv bias
/// followed by batch norm has a true gradient of exactly zero, where both
/// sides are rounding noise).
pub fn gradcheck_end_to_end() -> f64 {
    let cfg = ModelConfig { base_width: 2, depth: 1, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor([1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let truth = Tensor::from_vec(
        [1, 1, 8, 8],
        (0..64).map(|_| if rng.gen::<f32>() < 0.3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();

    let mut model = build_unet(&cfg, 123).unwrap();
    let probs = model.forward(&x, Mode::Train).unwrap();
    let (_, loss_grad) = soft_dice_loss(&probs, &truth, 1.0).unwrap();
    let grads = model.backward(&loss_grad).unwrap();

    let eval_loss = |m: &mut unet_core::model::Model| {
        let p = m.forward(&x, Mode::Train).unwrap();
        soft_dice_loss(&p, &truth, 1.0).unwrap().0
    };

    const ATOL: f64 = 2e-4;
    let mut worst = 0.0f64;
    for (pi, entry) in grads.entries().iter().enumerate() {
        let quotient_at = |model: &mut unet_core::model::Model, off: usize, h: f64| {
            let mut orig = 0.0f32;
            let poke = |m: &mut unet_core::model::Model, delta: f64, orig: &mut f32| {
                let mut k = 0;
                m.for_each_trainable_mut(|_, vals| {
                    if k == pi {
                        if delta == 0.0 {
                            vals[off] = *orig;
                        } else {
                            *orig = vals[off];
                            vals[off] = (*orig as f64 + delta) as f32;
                        }
                    }
                    k += 1;
                });
            };
            poke(model, h, &mut orig);
            let plus = eval_loss(model);
            poke(model, 0.0, &mut orig);
            poke(model, -h, &mut orig);
            let minus = eval_loss(model);
            poke(model, 0.0, &mut orig);
            (plus - minus) / (2.0 * h)
        };

        let mut fd: Vec<f64> = (0..entry.values.len())
            .map(|off| quotient_at(&mut model, off, FD_STEP))
            .collect();
        let scale = entry
            .values
            .iter()
            .map(|v| v.abs() as f64)
            .chain(fd.iter().map(|v| v.abs()))
            .fold(1e-6_f64, f64::max);
        for off in 0..fd.len() {
            let mut diff = (entry.values[off] as f64 - fd[off]).abs();
            for refine in [2.5e-4, 6.25e-5] {
                if diff < ATOL || diff / scale < 1e-2 {
                    break;
                }
                fd[off] = quotient_at(&mut model, off, refine);
                diff = (entry.values[off] as f64 - fd[off]).abs();
            }
            if diff >= ATOL {
                worst = worst.max(diff / scale);
            }
        }
    }
    worst
}
