//! Finite-difference checks for every differentiable tape op and both SSL
//! losses. Shared by the gradient tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundssl::ssl::{barlow_twins_loss, vicreg_loss, BarlowTwinsConfig, SslError, VicRegConfig};
use soundssl::tensor::{grad_check, Graph, Padding, Tensor, TensorError, Var};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;
const BN_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (for relu kinks and divisors).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts `y` with a fixed random weight so the check sees every output.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let shape = g.shape(y).to_vec();
    let r = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn run<P, F>(name: &str, tol: f64, step: f64, mut point: P, f: F)
where
    P: FnMut(&mut ChaCha8Rng) -> Tensor<f64>,
    F: Fn(&mut Graph<f64>, Var, &mut ChaCha8Rng) -> Result<Var, TensorError>,
{
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let x = point(&mut rng);
        let ctx_seed = rng.gen::<u64>();
        let report = grad_check(
            |g, x| {
                let mut ctx = ChaCha8Rng::seed_from_u64(ctx_seed);
                let y = f(g, x, &mut ctx)?;
                project(g, y, ctx_seed)
            },
            &x,
            step,
            tol,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(
            report.passed,
            "{name} instance {inst}: rel err {:.3e} at {} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst_index,
            report.analytic[report.worst_index],
            report.numeric[report.worst_index]
        );
    }
}

pub fn elementwise_binary_ops_with_broadcasting() {
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        for lhs in [true, false] {
            run(
                name,
                TOL,
                STEP,
                |r| rand_tensor(r, &[3, 4], -2.0, 2.0),
                move |g, x, r| {
                    let other = g.constant(away_from_zero(r, &[1, 4]));
                    let (a, b) = if lhs { (x, other) } else { (other, x) };
                    let b = if kind == 3 && !lhs {
                        // keep divisor away from zero
                        let sq = g.square(b)?;
                        g.add_scalar(sq, 0.5)?
                    } else {
                        b
                    };
                    match kind {
                        0 => g.add(a, b),
                        1 => g.sub(a, b),
                        2 => g.mul(a, b),
                        _ => g.div(a, b),
                    }
                },
            );
        }
    }
}

pub fn broadcast_reduces_into_smaller_operand() {
    run(
        "mul row operand",
        TOL,
        STEP,
        |r| rand_tensor(r, &[1, 5], -2.0, 2.0),
        |g, x, r| {
            let m = g.constant(rand_tensor(r, &[4, 5], -1.0, 1.0));
            g.mul(m, x)
        },
    );
}

pub fn unary_ops() {
    run("neg", TOL, STEP, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x, _| g.neg(x));
    run("scale", TOL, STEP, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x, _| g.scale(x, -1.7));
    run("add_scalar", TOL, STEP, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x, _| g.add_scalar(x, 0.3));
    run("sqrt", TOL, STEP, |r| rand_tensor(r, &[6], 0.2, 3.0), |g, x, _| g.sqrt(x));
    run("relu", TOL, STEP, |r| away_from_zero(r, &[3, 4]), |g, x, _| g.relu(x));
    run("exp", TOL, STEP, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x, _| g.exp(x));
    run("log", TOL, STEP, |r| rand_tensor(r, &[6], 0.2, 3.0), |g, x, _| g.log(x));
    run("square", TOL, STEP, |r| rand_tensor(r, &[6], -2.0, 2.0), |g, x, _| g.square(x));
}

pub fn matmul_transpose_and_shape_ops() {
    run(
        "matmul lhs",
        TOL,
        STEP,
        |r| rand_tensor(r, &[2, 3], -1.0, 1.0),
        |g, x, r| {
            let b = g.constant(rand_tensor(r, &[3, 4], -1.0, 1.0));
            g.matmul(x, b)
        },
    );
    run(
        "matmul rhs",
        TOL,
        STEP,
        |r| rand_tensor(r, &[3, 4], -1.0, 1.0),
        |g, x, r| {
            let a = g.constant(rand_tensor(r, &[2, 3], -1.0, 1.0));
            g.matmul(a, x)
        },
    );
    run(
        "xᵀx",
        TOL,
        STEP,
        |r| rand_tensor(r, &[5, 3], -1.0, 1.0),
        |g, x, _| {
            let t = g.transpose(x)?;
            g.matmul(t, x)
        },
    );
    run(
        "reshape",
        TOL,
        STEP,
        |r| rand_tensor(r, &[2, 6], -1.0, 1.0),
        |g, x, _| {
            let y = g.reshape(x, &[3, 4])?;
            g.square(y)
        },
    );
    run(
        "narrow",
        TOL,
        STEP,
        |r| rand_tensor(r, &[3, 5, 2], -1.0, 1.0),
        |g, x, _| {
            let y = g.narrow(x, 1, 1, 3)?;
            g.square(y)
        },
    );
}

pub fn reductions() {
    run("sum", TOL, STEP, |r| rand_tensor(r, &[3, 4], -1.0, 1.0), |g, x, _| {
        let sq = g.square(x)?;
        g.sum(sq)
    });
    run("mean", TOL, STEP, |r| rand_tensor(r, &[3, 4], -1.0, 1.0), |g, x, _| {
        let sq = g.square(x)?;
        g.mean(sq)
    });
    for axis in 0..3 {
        run("sum_axis", TOL, STEP, |r| rand_tensor(r, &[2, 3, 4], -1.0, 1.0), move |g, x, _| g.sum_axis(x, axis));
        run("mean_axis", TOL, STEP, |r| rand_tensor(r, &[2, 3, 4], -1.0, 1.0), move |g, x, _| g.mean_axis(x, axis));
        for ddof in [0, 1] {
            run("var_axis", TOL, STEP, |r| rand_tensor(r, &[3, 4, 5], -1.0, 1.0), move |g, x, _| {
                g.var_axis(x, axis, ddof)
            });
        }
    }
}

pub fn conv2d_input_weight_and_bias() {
    // 1×8×8×2 input in NHWC terms is [1, 2, 8, 8] here; step 1e-3 as specified.
    for (padding, stride) in [(Padding::Valid, (1, 1)), (Padding::Same, (1, 1)), (Padding::Same, (2, 2))] {
        run(
            "conv2d input",
            TOL,
            1e-3,
            |r| rand_tensor(r, &[1, 2, 8, 8], -1.0, 1.0),
            move |g, x, r| {
                let w = g.constant(rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0));
                let b = g.constant(rand_tensor(r, &[3], -1.0, 1.0));
                g.conv2d(x, w, Some(b), stride, padding)
            },
        );
        run(
            "conv2d weight",
            TOL,
            1e-3,
            |r| rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0),
            move |g, w, r| {
                let x = g.constant(rand_tensor(r, &[2, 2, 8, 8], -1.0, 1.0));
                g.conv2d(x, w, None, stride, padding)
            },
        );
        run(
            "conv2d bias",
            TOL,
            1e-3,
            |r| rand_tensor(r, &[3], -1.0, 1.0),
            move |g, b, r| {
                let x = g.constant(rand_tensor(r, &[1, 2, 8, 8], -1.0, 1.0));
                let w = g.constant(rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0));
                g.conv2d(x, w, Some(b), stride, padding)
            },
        );
    }
}

pub fn pooling() {
    // distinct values per window keep argmax stable under perturbation
    let spread = |r: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..2 * 3 * 8 * 6).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, r.gen_range(0..=i));
        }
        Tensor::new(&[2, 3, 8, 6], idx.into_iter().map(|v| v as f64 * 0.01).collect()).unwrap()
    };
    run("maxpool2d 4x2", TOL, STEP, spread, |g, x, _| g.maxpool2d(x, (4, 2)));
    run("maxpool2d 3x3 ragged", TOL, STEP, spread, |g, x, _| g.maxpool2d(x, (3, 3)));
    run("global_avg_pool", TOL, STEP, |r| rand_tensor(r, &[2, 3, 4, 5], -1.0, 1.0), |g, x, _| g.global_avg_pool(x));
}

pub fn dense_all_operands() {
    run("dense x", TOL, STEP, |r| rand_tensor(r, &[4, 3], -1.0, 1.0), |g, x, r| {
        let w = g.constant(rand_tensor(r, &[3, 5], -1.0, 1.0));
        let b = g.constant(rand_tensor(r, &[5], -1.0, 1.0));
        g.dense(x, w, Some(b))
    });
    run("dense w", TOL, STEP, |r| rand_tensor(r, &[3, 5], -1.0, 1.0), |g, w, r| {
        let x = g.constant(rand_tensor(r, &[4, 3], -1.0, 1.0));
        g.dense(x, w, None)
    });
    run("dense b", TOL, STEP, |r| rand_tensor(r, &[5], -1.0, 1.0), |g, b, r| {
        let x = g.constant(rand_tensor(r, &[4, 3], -1.0, 1.0));
        let w = g.constant(rand_tensor(r, &[3, 5], -1.0, 1.0));
        g.dense(x, w, Some(b))
    });
}

pub fn batchnorm_train_and_infer() {
    for shape in [vec![6, 4], vec![3, 2, 3, 3]] {
        let c = shape[1];
        let s = shape.clone();
        run("batchnorm train x", BN_TOL, STEP, move |r| rand_tensor(r, &s, -2.0, 2.0), move |g, x, r| {
            let gamma = g.constant(rand_tensor(r, &[c], 0.5, 1.5));
            let beta = g.constant(rand_tensor(r, &[c], -0.5, 0.5));
            Ok(g.batchnorm_train(x, gamma, beta, 1e-3)?.0)
        });
        let s = shape.clone();
        run("batchnorm train gamma", BN_TOL, STEP, |r| rand_tensor(r, &[c], 0.5, 1.5), move |g, gamma, r| {
            let x = g.constant(rand_tensor(r, &s, -2.0, 2.0));
            let beta = g.constant(rand_tensor(r, &[c], -0.5, 0.5));
            Ok(g.batchnorm_train(x, gamma, beta, 1e-3)?.0)
        });
        let s = shape.clone();
        run("batchnorm train beta", BN_TOL, STEP, |r| rand_tensor(r, &[c], -0.5, 0.5), move |g, beta, r| {
            let x = g.constant(rand_tensor(r, &s, -2.0, 2.0));
            let gamma = g.constant(rand_tensor(r, &[c], 0.5, 1.5));
            Ok(g.batchnorm_train(x, gamma, beta, 1e-3)?.0)
        });
        let s = shape.clone();
        run("batchnorm infer x", BN_TOL, STEP, move |r| rand_tensor(r, &s, -2.0, 2.0), move |g, x, r| {
            let gamma = g.constant(rand_tensor(r, &[c], 0.5, 1.5));
            let beta = g.constant(rand_tensor(r, &[c], -0.5, 0.5));
            let rm = rand_tensor(r, &[c], -0.5, 0.5);
            let rv = rand_tensor(r, &[c], 0.5, 2.0);
            g.batchnorm_infer(x, gamma, beta, &rm, &rv, 1e-3)
        });
    }
}

pub fn softmax_cross_entropy() {
    run("softmax_cross_entropy", TOL, STEP, |r| rand_tensor(r, &[5, 4], -3.0, 3.0), |g, x, r| {
        let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
        let l = g.softmax_cross_entropy(x, &labels)?;
        // the projection helper multiplies by a random scalar, which is fine
        Ok(l)
    });
}

fn tensor_err(e: SslError) -> TensorError {
    match e {
        SslError::Tensor(t) => t,
        other => panic!("loss rejected a valid batch: {other}"),
    }
}

/// Both views stacked as `[2n, N]`; the loss sees rows `0..n` and `n..2n`.
fn split_views(g: &mut Graph<f64>, x: Var) -> Result<(Var, Var), TensorError> {
    let n = g.shape(x)[0] / 2;
    Ok((g.narrow(x, 0, 0, n)?, g.narrow(x, 0, n, n)?))
}

/// Columns scaled so every per-dimension std sits well away from the
/// variance hinge at 1.
fn hinge_safe_views(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    loop {
        let scales: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 0.4 } else { 2.5 }).collect();
        let mut data = Vec::with_capacity(2 * n * d);
        for _ in 0..2 * n {
            for s in &scales {
                data.push(rng.gen_range(-1.0..1.0) * s * 3f64.sqrt());
            }
        }
        let t = Tensor::new(&[2 * n, d], data).unwrap();
        let ok = (0..2).all(|v| {
            (0..d).all(|j| {
                let col: Vec<f64> = (0..n).map(|i| t.get(&[v * n + i, j])).collect();
                let m = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
                ((var + 1e-4).sqrt() - 1.0).abs() > 0.1
            })
        });
        if ok {
            return t;
        }
    }
}

pub fn ssl_losses() {
    run("barlow_twins_loss", TOL, STEP, |r| rand_tensor(r, &[12, 4], -1.0, 1.0), |g, x, _| {
        let (a, b) = split_views(g, x)?;
        barlow_twins_loss(g, a, b, &BarlowTwinsConfig::default()).map(|(l, _)| l).map_err(tensor_err)
    });
    run("vicreg_loss", TOL, STEP, |r| hinge_safe_views(r, 8, 4), |g, x, _| {
        let (a, b) = split_views(g, x)?;
        vicreg_loss(g, a, b, &VicRegConfig::default()).map(|(l, _)| l).map_err(tensor_err)
    });
}

pub const ALL: &[(&str, fn())] = &[
    ("elementwise binary", elementwise_binary_ops_with_broadcasting),
    ("broadcast reduce", broadcast_reduces_into_smaller_operand),
    ("unary", unary_ops),
    ("matmul/transpose/shape", matmul_transpose_and_shape_ops),
    ("reductions", reductions),
    ("conv2d", conv2d_input_weight_and_bias),
    ("pooling", pooling),
    ("dense", dense_all_operands),
    ("batchnorm", batchnorm_train_and_infer),
    ("softmax cross-entropy", softmax_cross_entropy),
    ("ssl losses", ssl_losses),
];
