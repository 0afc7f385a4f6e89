//! Gradient and determinism properties of the tape engine.
//!
//! Every primitive is checked against central finite differences (f64,
//! step 1e-3, relative tolerance 1e-4) on 100 random instances. Random
//! draws avoid non-smooth points (relu kinks, div poles) since the
//! difference quotient is meaningless there.

use diffnav::autodiff::gradcheck::{check_tape_gradients, finite_difference_check};
use diffnav::autodiff::{NodeId, Tape, Tensor, MASK_NEG};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-3;
const INSTANCES: usize = 100;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero (for relu kinks and div poles).
fn rand_tensor_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..1.5)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random normalization input whose per-group variance is bounded below, so
/// the difference quotient stays in its quadratic-convergence regime (a tiny
/// variance inflates 1/std^3 curvature past what step 1e-3 resolves).
fn rand_norm_input(rng: &mut ChaCha8Rng, shape: &[usize], group_size: usize) -> Tensor<f64> {
    loop {
        let t = rand_tensor(rng, shape);
        let ok = t.data().chunks(group_size).all(|g| {
            let mu = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / g.len() as f64;
            var > 0.4
        });
        if ok {
            return t;
        }
    }
}

/// loss = sum(op_out * w) with a fixed random weighting, so every output
/// coordinate contributes a distinct gradient path.
fn weighted_loss(
    tape: &mut Tape<f64>,
    out: NodeId,
    weights: &Tensor<f64>,
) -> diffnav::Result<NodeId> {
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn check_instances<B>(name: &str, instances: usize, mut build_case: B)
where
    B: FnMut(
        u64,
    ) -> (
        Vec<Tensor<f64>>,
        Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> diffnav::Result<NodeId>>,
    ),
{
    for i in 0..instances {
        // Redraw instances that have a tiny-but-nonzero gradient coordinate:
        // the relative-error criterion is uninformative there because plain
        // h^2 truncation of the difference quotient dominates. Exact zeros
        // are kept (their central difference is exactly zero as well).
        let mut attempt = 0u64;
        let (params, build) = loop {
            let (params, build) = build_case(i as u64 + attempt * 100_000);
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
            let loss = build(&mut tape, &ids).unwrap();
            let grads = tape.backward(loss).unwrap();
            let resolvable = ids.iter().all(|&id| {
                grads
                    .get(id)
                    .unwrap()
                    .data()
                    .iter()
                    .all(|&g| g == 0.0 || g.abs() >= 1e-2)
            });
            if resolvable {
                break (params, build);
            }
            attempt += 1;
            assert!(attempt < 50, "{name}: no resolvable instance for case {i}");
        };
        let err = check_tape_gradients(|t, ids| build(t, ids), &params, STEP).unwrap();
        assert!(
            err < TOL,
            "{name}: instance {i} exceeded tolerance: rel err {err:.3e}"
        );
    }
}

#[test]
fn grad_matmul() {
    check_instances("matmul", INSTANCES, |seed| {
        let mut r = rng(1000 + seed);
        let (m, k, n) = (
            r.gen_range(1..4usize),
            r.gen_range(1..4usize),
            r.gen_range(1..4usize),
        );
        let a = rand_tensor(&mut r, &[m, k]);
        let b = rand_tensor(&mut r, &[k, n]);
        let w = rand_tensor_away_from_zero(&mut r, &[m, n], 0.3);
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_loss(t, y, &w)
        };
        (vec![a, b], Box::new(f))
    });
}

#[test]
fn grad_conv1d() {
    check_instances("conv1d", INSTANCES, |seed| {
        let mut r = rng(2000 + seed);
        let (batch, cin, cout) = (
            r.gen_range(1..3usize),
            r.gen_range(1..3usize),
            r.gen_range(1..3usize),
        );
        let kernel = *[1usize, 3, 5].get(r.gen_range(0..3)).unwrap();
        let stride = r.gen_range(1..3usize);
        let pad = r.gen_range(0..=kernel / 2);
        let len = r.gen_range(kernel.max(4)..10usize);
        let lout = (len + 2 * pad - kernel) / stride + 1;
        let x = rand_tensor(&mut r, &[batch, cin, len]);
        let wt = rand_tensor(&mut r, &[cout, cin, kernel]);
        let b = rand_tensor(&mut r, &[cout]);
        let w = rand_tensor_away_from_zero(&mut r, &[batch, cout, lout], 0.3);
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.conv1d(ids[0], ids[1], ids[2], stride, pad)?;
            weighted_loss(t, y, &w)
        };
        (vec![x, wt, b], Box::new(f))
    });
}

#[test]
fn grad_conv2d() {
    check_instances("conv2d", INSTANCES, |seed| {
        let mut r = rng(3000 + seed);
        let (batch, cin, cout) = (1usize, r.gen_range(1..3usize), r.gen_range(1..3usize));
        let kernel = 3usize;
        let stride = r.gen_range(1..3usize);
        let pad = r.gen_range(0..2usize);
        let h = r.gen_range(4..7usize);
        let wd = r.gen_range(4..7usize);
        let hout = (h + 2 * pad - kernel) / stride + 1;
        let wout = (wd + 2 * pad - kernel) / stride + 1;
        let x = rand_tensor(&mut r, &[batch, cin, h, wd]);
        let wt = rand_tensor(&mut r, &[cout, cin, kernel, kernel]);
        let b = rand_tensor(&mut r, &[cout]);
        let w = rand_tensor_away_from_zero(&mut r, &[batch, cout, hout, wout], 0.3);
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
            weighted_loss(t, y, &w)
        };
        (vec![x, wt, b], Box::new(f))
    });
}

#[test]
fn grad_sdpa() {
    check_instances("sdpa", INSTANCES, |seed| {
        let mut r = rng(4000 + seed);
        let heads = *[1usize, 2].get(r.gen_range(0..2)).unwrap();
        let t_len = r.gen_range(2..5usize);
        let d = heads * r.gen_range(2..4usize);
        let batch = r.gen_range(1..3usize);
        let q = rand_tensor(&mut r, &[batch, t_len, d]);
        let k = rand_tensor(&mut r, &[batch, t_len, d]);
        let v = rand_tensor(&mut r, &[batch, t_len, d]);
        let w = rand_tensor_away_from_zero(&mut r, &[batch, t_len, d], 0.3);
        // half the instances mask out one key column per sample
        let mask = if seed % 2 == 0 {
            let mut m = vec![0.0f64; batch * t_len];
            for b in 0..batch {
                m[b * t_len + r.gen_range(0..t_len)] = MASK_NEG;
            }
            Some(m)
        } else {
            None
        };
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.sdpa(ids[0], ids[1], ids[2], heads, mask.clone())?;
            weighted_loss(t, y, &w)
        };
        (vec![q, k, v], Box::new(f))
    });
}

#[test]
fn grad_softmax() {
    check_instances("softmax", INSTANCES, |seed| {
        let mut r = rng(5000 + seed);
        let rows = r.gen_range(1..4usize);
        let cols = r.gen_range(2..6usize);
        let x = rand_tensor(&mut r, &[rows, cols]);
        let w = rand_tensor_away_from_zero(&mut r, &[rows, cols], 0.3);
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.softmax(ids[0])?;
            weighted_loss(t, y, &w)
        };
        (vec![x], Box::new(f))
    });
}

#[test]
fn grad_layer_norm() {
    check_instances("layer_norm", INSTANCES, |seed| {
        let mut r = rng(6000 + seed);
        let rows = r.gen_range(1..4usize);
        let dim = r.gen_range(4..8usize);
        let x = rand_norm_input(&mut r, &[rows, dim], dim);
        let gamma = rand_tensor_away_from_zero(&mut r, &[dim], 0.3);
        let beta = rand_tensor(&mut r, &[dim]);
        let w = rand_tensor_away_from_zero(&mut r, &[rows, dim], 0.3);
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_loss(t, y, &w)
        };
        (vec![x, gamma, beta], Box::new(f))
    });
}

#[test]
fn grad_group_norm() {
    check_instances("group_norm", INSTANCES, |seed| {
        let mut r = rng(7000 + seed);
        let batch = r.gen_range(1..3usize);
        let groups = *[1usize, 2].get(r.gen_range(0..2)).unwrap();
        let ch = groups * r.gen_range(1..3usize);
        let spatial = r.gen_range(4..8usize);
        let x = rand_norm_input(&mut r, &[batch, ch, spatial], (ch / groups) * spatial);
        let gamma = rand_tensor_away_from_zero(&mut r, &[ch], 0.3);
        let beta = rand_tensor(&mut r, &[ch]);
        let w = rand_tensor_away_from_zero(&mut r, &[batch, ch, spatial], 0.3);
        let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = t.group_norm(ids[0], ids[1], ids[2], groups, 1e-5)?;
            weighted_loss(t, y, &w)
        };
        (vec![x, gamma, beta], Box::new(f))
    });
}

#[test]
fn grad_pointwise_and_elementwise() {
    // relu, gelu, add, sub, mul, div, scalar ops, film in one battery
    check_instances("pointwise", INSTANCES, |seed| {
        let mut r = rng(8000 + seed);
        let n = r.gen_range(2..6usize);
        let which = seed % 8;
        match which {
            0 | 1 => {
                // relu / gelu: keep inputs off the relu kink and off gelu's
                // stationary point near x = -0.752 (zero denominator there)
                let mut x = rand_tensor_away_from_zero(&mut r, &[n], 0.05);
                for v in x.data_mut() {
                    if (*v + 0.752).abs() < 0.15 {
                        *v += 0.3;
                    }
                }
                let w = rand_tensor_away_from_zero(&mut r, &[n], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = if which == 0 { t.relu(ids[0])? } else { t.gelu(ids[0])? };
                    weighted_loss(t, y, &w)
                };
                (vec![x], Box::new(f) as Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> diffnav::Result<NodeId>>)
            }
            2 | 3 | 4 => {
                let a = rand_tensor(&mut r, &[n]);
                let b = if which == 4 {
                    rand_tensor_away_from_zero(&mut r, &[n], 0.5)
                } else {
                    rand_tensor(&mut r, &[n])
                };
                let w = rand_tensor_away_from_zero(&mut r, &[n], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = match which {
                        2 => t.add(ids[0], ids[1])?,
                        3 => t.mul(ids[0], ids[1])?,
                        _ => t.div(ids[0], ids[1])?,
                    };
                    weighted_loss(t, y, &w)
                };
                (vec![a, b], Box::new(f))
            }
            5 => {
                let a = rand_tensor(&mut r, &[n]);
                let b = rand_tensor(&mut r, &[n]);
                let w = rand_tensor_away_from_zero(&mut r, &[n], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.sub(ids[0], ids[1])?;
                    weighted_loss(t, y, &w)
                };
                (vec![a, b], Box::new(f))
            }
            6 => {
                let x = rand_tensor(&mut r, &[n]);
                let sc = r.gen_range(-2.0..2.0);
                let ad = r.gen_range(-2.0..2.0);
                let w = rand_tensor_away_from_zero(&mut r, &[n], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.mul_scalar(ids[0], sc)?;
                    let y = t.add_scalar(y, ad)?;
                    weighted_loss(t, y, &w)
                };
                (vec![x], Box::new(f))
            }
            _ => {
                let (batch, ch, len) = (r.gen_range(1..3usize), r.gen_range(1..3usize), n);
                let x = rand_tensor(&mut r, &[batch, ch, len]);
                let s = rand_tensor(&mut r, &[batch, ch]);
                let sh = rand_tensor(&mut r, &[batch, ch]);
                let w = rand_tensor_away_from_zero(&mut r, &[batch, ch, len], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.film(ids[0], ids[1], ids[2])?;
                    weighted_loss(t, y, &w)
                };
                (vec![x, s, sh], Box::new(f))
            }
        }
    });
}

#[test]
fn grad_shape_ops() {
    // concat, narrow, reshape, broadcast_add, upsample, replace_token, reductions
    check_instances("shape_ops", INSTANCES, |seed| {
        let mut r = rng(9000 + seed);
        let which = seed % 7;
        match which {
            0 => {
                let a = rand_tensor(&mut r, &[2, 3]);
                let b = rand_tensor(&mut r, &[2, 2]);
                let w = rand_tensor_away_from_zero(&mut r, &[2, 5], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.concat(1, &[ids[0], ids[1]])?;
                    weighted_loss(t, y, &w)
                };
                (vec![a, b], Box::new(f) as Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> diffnav::Result<NodeId>>)
            }
            1 => {
                let x = rand_tensor(&mut r, &[3, 5]);
                let w = rand_tensor_away_from_zero(&mut r, &[3, 2], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.narrow(ids[0], 1, 1, 2)?;
                    weighted_loss(t, y, &w)
                };
                (vec![x], Box::new(f))
            }
            2 => {
                let x = rand_tensor(&mut r, &[2, 6]);
                let w = rand_tensor_away_from_zero(&mut r, &[3, 4], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.reshape(ids[0], vec![3, 4])?;
                    weighted_loss(t, y, &w)
                };
                (vec![x], Box::new(f))
            }
            3 => {
                let x = rand_tensor(&mut r, &[3, 4]);
                let a = rand_tensor(&mut r, &[4]);
                let w = rand_tensor_away_from_zero(&mut r, &[3, 4], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.broadcast_add(ids[0], ids[1])?;
                    weighted_loss(t, y, &w)
                };
                (vec![x, a], Box::new(f))
            }
            4 => {
                let x = rand_tensor(&mut r, &[1, 2, 3]);
                let w = rand_tensor_away_from_zero(&mut r, &[1, 2, 6], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.upsample_nearest_1d(ids[0], 2)?;
                    weighted_loss(t, y, &w)
                };
                (vec![x], Box::new(f))
            }
            5 => {
                let x = rand_tensor(&mut r, &[2, 3, 4]);
                let rep = rand_tensor(&mut r, &[4]);
                let gates = vec![true, seed % 3 == 0];
                let w = rand_tensor_away_from_zero(&mut r, &[2, 3, 4], 0.3);
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    let y = t.replace_token(ids[0], ids[1], 1, gates.clone())?;
                    weighted_loss(t, y, &w)
                };
                (vec![x, rep], Box::new(f))
            }
            _ => {
                let x = rand_tensor(&mut r, &[2, 3]);
                let even = seed % 2 == 0;
                let f = move |t: &mut Tape<f64>, ids: &[NodeId]| {
                    if even {
                        t.sum_all(ids[0])
                    } else {
                        t.mean_all(ids[0])
                    }
                };
                (vec![x], Box::new(f))
            }
        }
    });
}

// ── Pinned example values ────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut r = rng(42);
    let a = rand_tensor(&mut r, &[3, 3]);
    let mut tape = Tape::new();
    let eye = tape.input(
        Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
    );
    let av = tape.input(a.clone());
    let y = tape.matmul(eye, av).unwrap();
    assert_eq!(tape.value(y).data(), a.data());
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0_f64 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, &[1, 1, 6]);
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let w = tape.input(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let b = tape.input(Tensor::new(vec![1], vec![0.0]).unwrap());
    let y = tape.conv1d(xi, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn backward_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
    let s = tape.sum_all(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_product_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar_value(2.0));
    let y = tape.param(Tensor::scalar_value(3.0));
    let p = tape.mul(x, y).unwrap();
    let s = tape.sum_all(p).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 3.0);
    assert_eq!(grads.get(y).unwrap().item(), 2.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert!(tape.backward(y).is_err());
}

#[test]
fn three_layer_network_matches_finite_differences() {
    let mut r = rng(99);
    let x = rand_tensor(&mut r, &[2, 4]);
    let w1 = rand_tensor(&mut r, &[4, 5]);
    let b1 = rand_tensor(&mut r, &[5]);
    let w2 = rand_tensor(&mut r, &[5, 4]);
    let b2 = rand_tensor(&mut r, &[4]);
    let w3 = rand_tensor(&mut r, &[4, 1]);
    let b3 = rand_tensor(&mut r, &[1]);
    let xi = x.clone();
    let err = check_tape_gradients(
        move |t, ids| {
            let x = t.input(xi.clone());
            let h1 = t.matmul(x, ids[0])?;
            let h1 = t.broadcast_add(h1, ids[1])?;
            let h1 = t.gelu(h1)?;
            let h2 = t.matmul(h1, ids[2])?;
            let h2 = t.broadcast_add(h2, ids[3])?;
            let h2 = t.relu(h2)?;
            let h3 = t.matmul(h2, ids[4])?;
            let h3 = t.broadcast_add(h3, ids[5])?;
            t.mean_all(h3)
        },
        &[w1, b1, w2, b2, w3, b3],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "3-layer network rel err {err:.3e}");
}

#[test]
fn finite_difference_exact_for_quadratic() {
    // f(x) = x^2 at x=3: central difference is exact up to rounding
    let err = finite_difference_check(|p| p[0] * p[0], &[3.0], &[6.0], STEP);
    assert!(err < 1e-6, "quadratic rel err {err:.3e}");
}

#[test]
fn finite_difference_flags_nonsmooth_point() {
    // |x| at 0: central difference gives 0 regardless of the claimed
    // one-sided derivative, so the mismatch is flagged as a large error.
    let err = finite_difference_check(|p| p[0].abs(), &[0.0], &[1.0], STEP);
    assert!(err > 1e3, "expected a flagged error, got {err:.3e}");
}

// ── Masked attention semantics ───────────────────────────────────────

#[test]
fn masked_key_gets_exactly_zero_gradient() {
    let mut r = rng(123);
    let batch = 2;
    let t_len = 4;
    let d = 4;
    let q = rand_tensor(&mut r, &[batch, t_len, d]);
    let k = rand_tensor(&mut r, &[batch, t_len, d]);
    let v = rand_tensor(&mut r, &[batch, t_len, d]);

    // mask key column 2 in every sample
    let mut mask = vec![0.0f64; batch * t_len];
    for b in 0..batch {
        mask[b * t_len + 2] = MASK_NEG;
    }

    let mut tape = Tape::new();
    let qi = tape.param(q);
    let ki = tape.param(k);
    let vi = tape.param(v);
    let y = tape.sdpa(qi, ki, vi, 2, Some(mask)).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dv = grads.get(vi).unwrap();
    let dk = grads.get(ki).unwrap();
    for b in 0..batch {
        for j in 0..d {
            assert_eq!(dv.data()[(b * t_len + 2) * d + j], 0.0, "dv at masked key");
            assert_eq!(dk.data()[(b * t_len + 2) * d + j], 0.0, "dk at masked key");
        }
    }
    // unmasked keys do receive gradient
    assert!(dv.data().iter().any(|&g| g != 0.0));
}

#[test]
fn masked_attention_output_independent_of_masked_value() {
    let mut r = rng(321);
    let q = rand_tensor(&mut r, &[1, 3, 4]);
    let k = rand_tensor(&mut r, &[1, 3, 4]);
    let v1 = rand_tensor(&mut r, &[1, 3, 4]);
    let mut v2 = v1.clone();
    // perturb only the masked key's value vector
    for j in 0..4 {
        v2.data_mut()[2 * 4 + j] = -99.0;
    }
    let mask = vec![0.0, 0.0, MASK_NEG];

    let run = |v: Tensor<f64>| {
        let mut tape = Tape::new();
        let qi = tape.input(q.clone());
        let ki = tape.input(k.clone());
        let vi = tape.input(v);
        let y = tape.sdpa(qi, ki, vi, 2, Some(mask.clone())).unwrap();
        tape.value(y).data().to_vec()
    };
    let y1 = run(v1);
    let y2 = run(v2);
    for (a, b) in y1.iter().zip(&y2) {
        assert_eq!(a.to_bits(), b.to_bits(), "masked value leaked into output");
    }
}

// ── Determinism and replay ───────────────────────────────────────────

#[test]
fn forward_backward_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(555);
        let x = rand_tensor(&mut r, &[4, 6]);
        let w = rand_tensor(&mut r, &[6, 6]);
        let mut tape = Tape::new();
        let xi = tape.input(x);
        let wi = tape.param(w);
        let h = tape.matmul(xi, wi).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.softmax(h).unwrap();
        let loss = tape.mean_all(h).unwrap();
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).item().to_bits(),
            grads
                .get(wi)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn replay_reproduces_tape_bit_identically() {
    let mut r = rng(777);
    let mut tape = Tape::<f64>::new();
    let x = tape.input(rand_tensor(&mut r, &[2, 3, 8]));
    let w = tape.param(rand_tensor(&mut r, &[4, 3, 5]));
    let b = tape.param(rand_tensor(&mut r, &[4]));
    let y = tape.conv1d(x, w, b, 1, 2).unwrap();
    let g = tape.gelu(y).unwrap();
    let _ = tape.mean_all(g).unwrap();
    assert!(tape.replay_identical().unwrap());
}

#[test]
fn finite_outputs_on_finite_inputs() {
    let mut r = rng(888);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(rand_tensor(&mut r, &[3, 4, 4]));
    let gamma = tape.param(rand_tensor(&mut r, &[4]));
    let beta = tape.param(rand_tensor(&mut r, &[4]));
    let y = tape.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
    let s = tape.softmax(y).unwrap();
    let loss = tape.mean_all(s).unwrap();
    assert!(tape.value(loss).all_finite());
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().all_finite());
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(Tensor::zeros(vec![2, 3]));
    let b = tape.input(Tensor::zeros(vec![4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "got: {err}");
    assert!(err.contains('3') && err.contains('4'), "got: {err}");
}
