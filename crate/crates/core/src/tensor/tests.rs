use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random tensor kept away from zero, for kinked or singular ops.
fn offset_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.25);
    }
    t
}

fn positive_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.abs() + 0.5;
    }
    t
}

// Central finite differences against the tape gradient, checking every
// coordinate of every input. The forward function is rebuilt per evaluation,
// so the only shared ingredient is the op implementation under test.
fn fd_check<F>(inputs: &[Tensor], tol: f64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.value(root).len(), 1, "fd_check needs a scalar readout");
    tape.backward(root).unwrap();
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let h = 1e-4;
    for (pi, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let eval = |delta: f64| {
                let mut xs: Vec<Tensor> = inputs.to_vec();
                xs[pi].data_mut()[c] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = xs.into_iter().map(|x| t.leaf(x, false)).collect();
                let r = build(&mut t, &vs);
                t.value(r).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = grads[pi].data()[c];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            assert!(
                err <= tol,
                "input {pi} coord {c}: autodiff {ad} vs finite-diff {fd} (err {err:.3e})"
            );
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
    let s = tape.softmax(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one_and_are_positive() {
    let mut r = rng(3);
    for _ in 0..20 {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[4, 5], &mut r), false);
        let s = tape.softmax(x).unwrap();
        let sv = tape.value(s);
        for row in 0..4 {
            let sum: f64 = sv.data()[row * 5..(row + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(sv.data()[row * 5..(row + 1) * 5].iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn outer_product_matches_definition() {
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::vector(vec![1.0, 2.0]), false);
    let v = tape.leaf(Tensor::vector(vec![3.0, 4.0]), false);
    let o = tape.outer_product(u, v).unwrap();
    assert_eq!(tape.value(o).shape(), &[2, 2]);
    assert_eq!(tape.value(o).data(), &[3.0, 4.0, 6.0, 8.0]);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]), false);
    let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false);
    assert!(matches!(
        tape.add(a, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let m = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]), false);
    assert!(matches!(
        tape.matmul(m, m),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0]), false);
    assert!(matches!(
        tape.recip(x),
        Err(TensorError::NonFinite { op: "recip" })
    ));
    let y = tape.leaf(Tensor::vector(vec![-1.0]), false);
    assert!(matches!(tape.sqrt(y), Err(TensorError::NonFinite { .. })));
}

// Gradient of every primitive against central finite differences. The scalar
// readout projects multi-element outputs onto a fixed random cotangent.
#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let cot34 = Tensor::uniform(&[12], 1.0, &mut r);
        let project = move |tape: &mut Tape, out: Var, cot: &Tensor| {
            let flat = tape.flatten(out).unwrap();
            let c = tape.constant(cot.clone());
            tape.dot(flat, c).unwrap()
        };

        let a = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[3, 4], &mut r);
        let cot = cot34.clone();
        fd_check(&[a.clone(), b.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[a.clone(), b.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.sub(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[a.clone(), b.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.hadamard(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[a.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.scale(v[0], -1.7).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[a.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.add_scalar(v[0], 0.3).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[offset_tensor(&[3, 4], &mut r)], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.clamp_min(v[0], 0.0).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[a.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.sigmoid(v[0]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[offset_tensor(&[3, 4], &mut r)], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.relu(v[0]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[positive_tensor(&[3, 4], &mut r)], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.sqrt(v[0]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[offset_tensor(&[3, 4], &mut r)], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.recip(v[0]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[a.clone()], 1e-4, {
            let cot = cot.clone();
            move |t, v| {
                let s = t.softmax(v[0]).unwrap();
                project(t, s, &cot)
            }
        });

        // Linear algebra.
        let m1 = random_tensor(&[3, 4], &mut r);
        let m2 = random_tensor(&[4, 2], &mut r);
        let cot_mm = Tensor::uniform(&[6], 1.0, &mut r);
        fd_check(&[m1.clone(), m2.clone()], 1e-4, {
            let cot = cot_mm.clone();
            move |t, v| {
                let s = t.matmul(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });
        let x4 = random_tensor(&[4], &mut r);
        let cot_mv = Tensor::uniform(&[3], 1.0, &mut r);
        fd_check(&[m1.clone(), x4.clone()], 1e-4, {
            let cot = cot_mv.clone();
            move |t, v| {
                let s = t.matvec(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });
        let y4 = random_tensor(&[4], &mut r);
        fd_check(&[x4.clone(), y4.clone()], 1e-4, |t, v| t.dot(v[0], v[1]).unwrap());
        let cot_outer = Tensor::uniform(&[12], 1.0, &mut r);
        fd_check(&[random_tensor(&[3], &mut r), x4.clone()], 1e-4, {
            let cot = cot_outer.clone();
            move |t, v| {
                let s = t.outer_product(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[m1.clone()], 1e-4, {
            let cot = cot34.clone();
            move |t, v| {
                let s = t.transpose(v[0]).unwrap();
                project(t, s, &cot)
            }
        });

        // Reductions.
        fd_check(&[a.clone()], 1e-4, |t, v| t.sum(v[0]).unwrap());
        fd_check(&[a.clone()], 1e-4, |t, v| t.mean(v[0]).unwrap());
        let cot3 = Tensor::uniform(&[6], 1.0, &mut r);
        fd_check(&[random_tensor(&[2, 3, 4], &mut r)], 1e-4, {
            let cot = cot3.clone();
            move |t, v| {
                let s = t.mean_last_axis(v[0]).unwrap();
                project(t, s, &cot)
            }
        });
        fd_check(&[offset_tensor(&[3, 4], &mut r)], 1e-4, |t, v| {
            t.l2norm(v[0]).unwrap()
        });
        let scalar = offset_tensor(&[], &mut r);
        fd_check(&[a.clone(), scalar], 1e-4, {
            let cot = cot34.clone();
            move |t, v| {
                let s = t.mul_by_scalar(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });

        // Convolution and bias.
        let img = random_tensor(&[5, 5, 2], &mut r);
        let ker = random_tensor(&[3, 3, 3, 2], &mut r);
        let cot_conv = Tensor::uniform(&[27], 1.0, &mut r);
        fd_check(&[img.clone(), ker.clone()], 1e-4, {
            let cot = cot_conv.clone();
            move |t, v| {
                let s = t.conv2d(v[0], v[1], 2, 1).unwrap();
                project(t, s, &cot)
            }
        });
        let bias = random_tensor(&[2], &mut r);
        let cot_hb = Tensor::uniform(&[50], 1.0, &mut r);
        fd_check(&[img.clone(), bias], 1e-4, {
            let cot = cot_hb.clone();
            move |t, v| {
                let s = t.channel_bias(v[0], v[1]).unwrap();
                project(t, s, &cot)
            }
        });

        // Shape plumbing.
        fd_check(&[a.clone()], 1e-4, {
            let cot = cot34.clone();
            move |t, v| {
                let s = t.reshape(v[0], vec![4, 3]).unwrap();
                project(t, s, &cot)
            }
        });
        let cot7 = Tensor::uniform(&[7], 1.0, &mut r);
        fd_check(&[random_tensor(&[3], &mut r), random_tensor(&[4], &mut r)], 1e-4, {
            let cot = cot7.clone();
            move |t, v| {
                let s = t.concat(&[v[0], v[1]]).unwrap();
                project(t, s, &cot)
            }
        });
        let cot_sr = Tensor::uniform(&[8], 1.0, &mut r);
        fd_check(&[random_tensor(&[4], &mut r), random_tensor(&[4], &mut r)], 1e-4, {
            let cot = cot_sr.clone();
            move |t, v| {
                let s = t.stack_rows(&[v[0], v[1]]).unwrap();
                project(t, s, &cot)
            }
        });
        let cot4 = Tensor::uniform(&[4], 1.0, &mut r);
        fd_check(&[m1.clone()], 1e-4, {
            let cot = cot4.clone();
            move |t, v| {
                let s = t.slice_row(v[0], 1).unwrap();
                project(t, s, &cot)
            }
        });
        let cot_sc = Tensor::uniform(&[25], 1.0, &mut r);
        fd_check(&[img.clone()], 1e-4, {
            let cot = cot_sc.clone();
            move |t, v| {
                let s = t.slice_channel(v[0], 1).unwrap();
                project(t, s, &cot)
            }
        });

        // Loss.
        fd_check(&[random_tensor(&[2], &mut r)], 1e-4, |t, v| {
            t.cross_entropy_logits(v[0], 1).unwrap()
        });
    }
}

#[test]
fn backward_is_deterministic() {
    let run = |seed: u64| {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&[4, 4], &mut r), true);
        let b = tape.leaf(random_tensor(&[4, 4], &mut r), true);
        let m = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(m).unwrap();
        let loss = tape.mean(s).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.value(loss).item(),
            tape.grad(a).unwrap().clone(),
            tape.grad(b).unwrap().clone(),
        )
    };
    assert_eq!(run(9), run(9));
}

#[test]
fn conv2d_known_values() {
    // 1x1 input, 1x1 kernel: plain channel dot product.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]), false);
    let k = tape.leaf(Tensor::new(vec![1, 1, 1, 3], vec![0.5, 0.25, 2.0]), false);
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert!((tape.value(y).data()[0] - (0.5 + 0.5 + 6.0)).abs() < 1e-12);

    // Strided shape arithmetic: 64 -> 32 -> 16 -> 8.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[64, 64, 3]), false);
    let k1 = tape.leaf(Tensor::zeros(&[8, 3, 3, 3]), false);
    let y1 = tape.conv2d(x, k1, 2, 1).unwrap();
    assert_eq!(tape.value(y1).shape(), &[32, 32, 8]);
}

// ----- SVD -----

// Independent oracle: symmetric Jacobi eigensolver on A^T A, written here in
// test code with no shared machinery with the production SVD.
fn eig_sym_oracle(a: &Tensor) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..m {
                acc += a.data()[r * n + i] * a.data()[r * n + j];
            }
            g[i * n + j] = acc;
        }
    }
    for _ in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += g[p * n + q].abs();
                if g[p * n + q].abs() < 1e-15 {
                    continue;
                }
                let theta = 0.5 * (2.0 * g[p * n + q]).atan2(g[q * n + q] - g[p * n + p]);
                let (c, s) = (theta.cos(), theta.sin());
                for k in 0..n {
                    let (gpk, gqk) = (g[p * n + k], g[q * n + k]);
                    g[p * n + k] = c * gpk - s * gqk;
                    g[q * n + k] = s * gpk + c * gqk;
                }
                for k in 0..n {
                    let (gkp, gkq) = (g[k * n + p], g[k * n + q]);
                    g[k * n + p] = c * gkp - s * gkq;
                    g[k * n + q] = s * gkp + c * gkq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| g[i * n + i].max(0.0).sqrt()).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs
}

#[test]
fn svd_identity_has_unit_singular_values() {
    let svd = svd_truncated(&Tensor::eye(2), 2).unwrap();
    assert!((svd.s[0] - 1.0).abs() < 1e-12);
    assert!((svd.s[1] - 1.0).abs() < 1e-12);
}

#[test]
fn svd_rank_one_structure() {
    let u = [1.0, -2.0, 0.5];
    let v = [3.0, 4.0];
    let mut data = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            data[i * 2 + j] = u[i] * v[j];
        }
    }
    let a = Tensor::matrix(3, 2, data);
    let svd = svd_truncated(&a, 2).unwrap();
    let nu = (u.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let nv = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
    assert!((svd.s[0] - nu * nv).abs() < 1e-10);
    assert!(svd.s[1].abs() < 1e-10);
    // First left singular vector is +/- u / |u|.
    let sign = svd.u.data()[0].signum() * u[0].signum();
    for i in 0..3 {
        assert!((svd.u.data()[i * 2] - sign * u[i] / nu).abs() < 1e-10);
    }
}

#[test]
fn svd_matches_gram_eigenvalue_oracle() {
    let mut r = rng(42);
    for _ in 0..10 {
        let a = random_tensor(&[5, 3], &mut r);
        let svd = svd_truncated(&a, 3).unwrap();
        let oracle = eig_sym_oracle(&a);
        for k in 0..3 {
            assert!(
                (svd.s[k] - oracle[k]).abs() < 1e-8,
                "singular value {k}: {} vs oracle {}",
                svd.s[k],
                oracle[k]
            );
        }
        // Orthonormal columns.
        for i in 0..3 {
            for j in 0..3 {
                let mut uu = 0.0;
                for row in 0..5 {
                    uu += svd.u.at2(row, i) * svd.u.at2(row, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((uu - want).abs() < 1e-9);
            }
        }
        // Reconstruction.
        for row in 0..5 {
            for col in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += svd.s[k] * svd.u.at2(row, k) * svd.v.at2(col, k);
                }
                assert!((acc - a.at2(row, col)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn svd_rejects_bad_rank() {
    let a = Tensor::zeros(&[3, 2]);
    assert!(svd_truncated(&a, 3).is_err());
    assert!(svd_truncated(&a, 0).is_err());
}

// ----- optimizer -----

#[test]
fn sgd_zero_gradient_keeps_params_and_decays_velocity() {
    let mut opt = SgdMomentum::new(&[vec![2]], 0.001, 0.9, 0.9, 2);
    let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
    let grads = vec![Some(Tensor::vector(vec![0.0, 0.0]))];
    opt.step(&mut params, &grads).unwrap();
    assert_eq!(params[0].data(), &[1.0, -2.0]);
    assert_eq!(opt.velocity(0).data(), &[0.0, 0.0]);

    // A non-zero velocity decays by exactly the momentum factor.
    let grads1 = vec![Some(Tensor::vector(vec![1.0, 2.0]))];
    opt.step(&mut params, &grads1).unwrap();
    let v_before = opt.velocity(0).clone();
    opt.step(&mut params, &grads).unwrap();
    for (after, before) in opt.velocity(0).data().iter().zip(v_before.data()) {
        assert!((after - 0.9 * before).abs() < 1e-15);
    }
}

#[test]
fn sgd_single_step_arithmetic() {
    let mut opt = SgdMomentum::new(&[vec![]], 0.001, 0.9, 0.9, 2);
    let mut params = vec![Tensor::scalar(1.0)];
    opt.step(&mut params, &[Some(Tensor::scalar(1.0))]).unwrap();
    assert_eq!(params[0].item(), 0.999);
    assert_eq!(opt.velocity(0).item(), 1.0);
}

#[test]
fn sgd_trajectory_matches_reference_loop() {
    let mut r = rng(8);
    let mut opt = SgdMomentum::new(&[vec![3]], 0.01, 0.9, 0.9, 2);
    let mut params = vec![Tensor::vector(vec![0.1, -0.4, 0.7])];

    // Hand-rolled reference with plain scalars.
    let mut ref_p = [0.1, -0.4, 0.7];
    let mut ref_v = [0.0; 3];

    for step in 0..10 {
        let epoch = step / 3;
        opt.begin_epoch(epoch);
        let lr = 0.01 * 0.9f64.powi((epoch / 2) as i32);
        let g: Vec<f64> = (0..3).map(|_| r.gen::<f64>() - 0.5).collect();
        opt.step(&mut params, &[Some(Tensor::vector(g.clone()))]).unwrap();
        for i in 0..3 {
            ref_v[i] = 0.9 * ref_v[i] + g[i];
            ref_p[i] -= lr * ref_v[i];
        }
        assert_eq!(params[0].data(), &ref_p, "diverged at step {step}");
    }
}

#[test]
fn learning_rate_decays_every_two_epochs() {
    let mut opt = SgdMomentum::new(&[], 0.001, 0.9, 0.9, 2);
    for epoch in 0..8 {
        opt.begin_epoch(epoch);
        let expected = 0.001 * 0.9f64.powi((epoch / 2) as i32);
        assert_eq!(opt.learning_rate(), expected);
    }
}

// ----- checkpoint -----

#[test]
fn checkpoint_round_trip() {
    let mut r = rng(5);
    let tensors = vec![
        ("alpha".to_string(), random_tensor(&[3, 4], &mut r)),
        ("beta.gamma".to_string(), random_tensor(&[7], &mut r)),
        ("scalar".to_string(), Tensor::scalar(-2.5)),
    ];
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &tensors).unwrap();
    assert_eq!(&buf[..4], b"BIDO");
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 3);
    for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
        assert_eq!(n0, n1);
        assert_eq!(t0, t1);
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    assert!(matches!(
        read_checkpoint(&b"NOPE\x01\x00\x00\x00\x00\x00"[..]),
        Err(CheckpointError::BadMagic)
    ));
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &[]).unwrap();
    buf[4] = 99; // version
    assert!(matches!(
        read_checkpoint(buf.as_slice()),
        Err(CheckpointError::BadVersion(_))
    ));
}
