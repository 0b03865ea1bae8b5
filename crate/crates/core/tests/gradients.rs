use dvqa_mini::autodiff::{check_leaves, sigmoid, Tape, Var};
use dvqa_mini::distill::distill_terms;
use dvqa_mini::net::{build_teacher, gradient_check, pair_forward, QualityNetConfig};
use dvqa_mini::{Geometry, Patch, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const COORDS: usize = 24;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, seed));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn assert_grads<F>(name: &str, leaves: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = check_leaves(leaves, COORDS, 7, f).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
}

#[test]
fn conv2d_all_paddings_and_strides() {
    for (stride, padding, k) in [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        let x = random(&[2, 3, 7, 6], 1);
        let w = random(&[4, 3, k, k], 2);
        let b = random(&[4], 3);
        assert_grads(&format!("conv s{stride} p{padding} k{k}"), &[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
            project(t, y, 9)
        });
    }
}

#[test]
fn dense_and_matmul() {
    assert_grads("dense", &[random(&[5, 4], 1), random(&[3, 4], 2), random(&[3], 3)], |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        project(t, y, 4)
    });
    assert_grads("matmul", &[random(&[3, 4], 5), random(&[4, 2], 6)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 7)
    });
    assert_grads("transpose", &[random(&[3, 4], 8)], |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y, 9)
    });
}

#[test]
fn activations() {
    let x = random(&[4, 6], 11);
    assert_grads("relu", std::slice::from_ref(&x), |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 1)
    });
    assert_grads("leaky", std::slice::from_ref(&x), |t, v| {
        let y = t.leaky_relu(v[0], 0.01);
        project(t, y, 2)
    });
    assert_grads("sigmoid", std::slice::from_ref(&x), |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 3)
    });
    let pos = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
    assert_grads("ln", &[pos], |t, v| {
        let y = t.ln(v[0]);
        project(t, y, 4)
    });
    assert_grads("clamp", &[x], |t, v| {
        let y = t.clamp(v[0], -0.5, 0.5);
        project(t, y, 5)
    });
}

#[test]
fn pooling_and_reshaping() {
    let x = random(&[2, 3, 6, 4], 21);
    assert_grads("avg_pool2", std::slice::from_ref(&x), |t, v| {
        let y = t.avg_pool2(v[0])?;
        project(t, y, 1)
    });
    assert_grads("global_avg_pool", std::slice::from_ref(&x), |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, 2)
    });
    assert_grads("concat", &[x.clone(), random(&[2, 2, 6, 4], 22)], |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        project(t, y, 3)
    });
    assert_grads("reshape", &[x], |t, v| {
        let y = t.reshape(v[0], vec![2, 72])?;
        project(t, y, 4)
    });
    assert_grads("slice_rows", &[random(&[6, 3], 23)], |t, v| {
        let y = t.slice_rows(v[0], 2, 3)?;
        project(t, y, 5)
    });
}

#[test]
fn elementwise_arithmetic() {
    let (a, b) = (random(&[3, 5], 31), random(&[3, 5], 32));
    assert_grads("add/sub/mul", &[a, b], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let m = t.mul(s, d)?;
        let c = t.scale(m, 1.7);
        let c = t.add_scalar(c, 0.3);
        let y = t.mean(c);
        Ok(t.add_scalar(y, 0.0))
    });
}

fn small_net() -> QualityNetConfig {
    QualityNetConfig {
        patch: Geometry::new(1, 8, 8),
        conv_widths: vec![3, 4],
        head_width: 4,
        seed: 5,
        ..Default::default()
    }
}

fn patch(g: Geometry, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Patch::new(g, (0..g.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn distillation_loss_end_to_end() {
    let (spec, params) = build_teacher::<f64>(&small_net()).unwrap();
    let b = 3;
    let ps: Vec<Patch> = (0..4 * b).map(|i| patch(spec.patch, i as u64)).collect();
    let refs: Vec<&Patch> = ps.iter().collect();
    let (r1, d1, r2, d2) = (&refs[0..b], &refs[b..2 * b], &refs[2 * b..3 * b], &refs[3 * b..]);
    let report = gradient_check(&params, COORDS, 3, |tape, bound| {
        let f = pair_forward(tape, &spec, bound, r1, d1, r2, d2)?;
        let pt = tape.constant(Tensor::new(vec![b, 1], vec![0.8, 0.3, 0.55]).unwrap());
        let y = tape.constant(Tensor::new(vec![b, 1], vec![1.0, 0.0, 1.0]).unwrap());
        Ok(distill_terms(tape, f.p, pt, y, 0.1)?.total)
    })
    .unwrap();
    assert_eq!(report.checked, params.tensors().iter().map(|t| t.len().min(COORDS)).sum::<usize>());
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn corrupted_backward_is_detected() {
    let x = random(&[10], 41);
    let r = check_leaves(&[x], 20, 1, |t, v| {
        let y = t.custom_unary(v[0], |a| a * a, Box::new(|x, _, g| x.iter().zip(g).map(|(a, g)| 3.0 * a * g).collect()));
        project(t, y, 2)
    })
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_oracle() {
    for (stride, pad, k, seed) in [(1, 1, 3, 1), (2, 0, 3, 2), (1, 2, 5, 3), (3, 1, 3, 4)] {
        let x = random(&[2, 3, 9, 7], seed);
        let w = random(&[5, 3, k, k], seed + 10);
        let b = random(&[5], seed + 20);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        let got = t.value(y).data();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn one_hot_kernel_selects_a_channel() {
    let x = random(&[1, 4, 5, 5], 3);
    for c in 0..4 {
        let mut w = vec![0.0; 4];
        w[c] = 1.0;
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(Tensor::new(vec![1, 4, 1, 1], w).unwrap());
        let bv = t.constant(Tensor::zeros(vec![1]));
        let y = t.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &x.data()[c * 25..(c + 1) * 25]);
    }
}

#[test]
fn sigmoid_symmetry() {
    for i in -400..=400 {
        let x = i as f64 * 0.1;
        let (a, b) = (sigmoid(x), sigmoid(-x));
        assert!(a > 0.0 && a < 1.0 || x.abs() > 30.0);
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let (spec, params) = build_teacher::<f32>(&small_net()).unwrap();
    let (r, d) = (patch(spec.patch, 1), patch(spec.patch, 2));
    let a = dvqa_mini::net::quality_score(&spec, &params, &r, &d).unwrap();
    let b = dvqa_mini::net::quality_score(&spec, &params, &r, &d).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
