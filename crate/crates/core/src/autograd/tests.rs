use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check<F>(build: F, inputs: &[Tensor<f64>])
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let rep = grad_check(build, inputs, 1e-6, 1e-6, 7).unwrap();
    assert!(rep.passed(1e-5), "{rep:?}");
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (rnd(&[3, 4], 1), rnd(&[4, 5], 2));
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((g.value(c).at(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_direct_loop() {
    let x = rnd(&[2, 4, 5, 6], 3);
    for (groups, stride, pad, k) in [(1, 1, 1, 3), (2, 2, 1, 3), (4, 2, 1, 3), (1, 2, 0, 2), (1, 1, 0, 1)] {
        let cout = 4;
        let w = rnd(&[cout, 4 / groups, k, k], 4);
        let bias = rnd(&[cout], 5);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv2d(vx, vw, Some(vb), stride, pad, groups).unwrap();
        let ys = g.shape(y).to_vec();
        let (cin_g, cout_g) = (4 / groups, cout / groups);
        for n in 0..2 {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ys[2] {
                    for ox in 0..ys[3] {
                        let mut s = bias.data()[co];
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    s += w.at(&[co, ci, ky, kx])
                                        * x.at(&[n, grp * cin_g + ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                        assert!((g.value(y).at(&[n, co, oy, ox]) - s).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

#[test]
fn grads_elementwise_broadcast() {
    let ins = [rnd(&[2, 3, 4], 1), rnd(&[3, 1], 2)];
    check(|g, v| g.add(v[0], v[1]), &ins);
    check(|g, v| g.sub(v[0], v[1]), &ins);
    check(|g, v| g.mul(v[0], v[1]), &ins);
    let den = [rnd(&[2, 3, 4], 1), rnd(&[3, 1], 2).map(|x| x.abs() + 1.0)];
    check(|g, v| g.div(v[0], v[1]), &den);
    check(|g, v| Ok(g.scale(v[0], -2.5)), &ins[..1]);
}

#[test]
fn grads_matmul_batched() {
    check(|g, v| g.matmul(v[0], v[1]), &[rnd(&[2, 3, 4], 1), rnd(&[4, 5], 2)]);
    check(|g, v| g.matmul(v[0], v[1]), &[rnd(&[2, 2, 3, 4], 1), rnd(&[2, 1, 4, 2], 2)]);
}

#[test]
fn grads_conv() {
    let x = rnd(&[2, 4, 5, 5], 1);
    check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1), &[x.clone(), rnd(&[3, 4, 3, 3], 2), rnd(&[3], 3)]);
    check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 4), &[x.clone(), rnd(&[4, 1, 3, 3], 2), rnd(&[4], 3)]);
    check(|g, v| g.conv2d(v[0], v[1], None, 1, 0, 2), &[x, rnd(&[6, 2, 2, 2], 2)]);
}

#[test]
fn grads_norms_and_activations() {
    let ins = [rnd(&[2, 3, 6], 1), rnd(&[6], 2), rnd(&[6], 3)];
    check(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &ins);
    let ins2 = [rnd(&[2, 4, 3, 3], 1), rnd(&[4], 2), rnd(&[4], 3)];
    check(|g, v| g.layer_norm_2d(v[0], v[1], v[2], 1e-5), &ins2);
    let x = [rnd(&[3, 5], 9)];
    check(|g, v| Ok(g.gelu(v[0])), &x);
    check(|g, v| Ok(g.sigmoid(v[0])), &x);
    check(|g, v| Ok(g.exp(v[0])), &x);
    check(|g, v| g.softmax(v[0]), &x);
    check(|g, v| g.log_softmax(v[0]), &x);
    check(|g, v| g.causal_softmax(v[0]), &[rnd(&[2, 4, 4], 4)]);
    check(|g, v| g.l2_normalize(v[0]), &x);
}

#[test]
fn grads_shape_ops() {
    let x = [rnd(&[2, 3, 4], 1)];
    check(|g, v| g.reshape(v[0], &[6, 4]), &x);
    check(|g, v| g.permute(v[0], &[2, 0, 1]), &x);
    check(|g, v| g.transpose(v[0]), &x);
    check(|g, v| Ok(g.sum(v[0])), &x);
    check(|g, v| Ok(g.mean(v[0])), &x);
    check(|g, v| g.mean_axis(v[0], 1), &x);
    check(|g, v| g.select_rows(v[0], &[2, 0]), &x);
    check(|g, v| g.embedding(v[0], &[1, 0, 1, 3], &[2, 2]), &[rnd(&[4, 3], 2)]);
    check(|g, v| g.diagonal(v[0]), &[rnd(&[3, 3], 2)]);
}

#[test]
fn causal_softmax_masks_future() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rnd(&[3, 3], 1));
    let y = g.causal_softmax(x).unwrap();
    let v = g.value(y);
    assert_eq!(v.at(&[0, 1]), 0.0);
    assert_eq!(v.at(&[1, 2]), 0.0);
    assert!((v.at(&[0, 0]) - 1.0).abs() < 1e-12);
}

#[test]
fn backward_rejects_non_scalar_and_skips_unreachable() {
    let mut g = Graph::<f64>::new();
    let a = g.param(rnd(&[2], 1));
    let unused = g.param(rnd(&[2], 2));
    let b = g.scale(a, 2.0);
    assert!(matches!(g.backward(b), Err(Error::Contract(_))));
    let l = g.sum(b);
    g.backward(l).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0]);
    assert!(g.grad(unused).is_none());
}

#[test]
fn dimension_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("{other:?}"),
    }
    let z = g.constant(Tensor::zeros(vec![1, 3]));
    assert!(matches!(g.l2_normalize(z), Err(Error::Numeric(_))));
}
