use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn specs_of(f: impl Fn(&mut Vec<ParamSpec>)) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    f(&mut v);
    v
}

fn store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    ParamStore::from_specs(specs, seed).unwrap()
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn zero_prefix(s: &mut ParamStore<f64>, prefix: &str) {
    let names: Vec<String> = s.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        let shape = s.get(&n).unwrap().shape().to_vec();
        s.set(&n, Tensor::zeros(shape)).unwrap();
    }
}

fn run(s: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = s.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = f(&mut g, &b, xv).unwrap();
    g.value(y).clone()
}

fn mb(cin: usize, cout: usize, stride: usize, norm: MbConvNorm) -> MbConv {
    MbConv {
        cin,
        cout,
        stride,
        expansion: 4,
        norm,
    }
}

#[test]
fn stem_shape_and_odd_input() {
    let stem = Stem { cin: 3, cout: 8 };
    let specs = specs_of(|v| stem.specs("stem", v));
    let s = store(&specs, 1);
    let y = run(&s, &rnd(&[1, 3, 16, 16], 2), |g, b, x| stem.forward(g, b, "stem", x));
    assert_eq!(y.shape(), &[1, 8, 8, 8]);
    let mut g = Graph::new();
    let b = s.bind(&mut g);
    let x = g.constant(rnd(&[1, 3, 15, 16], 2));
    assert!(matches!(stem.forward(&mut g, &b, "stem", x), Err(Error::Dimension { .. })));
}

#[test]
fn mbconv_zero_branch_is_identity() {
    for norm in [MbConvNorm::Ln, MbConvNorm::Bn, MbConvNorm::BnSe] {
        let blk = mb(6, 6, 1, norm);
        let specs = specs_of(|v| blk.specs("b", v));
        let mut s = store(&specs, 3);
        zero_prefix(&mut s, "b.project");
        if norm != MbConvNorm::Ln {
            // beta of the trailing BN also feeds the branch
            zero_prefix(&mut s, "b.bn3.bias");
        }
        let x = rnd(&[2, 6, 5, 5], 4);
        let y = run(&s, &x, |g, b, xv| blk.forward(g, b, "b", xv, &mut Ctx::eval(), 0.0));
        assert!(y.bitwise_eq(&x), "{norm:?}");
    }
}

#[test]
fn mbconv_stride_two_halves_and_projects() {
    let blk = mb(4, 8, 2, MbConvNorm::Ln);
    assert!(blk.has_shortcut());
    let specs = specs_of(|v| blk.specs("b", v));
    assert!(specs.iter().any(|s| s.name == "b.shortcut.weight"));
    assert!(!specs.iter().any(|s| s.name.contains("bn")));
    let y = run(&store(&specs, 1), &rnd(&[1, 4, 8, 8], 2), |g, b, x| {
        blk.forward(g, b, "b", x, &mut Ctx::eval(), 0.0)
    });
    assert_eq!(y.shape(), &[1, 8, 4, 4]);
    assert!(!specs_of(|v| mb(8, 8, 1, MbConvNorm::Ln).specs("c", v))
        .iter()
        .any(|s| s.name.contains("shortcut")));
}

#[test]
fn mbconv_param_count_closed_form() {
    let c = 160;
    let m = 4 * c;
    let specs = specs_of(|v| mb(c, c, 1, MbConvNorm::Ln).specs("b", v));
    let closed = 2 * c + (c * m + m) + (9 * m + m) + (m * c + c);
    assert_eq!(count_specs(&specs), closed as u64);
}

#[test]
fn se_gate_at_one_matches_plain_bn() {
    let se = mb(4, 4, 1, MbConvNorm::BnSe);
    let plain = mb(4, 4, 1, MbConvNorm::Bn);
    let se_specs = specs_of(|v| se.specs("b", v));
    let mut s = store(&se_specs, 5);
    // saturate the gate: sigmoid(40) rounds to 1 in f64
    zero_prefix(&mut s, "b.se.expand.weight");
    s.set("b.se.expand.bias", Tensor::full(vec![16], 40.0)).unwrap();
    let x = rnd(&[2, 4, 3, 3], 6);
    let y_se = run(&s, &x, |g, b, xv| se.forward(g, b, "b", xv, &mut Ctx::eval(), 0.0));
    let y_bn = run(&s, &x, |g, b, xv| plain.forward(g, b, "b", xv, &mut Ctx::eval(), 0.0));
    assert!(y_se.max_abs_diff(&y_bn) < 1e-14);
}

#[test]
fn geglu_matches_scalar_oracle() {
    let ffn = Ffn::standard(3, FfnKind::GeGlu);
    let specs = specs_of(|v| ffn.specs("f", v));
    let mut s = store(&specs, 7);
    for n in ["f.gate.bias", "f.value.bias", "f.out.bias"] {
        let shape = s.get(n).unwrap().shape().to_vec();
        s.set(n, rnd(&shape, 8)).unwrap();
    }
    let x = rnd(&[2, 3], 9);
    let y = run(&s, &x, |g, b, xv| ffn.forward(g, b, "f", xv));
    let (wg, bg) = (s.get("f.gate.weight").unwrap(), s.get("f.gate.bias").unwrap());
    let (wv, bv) = (s.get("f.value.weight").unwrap(), s.get("f.value.bias").unwrap());
    let (wo, bo) = (s.get("f.out.weight").unwrap(), s.get("f.out.bias").unwrap());
    let phi = |z: f64| 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    for r in 0..2 {
        let mut hidden = [0.0; 6];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut a = bg.data()[j];
            let mut v = bv.data()[j];
            for i in 0..3 {
                a += x.at(&[r, i]) * wg.at(&[i, j]);
                v += x.at(&[r, i]) * wv.at(&[i, j]);
            }
            *hj = a * phi(a) * v;
        }
        for o in 0..3 {
            let mut acc = bo.data()[o];
            for (j, hj) in hidden.iter().enumerate() {
                acc += hj * wo.at(&[j, o]);
            }
            assert!((y.at(&[r, o]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn geglu_zero_input_gives_zero() {
    let ffn = Ffn::standard(4, FfnKind::GeGlu);
    let s = store(&specs_of(|v| ffn.specs("f", v)), 1);
    let y = run(&s, &Tensor::zeros(vec![2, 4]), |g, b, x| ffn.forward(g, b, "f", x));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn transformer_zero_outputs_is_identity() {
    for kind in [FfnKind::GeGlu, FfnKind::Mlp] {
        let blk = TransformerBlock::new(8, 2, kind, false);
        let mut s = store(&specs_of(|v| blk.specs("t", v)), 2);
        zero_prefix(&mut s, "t.attn.o");
        let out = if kind == FfnKind::GeGlu { "t.ffn.out" } else { "t.ffn.fc2" };
        zero_prefix(&mut s, out);
        let x = rnd(&[2, 3, 8], 3);
        let y = run(&s, &x, |g, b, xv| blk.forward(g, b, "t", xv, &mut Ctx::eval(), 0.0));
        assert!(y.bitwise_eq(&x));
    }
}

#[test]
fn single_token_attention_is_value_path() {
    let attn = Attention {
        dim: 4,
        heads: 2,
        causal: false,
    };
    let s = store(&specs_of(|v| attn.specs("a", v)), 4);
    let x = rnd(&[1, 1, 4], 5);
    let y = run(&s, &x, |g, b, xv| attn.forward(g, b, "a", xv));
    let direct = run(&s, &x, |g, b, xv| {
        let v = linear(g, b, "a.v", xv, true)?;
        linear(g, b, "a.o", v, true)
    });
    assert!(y.max_abs_diff(&direct) < 1e-14);
}

#[test]
fn attention_is_permutation_equivariant() {
    let attn = Attention {
        dim: 6,
        heads: 3,
        causal: false,
    };
    let s = store(&specs_of(|v| attn.specs("a", v)), 4);
    let x = rnd(&[1, 4, 6], 5);
    let perm = [2, 0, 3, 1];
    let xp = Tensor::from_fn(vec![1, 4, 6], |i| x.at(&[0, perm[i / 6], i % 6]));
    let y = run(&s, &x, |g, b, xv| attn.forward(g, b, "a", xv));
    let yp = run(&s, &xp, |g, b, xv| attn.forward(g, b, "a", xv));
    for (t, &src) in perm.iter().enumerate() {
        for c in 0..6 {
            assert!((yp.at(&[0, t, c]) - y.at(&[0, src, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn heads_must_divide_width() {
    let attn = Attention {
        dim: 6,
        heads: 4,
        causal: false,
    };
    assert!(matches!(attn.validate(), Err(Error::Config(_))));
}

#[test]
fn geglu_block_is_smaller_than_plain() {
    let a = count_specs(&specs_of(|v| TransformerBlock::new(768, 12, FfnKind::GeGlu, false).specs("t", v)));
    let b = count_specs(&specs_of(|v| TransformerBlock::new(768, 12, FfnKind::Mlp, false).specs("t", v)));
    assert!(a < b);
    // about 5.90M at width 768
    assert!((a as f64 - 5.90e6).abs() / 5.90e6 < 0.01, "{a}");
}

#[test]
fn drop_path_is_identity_in_eval_and_scales_in_train() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(vec![64, 2]));
    assert_eq!(Ctx::eval().drop_path(&mut g, x, 0.5).unwrap(), x);
    let y = Ctx::train(1, 0.0).drop_path(&mut g, x, 0.5).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(vals.iter().any(|&v| v == 0.0) && vals.iter().any(|&v| v == 2.0));
    assert_eq!(drop_path_schedule(0.1, 3), vec![0.0, 0.05, 0.1]);
}

fn gc(specs: &[ParamSpec], x: &[usize], f: impl Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>) {
    let rep = block_grad_check(specs, x, 11, 1e-5, f).unwrap();
    assert!(rep.passed(1e-4), "{rep:?}");
}

#[test]
fn block_gradients() {
    let stem = Stem { cin: 3, cout: 4 };
    gc(&specs_of(|v| stem.specs("s", v)), &[1, 3, 4, 4], |g, b, x| stem.forward(g, b, "s", x));
    for norm in [MbConvNorm::Ln, MbConvNorm::Bn, MbConvNorm::BnSe] {
        let blk = mb(3, 4, 2, norm);
        gc(&specs_of(|v| blk.specs("m", v)), &[2, 3, 4, 4], |g, b, x| {
            blk.forward(g, b, "m", x, &mut Ctx::eval(), 0.0)
        });
    }
    let cnx = ConvNeXtBlock { channels: 4 };
    gc(&specs_of(|v| cnx.specs("c", v)), &[1, 4, 3, 3], |g, b, x| {
        cnx.forward(g, b, "c", x, &mut Ctx::eval(), 0.0)
    });
    for kind in [FfnKind::GeGlu, FfnKind::Mlp] {
        let t = TransformerBlock::new(4, 2, kind, kind == FfnKind::Mlp);
        gc(&specs_of(|v| t.specs("t", v)), &[2, 3, 4], |g, b, x| {
            t.forward(g, b, "t", x, &mut Ctx::eval(), 0.0)
        });
    }
}
