mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfadapt_core::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use selfadapt_core::gradcheck::{check_all, check_at, random_coords, uniform};
use selfadapt_core::nn::{
    mhsa_attention, Affine, BiRnn, BiRnnSpec, CellKind, Conv2d, Conv2dSpec, Linear, MhsaModule, MhsaSpec,
};
use selfadapt_core::Result;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weigh(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = t.constant(Tensor::new(&shape, (0..n).map(|i| ((i as f64 + 1.0) * 0.377).cos()).collect())?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Gradient check over every parameter and the input of a layer built inside
/// `store`, evaluated through `forward`.
fn check_layer<F>(name: &str, store: &ParamStore, input: Tensor, probes: Option<usize>, forward: F)
where
    F: Fn(&mut Tape, &[Var], Var) -> Result<Var>,
{
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.push(input);
    let f = |t: &mut Tape, v: &[Var]| {
        let (params, x) = v.split_at(v.len() - 1);
        let y = forward(t, params, x[0])?;
        weigh(t, y)
    };
    let report = match probes {
        None => check_all(f, &inputs, 1e-5),
        Some(n) => {
            let coords = random_coords(&inputs, n, &mut rng(99));
            check_at(f, &inputs, &coords, 1e-5)
        }
    }
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{name}: {:?}", report.worst());
}

fn bound(vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(vars.to_vec())
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut r = rng(1);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 3, 4, true, &mut r).unwrap();
    common::randomize(&mut s, 1.0, &mut r);
    check_layer("linear", &s, uniform(&[3, 5], -2.0, 2.0, &mut r), None, |t, p, x| {
        lin.forward(t, &bound(p), x)
    });

    let mut s = ParamStore::new();
    let conv = Conv2d::new(&mut s, "conv", Conv2dSpec::same_5x5(2, 3), &mut r).unwrap();
    common::randomize(&mut s, 0.5, &mut r);
    check_layer("conv", &s, uniform(&[2, 4, 3], -2.0, 2.0, &mut r), None, |t, p, x| {
        conv.forward(t, &bound(p), x)
    });

    let mut s = ParamStore::new();
    let inorm = Affine::new(&mut s, "in", 2).unwrap();
    common::randomize(&mut s, 1.5, &mut r);
    check_layer("instance-norm", &s, uniform(&[2, 3, 4], -2.0, 2.0, &mut r), None, |t, p, x| {
        inorm.instance_norm(t, &bound(p), x)
    });
    check_layer("layer-norm", &s, uniform(&[2, 5], -2.0, 2.0, &mut r), None, |t, p, x| {
        inorm.layer_norm(t, &bound(p), x)
    });

    for cell in [CellKind::Gru, CellKind::Lstm] {
        let mut s = ParamStore::new();
        let spec = BiRnnSpec { cell, input_dim: 3, hidden_dim: 2, layers: 2 };
        let rnn = BiRnn::new(&mut s, "rnn", spec, &mut r).unwrap();
        common::randomize(&mut s, 0.8, &mut r);
        check_layer(&format!("{cell:?}"), &s, uniform(&[3, 4], -2.0, 2.0, &mut r), None, |t, p, x| {
            rnn.forward(t, &bound(p), x)
        });
    }

    let mut s = ParamStore::new();
    let mhsa = MhsaModule::new(&mut s, "mhsa", MhsaSpec { model_dim: 4, heads: 2 }, &mut r).unwrap();
    common::randomize(&mut s, 0.8, &mut r);
    check_layer("mhsa", &s, uniform(&[4, 3], -2.0, 2.0, &mut r), Some(120), |t, p, x| {
        Ok(mhsa.forward(t, &bound(p), x)?.output)
    });
}

fn run_rnn(store: &ParamStore, rnn: &BiRnn, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = rnn.forward(&mut t, &p, xv).unwrap();
    t.value(y).clone()
}

fn reverse_columns(x: &Tensor) -> Tensor {
    let m = common::to_mat(x);
    common::from_mat(&m.iter().map(|r| r.iter().rev().cloned().collect()).collect())
}

#[test]
fn birnn_output_dim_and_single_frame() {
    let mut r = rng(2);
    for cell in [CellKind::Gru, CellKind::Lstm] {
        let mut s = ParamStore::new();
        let spec = BiRnnSpec { cell, input_dim: 5, hidden_dim: 3, layers: 1 };
        let rnn = BiRnn::new(&mut s, "rnn", spec, &mut r).unwrap();
        let y = run_rnn(&s, &rnn, &uniform(&[5, 1], -1.0, 1.0, &mut r));
        assert_eq!(y.shape(), &[spec.output_dim(), 1]);
        assert!(y.all_finite());
        let y = run_rnn(&s, &rnn, &uniform(&[5, 9], -1.0, 1.0, &mut r));
        assert_eq!(y.shape(), &[6, 9]);
    }
}

#[test]
fn birnn_time_reversal_symmetry_with_tied_directions() {
    let mut r = rng(3);
    for cell in [CellKind::Gru, CellKind::Lstm] {
        let mut s = ParamStore::new();
        let spec = BiRnnSpec { cell, input_dim: 4, hidden_dim: 3, layers: 1 };
        let rnn = BiRnn::new(&mut s, "rnn", spec, &mut r).unwrap();
        common::randomize(&mut s, 0.7, &mut r);
        for role in ["w_ih", "w_hh", "b_ih", "b_hh"] {
            let fwd = s.by_name(&format!("rnn.l0.fwd.{role}")).unwrap().clone();
            let id = s.id(&format!("rnn.l0.bwd.{role}")).unwrap();
            *s.get_mut(id) = fwd;
        }
        let x = uniform(&[4, 6], -1.0, 1.0, &mut r);
        let y = common::to_mat(&run_rnn(&s, &rnn, &x));
        let y_rev = common::to_mat(&run_rnn(&s, &rnn, &reverse_columns(&x)));
        // swap halves, then reverse time
        let swapped: common::Mat = y[3..].iter().chain(&y[..3]).cloned().collect();
        let expected: common::Mat = swapped.iter().map(|r| r.iter().rev().cloned().collect()).collect();
        assert!(common::max_abs_diff(&y_rev, &expected) < 1e-14, "{cell:?}");
    }
}

#[test]
fn two_frame_gru_matches_hand_recurrence() {
    let mut s = ParamStore::new();
    let spec = BiRnnSpec { cell: CellKind::Gru, input_dim: 1, hidden_dim: 1, layers: 1 };
    let rnn = BiRnn::new(&mut s, "g", spec, &mut rng(0)).unwrap();
    // gate rows: [r, z, n]
    let set = |s: &mut ParamStore, name: &str, v: &[f64]| {
        let id = s.id(name).unwrap();
        *s.get_mut(id) = Tensor::new(&[v.len(), 1], v.to_vec()).unwrap().reshape(s.get(id).shape()).unwrap();
    };
    let (wi, wh, bi, bh) = ([0.5, -0.3, 0.8], [0.2, 0.4, -0.6], [0.1, 0.0, -0.2], [0.0, 0.3, 0.05]);
    for dir in ["fwd", "bwd"] {
        set(&mut s, &format!("g.l0.{dir}.w_ih"), &wi);
        set(&mut s, &format!("g.l0.{dir}.w_hh"), &wh);
        set(&mut s, &format!("g.l0.{dir}.b_ih"), &bi);
        set(&mut s, &format!("g.l0.{dir}.b_hh"), &bh);
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let step = |x: f64, h: f64| {
        let r = sig(wi[0] * x + bi[0] + wh[0] * h + bh[0]);
        let z = sig(wi[1] * x + bi[1] + wh[1] * h + bh[1]);
        let n = (wi[2] * x + bi[2] + r * (wh[2] * h + bh[2])).tanh();
        (1.0 - z) * n + z * h
    };
    let (x0, x1) = (0.9, -0.4);
    let f0 = step(x0, 0.0);
    let f1 = step(x1, f0);
    let b1 = step(x1, 0.0);
    let b0 = step(x0, b1);
    let y = run_rnn(&s, &rnn, &Tensor::matrix(&[&[x0, x1]]));
    let expected = [f0, f1, b0, b1];
    for (got, want) in y.data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

fn attention_of(normed: Tensor, wq: Tensor, wk: Tensor) -> Tensor {
    let mut t = Tape::new();
    let (n, q, k) = (t.constant(normed), t.constant(wq), t.constant(wk));
    let a = mhsa_attention(&mut t, n, q, k).unwrap();
    t.value(a).clone()
}

#[test]
fn attention_closed_forms() {
    let mut r = rng(4);
    let one = attention_of(uniform(&[4, 1], -1.0, 1.0, &mut r), uniform(&[2, 4], -1.0, 1.0, &mut r), uniform(&[2, 4], -1.0, 1.0, &mut r));
    assert_eq!(one.data(), &[1.0]);

    let uniform_att = attention_of(uniform(&[4, 5], -1.0, 1.0, &mut r), Tensor::zeros(&[2, 4]), uniform(&[2, 4], -1.0, 1.0, &mut r));
    assert!(uniform_att.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    // d = 1: scores s_ij = (a·g_i)(b·g_j)
    let (a, b, g) = (0.7, -1.2, [0.5, 1.5]);
    let att = attention_of(Tensor::matrix(&[&g]), Tensor::matrix(&[&[a]]), Tensor::matrix(&[&[b]]));
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| a * g[i] * b * g[j]).collect();
        let z = s[0].exp() + s[1].exp();
        for j in 0..2 {
            assert!((att.at(&[i, j]) - s[j].exp() / z).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut r = rng(5);
    for k in [1, 2, 7, 30] {
        let att = attention_of(uniform(&[6, k], -2.0, 2.0, &mut r), uniform(&[3, 6], -2.0, 2.0, &mut r), uniform(&[3, 6], -2.0, 2.0, &mut r));
        for row in att.data().chunks(k) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}

fn module_output(store: &ParamStore, module: &MhsaModule, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = module.forward(&mut t, &p, xv).unwrap();
    t.value(y.output).clone()
}

#[test]
fn zero_value_projection_and_ffn_gives_zero_output() {
    let mut r = rng(6);
    let mut s = ParamStore::new();
    let m = MhsaModule::new(&mut s, "m", MhsaSpec { model_dim: 8, heads: 2 }, &mut r).unwrap();
    for name in ["w_v", "w_p", "lin1", "lin2"] {
        let ids: Vec<_> = s.iter().filter(|(_, n, _)| n.contains(name)).map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = s.get(id).shape().to_vec();
            *s.get_mut(id) = Tensor::zeros(&shape);
        }
    }
    let y = module_output(&s, &m, &uniform(&[8, 5], -1.0, 1.0, &mut r));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_scale_dimensions_give_expected_shape() {
    let mut r = rng(7);
    let mut s = ParamStore::new();
    let spec = MhsaSpec { model_dim: 300, heads: 4 };
    let m = MhsaModule::new(&mut s, "m", spec, &mut r).unwrap();
    assert_eq!(spec.head_dim(), 75);
    assert_eq!(s.by_name("m.head0.w_q").unwrap().shape(), &[75, 300]);
    assert_eq!(s.by_name("m.w_p").unwrap().shape(), &[300, 300]);
    assert_eq!(s.by_name("m.lin2.weight").unwrap().shape(), &[900, 300]);
    assert_eq!(s.by_name("m.lin1.weight").unwrap().shape(), &[300, 900]);
    for k in [1, 4] {
        let y = module_output(&s, &m, &uniform(&[300, k], -1.0, 1.0, &mut r));
        assert_eq!(y.shape(), &[300, k]);
    }
    assert!(MhsaSpec { model_dim: 300, heads: 7 }.validate().is_err());
}

#[test]
fn module_matches_straight_line_reference() {
    let mut r = rng(8);
    let mut s = ParamStore::new();
    let m = MhsaModule::new(&mut s, "m", MhsaSpec { model_dim: 8, heads: 2 }, &mut r).unwrap();
    common::randomize(&mut s, 0.6, &mut r);
    let x = uniform(&[8, 5], -2.0, 2.0, &mut r);
    let got = common::to_mat(&module_output(&s, &m, &x));
    let want = common::mhsa_reference(&s, "m", 2, &common::to_mat(&x));
    assert!(common::max_abs_diff(&got, &want) < 1e-10);
}

#[test]
fn module_is_permutation_equivariant_over_frames() {
    let mut r = rng(9);
    let mut s = ParamStore::new();
    let m = MhsaModule::new(&mut s, "m", MhsaSpec { model_dim: 6, heads: 3 }, &mut r).unwrap();
    common::randomize(&mut s, 0.6, &mut r);
    let x = uniform(&[6, 7], -2.0, 2.0, &mut r);
    let mut perm: Vec<usize> = (0..7).collect();
    for i in (1..7).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let permute = |t: &Tensor| {
        let mat = common::to_mat(t);
        common::from_mat(&mat.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect())
    };
    let y = module_output(&s, &m, &x);
    let y_perm = module_output(&s, &m, &permute(&x));
    assert!(y_perm.max_abs_diff(&permute(&y)) < 1e-12);
}
