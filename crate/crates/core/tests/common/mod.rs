//! Straight-line reference computations shared by the integration tests.
//! Nothing here touches the tape; everything works on plain nested vectors.
#![allow(dead_code)]

use selfadapt_core::autodiff::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let rows: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    Tensor::matrix(&rows)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            c[i][j] = acc;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .clone()
}

fn vec_of(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).data().to_vec()
}

/// Column-wise layer norm with ε = 1e-5 and population variance.
pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let (n, k) = (x.len(), x[0].len());
    let mut out = vec![vec![0.0; k]; n];
    for j in 0..k {
        let mean = (0..n).map(|i| x[i][j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i][j] - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i][j] = (x[i][j] - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i];
        }
    }
    out
}

pub fn softmax_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn affine(w: &Mat, b: &[f64], x: &Mat) -> Mat {
    let mut y = matmul(w, x);
    for (row, bi) in y.iter_mut().zip(b) {
        row.iter_mut().for_each(|v| *v += bi);
    }
    y
}

pub fn lrelu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|&v| if v >= 0.0 { v } else { 0.01 * v }).collect())
        .collect()
}

/// One attention module written out longhand.
pub fn mhsa_reference(store: &ParamStore, prefix: &str, heads: usize, gamma: &Mat) -> Mat {
    let normed = layer_norm(gamma, &vec_of(store, &format!("{prefix}.ln1.scale")), &vec_of(store, &format!("{prefix}.ln1.shift")));
    let mut concat: Mat = vec![Vec::new(); gamma[0].len()];
    for h in 0..heads {
        let wq = to_mat(&param(store, &format!("{prefix}.head{h}.w_q")));
        let wk = to_mat(&param(store, &format!("{prefix}.head{h}.w_k")));
        let wv = to_mat(&param(store, &format!("{prefix}.head{h}.w_v")));
        let d = wq.len() as f64;
        let scores = matmul(&transpose(&matmul(&wq, &normed)), &matmul(&wk, &normed));
        let scaled: Mat = scores.iter().map(|r| r.iter().map(|v| v / d.sqrt()).collect()).collect();
        let a = softmax_rows(&scaled);
        let e_h = matmul(&a, &transpose(&matmul(&wv, &normed)));
        for (row, part) in concat.iter_mut().zip(e_h) {
            row.extend(part);
        }
    }
    let wp = to_mat(&param(store, &format!("{prefix}.w_p")));
    let projected = transpose(&matmul(&concat, &wp));
    let e: Mat = projected
        .iter()
        .zip(gamma)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let e = layer_norm(&e, &vec_of(store, &format!("{prefix}.ln2.scale")), &vec_of(store, &format!("{prefix}.ln2.shift")));
    let hidden = lrelu(&affine(
        &to_mat(&param(store, &format!("{prefix}.lin2.weight"))),
        &vec_of(store, &format!("{prefix}.lin2.bias")),
        &e,
    ));
    affine(
        &to_mat(&param(store, &format!("{prefix}.lin1.weight"))),
        &vec_of(store, &format!("{prefix}.lin1.bias")),
        &hidden,
    )
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Randomizes every parameter uniformly in [-scale, scale] so that zero
/// initializations (biases, affine shifts) are exercised too.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut impl rand::Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}
