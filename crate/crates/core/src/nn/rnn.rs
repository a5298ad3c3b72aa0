//! Bidirectional GRU and LSTM layers.
//!
//! Gate blocks are stacked row-wise in the weight matrices: `[i; f; g; o]`
//! for LSTM and `[r; z; n]` for GRU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{orthogonal, uniform};
use crate::autodiff::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiRnnSpec {
    pub cell: CellKind,
    pub input_dim: usize,
    /// Hidden units per direction.
    pub hidden_dim: usize,
    pub layers: usize,
}

impl BiRnnSpec {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Clone, Debug)]
pub struct BiRnn {
    pub spec: BiRnnSpec,
    /// `[forward, backward]` per layer.
    pub layers: Vec<[DirectionParams; 2]>,
}

impl BiRnn {
    pub fn new(store: &mut ParamStore, name: &str, spec: BiRnnSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.layers == 0 || spec.hidden_dim == 0 || spec.input_dim == 0 {
            return Err(Error::Config(format!("degenerate recurrent layer {spec:?}")));
        }
        let h = spec.hidden_dim;
        let g = spec.cell.gates();
        let bound = 1.0 / (h as f64).sqrt();
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let in_dim = if l == 0 { spec.input_dim } else { 2 * h };
            let fwd = direction_params(store, &format!("{name}.l{l}.fwd"), in_dim, g, h, bound, rng)?;
            let bwd = direction_params(store, &format!("{name}.l{l}.bwd"), in_dim, g, h, bound, rng)?;
            layers.push([fwd, bwd]);
        }
        Ok(BiRnn { spec, layers })
    }

    /// N×K input to 2h×K output: forward states on top, backward below.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, [fwd, bwd]) in self.layers.iter().enumerate() {
            let expected = if l == 0 { self.spec.input_dim } else { 2 * self.spec.hidden_dim };
            if tape.shape(h).len() != 2 || tape.shape(h)[0] != expected {
                return Err(Error::shape("birnn", &[tape.shape(h), &[expected]]));
            }
            let f = run_direction(tape, p, fwd, self.spec, h, false)?;
            let b = run_direction(tape, p, bwd, self.spec, h, true)?;
            h = tape.concat(&[f, b], 0)?;
        }
        Ok(h)
    }
}

fn direction_params(
    store: &mut ParamStore,
    base: &str,
    in_dim: usize,
    gates: usize,
    h: usize,
    bound: f64,
    rng: &mut impl Rng,
) -> Result<DirectionParams> {
    let w_ih = store.insert(format!("{base}.w_ih"), uniform(&[gates * h, in_dim], bound, rng))?;
    let blocks: Vec<f64> = (0..gates).flat_map(|_| orthogonal(h, rng).into_vec()).collect();
    let w_hh = store.insert(format!("{base}.w_hh"), Tensor::new(&[gates * h, h], blocks)?)?;
    let b_ih = store.insert(format!("{base}.b_ih"), Tensor::zeros(&[gates * h]))?;
    let b_hh = store.insert(format!("{base}.b_hh"), Tensor::zeros(&[gates * h]))?;
    Ok(DirectionParams { w_ih, w_hh, b_ih, b_hh })
}

// One recurrent pass over the K columns of `x`, in reverse when `reverse`.
// The result is h×K with column k holding the state after consuming frame k.
fn run_direction(
    tape: &mut Tape,
    p: &BoundParams,
    dp: &DirectionParams,
    spec: BiRnnSpec,
    x: Var,
    reverse: bool,
) -> Result<Var> {
    let h = spec.hidden_dim;
    let g = spec.cell.gates();
    let frames = tape.shape(x)[1];

    // Input projections for all frames at once, time-major for row slicing.
    let proj = super::functional::linear(tape, x, p.var(dp.w_ih), Some(p.var(dp.b_ih)))?;
    let proj = tape.transpose(proj)?;
    let b_hh = tape.reshape(p.var(dp.b_hh), &[g * h, 1])?;
    let w_hh = p.var(dp.w_hh);

    let mut state = tape.constant(Tensor::zeros(&[h, 1]));
    let mut cell = tape.constant(Tensor::zeros(&[h, 1]));
    let mut outputs = vec![state; frames];
    let order: Vec<usize> = if reverse { (0..frames).rev().collect() } else { (0..frames).collect() };
    for k in order {
        let xk = tape.slice(proj, 0, k, 1)?;
        let xk = tape.reshape(xk, &[g * h, 1])?;
        let hk = tape.matmul(w_hh, state)?;
        let hk = tape.add(hk, b_hh)?;
        match spec.cell {
            CellKind::Lstm => {
                let gates = tape.add(xk, hk)?;
                let i = tape.slice(gates, 0, 0, h)?;
                let f = tape.slice(gates, 0, h, h)?;
                let c_in = tape.slice(gates, 0, 2 * h, h)?;
                let o = tape.slice(gates, 0, 3 * h, h)?;
                let i = tape.sigmoid(i);
                let f = tape.sigmoid(f);
                let c_in = tape.tanh(c_in);
                let o = tape.sigmoid(o);
                let kept = tape.mul(f, cell)?;
                let written = tape.mul(i, c_in)?;
                cell = tape.add(kept, written)?;
                let squashed = tape.tanh(cell);
                state = tape.mul(o, squashed)?;
            }
            CellKind::Gru => {
                let xr = tape.slice(xk, 0, 0, h)?;
                let xz = tape.slice(xk, 0, h, h)?;
                let xn = tape.slice(xk, 0, 2 * h, h)?;
                let hr = tape.slice(hk, 0, 0, h)?;
                let hz = tape.slice(hk, 0, h, h)?;
                let hn = tape.slice(hk, 0, 2 * h, h)?;
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r);
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z);
                let gated = tape.mul(r, hn)?;
                let n = tape.add(xn, gated)?;
                let n = tape.tanh(n);
                // h' = (1 − z)·n + z·h = n + z·(h − n)
                let delta = tape.sub(state, n)?;
                let delta = tape.mul(z, delta)?;
                state = tape.add(n, delta)?;
            }
        }
        outputs[k] = state;
    }
    tape.concat(&outputs, 1)
}
