//! Stateless differentiable layer functions over tape variables.
//!
//! Feature maps are laid out feature-major: a sequence of `K` frames with `N`
//! features is an N×K matrix, and a multi-channel image is C×F×K.

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};

pub use super::init::LEAKY_SLOPE;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

// [n] → n×cols by way of n×1.
fn column_broadcast(tape: &mut Tape, v: Var, cols: usize) -> Result<Var> {
    let n = tape.value(v).len();
    let col = tape.reshape(v, &[n, 1])?;
    tape.broadcast(col, &[n, cols])
}

/// `W·x + b` applied to every column of an N×K input; `weight` is M×N and
/// `bias` has M entries.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(weight, x)?;
    match bias {
        None => Ok(y),
        Some(b) => {
            let (m, k) = tape.value(y).dims2();
            if tape.value(b).len() != m {
                return Err(Error::shape("linear", &[tape.shape(weight), tape.shape(b)]));
            }
            let wide = column_broadcast(tape, b, k)?;
            tape.add(y, wide)
        }
    }
}

pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
    tape.conv2d(x, weight, bias, geometry)
}

pub fn leaky_relu(tape: &mut Tape, x: Var) -> Var {
    tape.leaky_relu(x, LEAKY_SLOPE)
}

/// Max-shifted softmax along the last axis.
pub fn softmax(tape: &mut Tape, x: Var) -> Var {
    tape.softmax(x)
}

// Zero-mean, unit-variance rows of a matrix.
fn standardize_rows(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let (r, c) = tape.value(x).dims2();
    let mean = tape.mean_axis(x, 1)?;
    let mean = tape.broadcast(mean, &[r, c])?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, 1)?;
    let var = tape.add_scalar(var, eps);
    let inv = tape.powf(var, -0.5);
    let inv = tape.broadcast(inv, &[r, c])?;
    tape.mul(centered, inv)
}

fn affine_rows(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let (r, c) = tape.value(x).dims2();
    if tape.value(scale).len() != r || tape.value(shift).len() != r {
        return Err(Error::shape("affine", &[&[r, c], tape.shape(scale), tape.shape(shift)]));
    }
    let s = column_broadcast(tape, scale, c)?;
    let b = column_broadcast(tape, shift, c)?;
    let y = tape.mul(x, s)?;
    tape.add(y, b)
}

/// Normalizes each channel of a C×F×K map over its F×K plane, then applies a
/// per-channel scale and shift.
pub fn instance_norm(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("instance-norm", &[&shape]));
    }
    let flat = tape.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    let normed = standardize_rows(tape, flat, INSTANCE_NORM_EPS)?;
    let y = affine_rows(tape, normed, scale, shift)?;
    tape.reshape(y, &shape)
}

/// Normalizes every column (frame) of an N×K matrix over its N features,
/// then applies a per-feature gain and bias.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let normed = standardize_rows(tape, xt, LAYER_NORM_EPS)?;
    let normed = tape.transpose(normed)?;
    affine_rows(tape, normed, gain, bias)
}
