//! Parameterized layers: each owns the ids of its weights in a
//! [`ParamStore`] and applies the matching function from `functional`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::functional;
use super::init::kaiming_uniform;
use crate::autodiff::{BoundParams, ConvGeometry, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), kaiming_uniform(&[out_dim, in_dim], in_dim, rng))?;
        let bias = if with_bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        functional::linear(tape, x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub stride: (usize, usize),
}

impl Conv2dSpec {
    /// 5×5 kernel, (2,2) padding, (1,1) stride: spatial size is preserved.
    pub fn same_5x5(in_channels: usize, out_channels: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (5, 5),
            padding: (2, 2),
            stride: (1, 1),
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            padding: (0, 0),
            stride: (1, 1),
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            padding: self.padding,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: Conv2dSpec, rng: &mut impl Rng) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        let weight = store.insert(
            format!("{name}.weight"),
            kaiming_uniform(&[spec.out_channels, spec.in_channels, kh, kw], fan_in, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))?;
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        if tape.shape(x).first() != Some(&self.spec.in_channels) {
            return Err(Error::shape("conv2d", &[tape.shape(x), &[self.spec.in_channels]]));
        }
        functional::conv2d(tape, x, p.var(self.weight), p.var(self.bias), self.spec.geometry())
    }
}

/// Learned per-channel (or per-feature) scale and shift around a
/// normalization.
#[derive(Clone, Debug)]
pub struct Affine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Affine {
            scale: store.insert(format!("{name}.scale"), Tensor::full(&[width], 1.0))?,
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn instance_norm(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        functional::instance_norm(tape, x, p.var(self.scale), p.var(self.shift))
    }

    pub fn layer_norm(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        functional::layer_norm(tape, x, p.var(self.scale), p.var(self.shift))
    }
}
