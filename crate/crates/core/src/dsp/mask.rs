use super::stft::Spectrogram;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Complex gain per time-frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMask {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexMask {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() || re.rank() != 2 {
            return Err(Error::shape("complex-mask", &[re.shape(), im.shape()]));
        }
        Ok(ComplexMask { re, im })
    }

    /// `value` at every bin of an F×K grid.
    pub fn constant(bins: usize, frames: usize, re: f64, im: f64) -> Self {
        ComplexMask {
            re: Tensor::full(&[bins, frames], re),
            im: Tensor::full(&[bins, frames], im),
        }
    }

    pub fn conj(&self) -> Self {
        ComplexMask {
            re: self.re.clone(),
            im: self.im.map(|v| -v),
        }
    }
}

/// Element-wise complex product `(a + bi)(c + di)`.
pub fn apply_mask(spec: &Spectrogram, mask: &ComplexMask) -> Result<Spectrogram> {
    if spec.re.shape() != mask.re.shape() || mask.re.shape() != mask.im.shape() {
        return Err(Error::shape("apply-mask", &[spec.re.shape(), mask.re.shape()]));
    }
    let n = spec.re.len();
    let (a, b) = (spec.re.data(), spec.im.data());
    let (c, d) = (mask.re.data(), mask.im.data());
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for i in 0..n {
        re.push(a[i] * c[i] - b[i] * d[i]);
        im.push(a[i] * d[i] + b[i] * c[i]);
    }
    Spectrogram::new(Tensor::new(spec.re.shape(), re)?, Tensor::new(spec.re.shape(), im)?, spec.config)
}
