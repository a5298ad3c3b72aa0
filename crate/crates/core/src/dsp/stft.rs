use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Blackman,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub dft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub window_length: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            dft_size: 512,
            hop: 128,
            window: WindowKind::Blackman,
            window_length: 512,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_length == 0 || self.dft_size < 2 || self.dft_size % 2 != 0 {
            return Err(Error::Config(format!("degenerate STFT configuration {self:?}")));
        }
        if self.window_length % self.hop != 0 || self.window_length / self.hop < 2 {
            return Err(Error::Config(format!(
                "window length {} must be a multiple of hop {} with at least 2x overlap",
                self.window_length, self.hop
            )));
        }
        if self.dft_size < self.window_length {
            return Err(Error::Config(format!(
                "DFT size {} is shorter than the window ({})",
                self.dft_size, self.window_length
            )));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins.
    pub fn bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Reflect padding applied at each end of the signal.
    pub fn pad(&self) -> usize {
        self.window_length / 2
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + (len + 2 * self.pad() - self.window_length) / self.hop
    }

    /// Periodic analysis window of `window_length` samples.
    pub fn analysis_window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n;
                match self.window {
                    WindowKind::Blackman => 0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos(),
                    WindowKind::Hann => 0.5 - 0.5 * x.cos(),
                }
            })
            .collect()
    }
}

/// One-sided complex spectrogram; rows are frequencies, columns are frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub re: Tensor,
    pub im: Tensor,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn new(re: Tensor, im: Tensor, config: StftConfig) -> Result<Self> {
        if re.shape() != im.shape() || re.rank() != 2 || re.shape()[0] != config.bins() {
            return Err(Error::shape("spectrogram", &[re.shape(), im.shape()]));
        }
        Ok(Spectrogram { re, im, config })
    }

    pub fn zeros(config: StftConfig, frames: usize) -> Self {
        let shape = [config.bins(), frames];
        Spectrogram {
            re: Tensor::zeros(&shape),
            im: Tensor::zeros(&shape),
            config,
        }
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r.hypot(*i))
            .collect();
        Tensor::new(self.re.shape(), data).expect("same shape")
    }

    /// `a·self + b·other`, used for linearity checks and mixing.
    pub fn axpby(&self, a: f64, other: &Spectrogram, b: f64) -> Result<Spectrogram> {
        if self.re.shape() != other.re.shape() {
            return Err(Error::shape("spectrogram-axpby", &[self.re.shape(), other.re.shape()]));
        }
        let lin = |x: &Tensor, y: &Tensor| {
            let d = x.data().iter().zip(y.data()).map(|(x, y)| a * x + b * y).collect();
            Tensor::new(x.shape(), d).expect("same shape")
        };
        Ok(Spectrogram {
            re: lin(&self.re, &other.re),
            im: lin(&self.im, &other.im),
            config: self.config,
        })
    }
}

/// Planned forward/inverse transforms plus the analysis and least-squares
/// synthesis windows for one configuration.
pub struct StftEngine {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("config", &self.config).finish()
    }
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(StftEngine {
            config,
            window: config.analysis_window(),
            forward: planner.plan_fft_forward(config.dft_size),
            inverse: planner.plan_fft_inverse(config.dft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn analyze(&self, signal: &[f64]) -> Result<Spectrogram> {
        let cfg = &self.config;
        if signal.len() < cfg.window_length {
            return Err(Error::InvalidInput(format!(
                "signal of {} samples is shorter than the required minimum of {} (one window)",
                signal.len(),
                cfg.window_length
            )));
        }
        let pad = cfg.pad();
        let n = signal.len();
        let padded: Vec<f64> = (0..n + 2 * pad)
            .map(|i| {
                let j = i as isize - pad as isize;
                let j = if j < 0 {
                    -j
                } else if j >= n as isize {
                    2 * (n as isize - 1) - j
                } else {
                    j
                };
                signal[j as usize]
            })
            .collect();

        let frames = cfg.frames(n);
        let bins = cfg.bins();
        let mut re = vec![0.0; bins * frames];
        let mut im = vec![0.0; bins * frames];
        let mut buf = vec![0.0; cfg.dft_size];
        let mut spectrum = self.forward.make_output_vec();
        for k in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let start = k * cfg.hop;
            for (i, w) in self.window.iter().enumerate() {
                buf[i] = padded[start + i] * w;
            }
            self.forward
                .process(&mut buf, &mut spectrum)
                .expect("buffer sizes fixed by the plan");
            for (f, c) in spectrum.iter().enumerate() {
                re[f * frames + k] = c.re;
                im[f * frames + k] = c.im;
            }
        }
        Ok(Spectrogram {
            re: Tensor::new(&[bins, frames], re)?,
            im: Tensor::new(&[bins, frames], im)?,
            config: *cfg,
        })
    }

    // Σ_k w²(n − k·hop) over the padded output axis.
    fn window_power(&self, frames: usize) -> Vec<f64> {
        let cfg = &self.config;
        let mut den = vec![0.0; (frames - 1) * cfg.hop + cfg.window_length];
        for k in 0..frames {
            for (i, w) in self.window.iter().enumerate() {
                den[k * cfg.hop + i] += w * w;
            }
        }
        den
    }

    fn check_grid(&self, re: &Tensor, im: &Tensor) -> Result<usize> {
        if re.shape() != im.shape() || re.rank() != 2 || re.shape()[0] != self.config.bins() {
            return Err(Error::shape("istft", &[re.shape(), im.shape()]));
        }
        Ok(re.shape()[1])
    }

    /// Least-squares inverse: each frame is re-windowed by the analysis window
    /// and the overlap-added sum is divided by Σ w².
    pub fn synthesize_parts(&self, re: &Tensor, im: &Tensor, target_len: usize) -> Result<Vec<f64>> {
        let frames = self.check_grid(re, im)?;
        let cfg = &self.config;
        let bins = cfg.bins();
        let den = self.window_power(frames);
        let mut acc = vec![0.0; den.len()];
        let mut spectrum = self.inverse.make_input_vec();
        let mut buf = vec![0.0; cfg.dft_size];
        let norm = 1.0 / cfg.dft_size as f64;
        for k in 0..frames {
            for (f, c) in spectrum.iter_mut().enumerate() {
                *c = Complex::new(re.data()[f * frames + k], im.data()[f * frames + k]);
            }
            // Imaginary parts at DC and Nyquist do not survive a real inverse.
            spectrum[0].im = 0.0;
            spectrum[bins - 1].im = 0.0;
            self.inverse
                .process(&mut spectrum, &mut buf)
                .expect("buffer sizes fixed by the plan");
            for (i, w) in self.window.iter().enumerate() {
                acc[k * cfg.hop + i] += buf[i] * norm * w;
            }
        }
        let pad = cfg.pad();
        Ok((0..target_len)
            .map(|t| {
                let i = t + pad;
                if i < acc.len() && den[i] > f64::EPSILON {
                    acc[i] / den[i]
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn synthesize(&self, spec: &Spectrogram, target_len: usize) -> Result<Vec<f64>> {
        if spec.config != self.config {
            return Err(Error::Config(format!(
                "spectrogram was computed with {:?}, synthesis requested with {:?}",
                spec.config, self.config
            )));
        }
        self.synthesize_parts(&spec.re, &spec.im, target_len)
    }

    /// Adjoint of [`synthesize_parts`] with respect to the real and imaginary
    /// grids, given the gradient on the output samples.
    fn synthesis_adjoint(&self, frames: usize, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.config;
        let bins = cfg.bins();
        let den = self.window_power(frames);
        let pad = cfg.pad();
        let mut padded_grad = vec![0.0; den.len()];
        for (t, g) in grad.iter().enumerate() {
            let i = t + pad;
            if i < den.len() && den[i] > f64::EPSILON {
                padded_grad[i] = g / den[i];
            }
        }
        let mut gre = vec![0.0; bins * frames];
        let mut gim = vec![0.0; bins * frames];
        let mut buf = vec![0.0; cfg.dft_size];
        let mut spectrum = self.forward.make_output_vec();
        let norm = 1.0 / cfg.dft_size as f64;
        for k in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (i, w) in self.window.iter().enumerate() {
                buf[i] = padded_grad[k * cfg.hop + i] * w;
            }
            self.forward
                .process(&mut buf, &mut spectrum)
                .expect("buffer sizes fixed by the plan");
            for (f, c) in spectrum.iter().enumerate() {
                let weight = if f == 0 || f == bins - 1 { norm } else { 2.0 * norm };
                gre[f * frames + k] = weight * c.re;
                gim[f * frames + k] = if f == 0 || f == bins - 1 { 0.0 } else { weight * c.im };
            }
        }
        (gre, gim)
    }
}

pub fn stft(signal: &[f64], config: &StftConfig) -> Result<Spectrogram> {
    StftEngine::new(*config)?.analyze(signal)
}

pub fn istft(spec: &Spectrogram, config: &StftConfig, target_len: usize) -> Result<Vec<f64>> {
    StftEngine::new(*config)?.synthesize(spec, target_len)
}

struct IstftOp {
    engine: Arc<StftEngine>,
    frames: usize,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (gre, gim) = self.engine.synthesis_adjoint(self.frames, grad);
        vec![Some(gre), Some(gim)]
    }
}

/// Differentiable inverse STFT of the grids held by `re` and `im`.
pub fn istft_on_tape(tape: &mut Tape, engine: &Arc<StftEngine>, re: Var, im: Var, target_len: usize) -> Result<Var> {
    let frames = engine.check_grid(tape.value(re), tape.value(im))?;
    if target_len == 0 {
        return Err(Error::InvalidInput("istft target length must be positive".into()));
    }
    let samples = engine.synthesize_parts(tape.value(re), tape.value(im), target_len)?;
    let value = Tensor::new(&[target_len], samples)?;
    let op = Arc::new(IstftOp {
        engine: Arc::clone(engine),
        frames,
    });
    Ok(tape.custom(&[re, im], value, op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Direct O(N²) DFT of one windowed frame, independent of the FFT path.
    fn direct_dft(frame: &[f64]) -> Vec<(f64, f64)> {
        let n = frame.len();
        (0..=n / 2)
            .map(|f| {
                frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &x)| {
                    let th = 2.0 * PI * (f * t) as f64 / n as f64;
                    (re + x * th.cos(), im - x * th.sin())
                })
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad_overlap = StftConfig { hop: 512, ..StftConfig::default() };
        assert!(bad_overlap.validate().is_err());
        let short_dft = StftConfig { dft_size: 256, ..StftConfig::default() };
        assert!(short_dft.validate().is_err());
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        let s = stft(&random_signal(1000, 1), &cfg).unwrap();
        assert_eq!(s.bins(), 257);
        assert_eq!(s.frames(), 1 + (1000 + 512 - 512) / 128);
    }

    #[test]
    fn too_short_signal_reports_minimum() {
        let err = stft(&[0.0; 100], &StftConfig::default()).unwrap_err();
        assert!(err.to_string().contains("512"), "{err}");
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = stft(&[0.0; 2048], &StftConfig::default()).unwrap();
        assert!(s.re.data().iter().chain(s.im.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_dft_on_random_frames() {
        let cfg = StftConfig::default();
        let x = random_signal(2000, 7);
        let s = stft(&x, &cfg).unwrap();
        let w = cfg.analysis_window();
        let k = 6; // fully interior frame
        let start = k * cfg.hop - cfg.pad();
        let frame: Vec<f64> = (0..512).map(|i| x[start + i] * w[i]).collect();
        for (f, (re, im)) in direct_dft(&frame).into_iter().enumerate() {
            assert!((s.re.at(&[f, k]) - re).abs() < 1e-9);
            assert!((s.im.at(&[f, k]) - im).abs() < 1e-9);
        }
    }

    #[test]
    fn bin_centred_sinusoid_stays_in_main_lobe() {
        let cfg = StftConfig::default();
        let bin = 32;
        let x: Vec<f64> = (0..4096)
            .map(|n| (2.0 * PI * bin as f64 * n as f64 / 512.0).cos())
            .collect();
        let s = stft(&x, &cfg).unwrap();
        let mag = s.magnitude();
        for k in 4..s.frames() - 4 {
            let energy: Vec<f64> = (0..s.bins()).map(|f| mag.at(&[f, k]).powi(2)).collect();
            let total: f64 = energy.iter().sum();
            let lobe: f64 = energy[bin - 2..=bin + 2].iter().sum();
            let peak = (0..s.bins()).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
            assert_eq!(peak, bin);
            assert!(lobe / total >= 0.95, "frame {k}: {}", lobe / total);
        }
    }

    #[test]
    fn impulse_magnitude_traces_window() {
        let cfg = StftConfig::default();
        let mut x = vec![0.0; 2048];
        let m = 1000;
        x[m] = 1.0;
        let s = stft(&x, &cfg).unwrap();
        let w = cfg.analysis_window();
        let mag = s.magnitude();
        for k in 0..s.frames() {
            let local = (m + cfg.pad()) as isize - (k * cfg.hop) as isize;
            let expected = if (0..512).contains(&local) { w[local as usize].abs() } else { 0.0 };
            for f in [0, 1, 100, 256] {
                assert!((mag.at(&[f, k]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        let cfg = StftConfig::default();
        for (len, seed) in [(2048, 1), (3001, 2), (16000, 3)] {
            let x = random_signal(len, seed);
            let y = istft(&stft(&x, &cfg).unwrap(), &cfg, len).unwrap();
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6 * peak, "len {len}: {err}");
        }
    }

    #[test]
    fn zero_spectrogram_synthesizes_silence() {
        let cfg = StftConfig::default();
        let y = istft(&Spectrogram::zeros(cfg, 10), &cfg, 1000).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_is_linear() {
        let cfg = StftConfig::default();
        let s1 = stft(&random_signal(3000, 4), &cfg).unwrap();
        let s2 = stft(&random_signal(3000, 5), &cfg).unwrap();
        let (a, b) = (0.7, -1.3);
        let lhs = istft(&s1.axpby(a, &s2, b).unwrap(), &cfg, 3000).unwrap();
        let y1 = istft(&s1, &cfg, 3000).unwrap();
        let y2 = istft(&s2, &cfg, 3000).unwrap();
        for i in 0..3000 {
            assert!((lhs[i] - (a * y1[i] + b * y2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = StftConfig::default();
        let other = StftConfig { hop: 256, ..cfg };
        let s = stft(&random_signal(2048, 9), &cfg).unwrap();
        assert!(matches!(istft(&s, &other, 2048), Err(Error::Config(_))));
    }
}
