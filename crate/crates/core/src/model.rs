//! The enhancement network.
//!
//! ```text
//!            ┌── CNN(45,90) ──────────── C ──┬──────────┐
//! features ──┤                               │  MHSA ── M ─┐
//!            └── CNN(30,60) ── BLSTM ── Λ ──┐ │             │
//!                                 │         BLSTM×2 ─ B ────┴─ linear ─ mask (2F×K)
//!                                 └─ linear ─ Z (L×K) ─ mean_k ─ softmax ─ ẑ
//! ```
//!
//! The [`Architecture::Gru`] variant drops both CNN blocks and the attention
//! path and uses single-layer BiGRUs; features enter the recurrent layers
//! directly.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, BoundParams, ParamStore, Tape, Tensor, Var};
use crate::dsp::{
    apply_mask, istft_on_tape, log_amplitude_features, normalize_per_frequency, ComplexMask, NormStats, Spectrogram,
    StftConfig, StftEngine,
};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Affine, BiRnn, BiRnnSpec, CellKind, Conv2d, Conv2dSpec, Linear, MhsaModule, MhsaSpec};
use crate::objectives::{multitask_loss_on_tape, LossBreakdown, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// CNN, SPK, BLSTM and MHSA blocks.
    Full,
    /// Single-layer BiGRUs on the raw features, no CNN or attention.
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// D
    pub feature_dim: usize,
    /// H
    pub heads: usize,
    /// F
    pub bins: usize,
    /// L
    pub speakers: usize,
    pub cnn_channels: [usize; 2],
    pub spk_cnn_channels: [usize; 2],
    /// Output channels of the 1×1 convolution closing each CNN block.
    pub pointwise_channels: usize,
    pub blstm_layers: usize,
    pub mhsa_modules: usize,
    pub use_spk: bool,
    pub use_mhsa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Full,
            feature_dim: 128,
            heads: 4,
            bins: 257,
            speakers: 4,
            cnn_channels: [45, 90],
            spk_cnn_channels: [30, 60],
            pointwise_channels: 1,
            blstm_layers: 2,
            mhsa_modules: 2,
            use_spk: true,
            use_mhsa: true,
        }
    }
}

impl ModelConfig {
    /// Full-size dimensions: D = 600 with 28 training speakers.
    pub fn full_scale() -> Self {
        ModelConfig {
            feature_dim: 600,
            speakers: 28,
            ..ModelConfig::default()
        }
    }

    /// The reduced recurrent network (no CNN or MHSA, BiGRU layers).
    pub fn gru(feature_dim: usize, speakers: usize, use_spk: bool) -> Self {
        ModelConfig {
            architecture: Architecture::Gru,
            feature_dim,
            speakers,
            blstm_layers: 1,
            use_spk,
            use_mhsa: false,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("feature_dim must be even and ≥ 2, got {d}")));
        }
        if self.speakers < 2 {
            return Err(Error::Config(format!("need at least 2 speakers, got {}", self.speakers)));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("bins must be ≥ 2, got {}", self.bins)));
        }
        if self.blstm_layers == 0 {
            return Err(Error::Config("blstm_layers must be ≥ 1".into()));
        }
        match self.architecture {
            Architecture::Full => {
                let channels = self.cnn_channels.iter().chain(&self.spk_cnn_channels);
                if channels.chain([&self.pointwise_channels]).any(|&c| c == 0) {
                    return Err(Error::Config("convolution channel counts must be positive".into()));
                }
                if self.use_mhsa {
                    if self.mhsa_modules == 0 {
                        return Err(Error::Config("mhsa_modules must be ≥ 1 when use_mhsa is set".into()));
                    }
                    MhsaSpec {
                        model_dim: d / 2,
                        heads: self.heads,
                    }
                    .validate()?;
                }
            }
            Architecture::Gru => {
                if self.use_mhsa {
                    return Err(Error::Config("the gru architecture has no attention path; set use_mhsa = false".into()));
                }
            }
        }
        Ok(())
    }

    /// Row count of the mask-head input.
    pub fn head_input_dim(&self) -> usize {
        2 * self.feature_dim + if self.use_mhsa { self.feature_dim / 2 } else { 0 }
    }
}

/// conv5×5 + IN + lrelu, twice, then conv1×1 and a linear map of the
/// flattened channel×frequency column to D.
#[derive(Clone, Debug)]
pub struct CnnBlock {
    pub conv1: Conv2d,
    pub norm1: Affine,
    pub conv2: Conv2d,
    pub norm2: Affine,
    pub pointwise: Conv2d,
    pub proj: Linear,
}

impl CnnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bins: usize,
        channels: [usize; 2],
        pointwise: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let [c1, c2] = channels;
        Ok(CnnBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), Conv2dSpec::same_5x5(1, c1), rng)?,
            norm1: Affine::new(store, &format!("{name}.in1"), c1)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), Conv2dSpec::same_5x5(c1, c2), rng)?,
            norm2: Affine::new(store, &format!("{name}.in2"), c2)?,
            pointwise: Conv2d::new(store, &format!("{name}.conv3"), Conv2dSpec::pointwise(c2, pointwise), rng)?,
            proj: Linear::new(store, &format!("{name}.linear"), pointwise * bins, out_dim, true, rng)?,
        })
    }

    /// 1×F×K input to D×K.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.norm1.instance_norm(tape, p, h)?;
        let h = leaky_relu(tape, h);
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.norm2.instance_norm(tape, p, h)?;
        let h = leaky_relu(tape, h);
        let h = self.pointwise.forward(tape, p, h)?;
        let shape = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[shape[0] * shape[1], shape[2]])?;
        self.proj.forward(tape, p, flat)
    }
}

/// Linear D→D/2 followed by cascaded attention modules.
#[derive(Clone, Debug)]
pub struct MhsaBlock {
    pub proj: Linear,
    pub modules: Vec<MhsaModule>,
}

#[derive(Clone, Debug)]
pub struct SpkBlock {
    pub cnn: Option<CnnBlock>,
    pub rnn: BiRnn,
}

/// Every tape variable of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub mask_re: Var,
    pub mask_im: Var,
    /// Main-path features C (the normalized input itself for the GRU variant).
    pub c: Var,
    pub lambda: Option<Var>,
    pub b: Var,
    pub gamma: Option<Var>,
    pub m: Option<Var>,
    /// Speaker logits Z, L×K.
    pub logits: Option<Var>,
    /// Pooled posterior ẑ as an L-vector.
    pub posterior: Option<Var>,
    /// Per module, per head K×K attention.
    pub attention: Vec<Vec<Var>>,
}

/// Network, frozen feature statistics and the STFT used around it.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    engine: Arc<StftEngine>,
    pub params: ParamStore,
    pub stats: NormStats,
    cnn: Option<CnnBlock>,
    spk: Option<SpkBlock>,
    recurrent: BiRnn,
    mhsa: Option<MhsaBlock>,
    mask_head: Linear,
    speaker_head: Option<Linear>,
}

impl Model {
    pub fn new(config: ModelConfig, stft: StftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        stft.validate()?;
        if stft.bins() != config.bins {
            return Err(Error::Config(format!(
                "model expects {} frequency bins but a {}-point DFT yields {}",
                config.bins,
                stft.dft_size,
                stft.bins()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f) = (config.feature_dim, config.bins);
        let full = config.architecture == Architecture::Full;

        let cnn = if full {
            Some(CnnBlock::new(&mut store, "cnn", f, config.cnn_channels, config.pointwise_channels, d, &mut rng)?)
        } else {
            None
        };
        let c_dim = if full { d } else { f };

        let spk = if config.use_spk {
            let (spk_cnn, cell, in_dim) = if full {
                let block = CnnBlock::new(&mut store, "spk.cnn", f, config.spk_cnn_channels, config.pointwise_channels, d, &mut rng)?;
                (Some(block), CellKind::Lstm, d)
            } else {
                (None, CellKind::Gru, f)
            };
            let spec = BiRnnSpec {
                cell,
                input_dim: in_dim,
                hidden_dim: d / 2,
                layers: 1,
            };
            let rnn = BiRnn::new(&mut store, "spk.rnn", spec, &mut rng)?;
            Some(SpkBlock { cnn: spk_cnn, rnn })
        } else {
            None
        };

        let recurrent = BiRnn::new(
            &mut store,
            "blstm",
            BiRnnSpec {
                cell: if full { CellKind::Lstm } else { CellKind::Gru },
                input_dim: c_dim + if config.use_spk { d } else { 0 },
                hidden_dim: d,
                layers: config.blstm_layers,
            },
            &mut rng,
        )?;

        let mhsa = if config.use_mhsa {
            let proj = Linear::new(&mut store, "mhsa.linear", d, d / 2, true, &mut rng)?;
            let spec = MhsaSpec {
                model_dim: d / 2,
                heads: config.heads,
            };
            let modules = (0..config.mhsa_modules)
                .map(|i| MhsaModule::new(&mut store, &format!("mhsa.m{i}"), spec, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Some(MhsaBlock { proj, modules })
        } else {
            None
        };

        let mask_head = Linear::new(&mut store, "mask", config.head_input_dim(), 2 * f, true, &mut rng)?;
        let speaker_head = if config.use_spk {
            Some(Linear::new(&mut store, "speaker", d, config.speakers, true, &mut rng)?)
        } else {
            None
        };

        Ok(Model {
            engine: Arc::new(StftEngine::new(stft)?),
            stats: NormStats::identity(f),
            params: store,
            config,
            cnn,
            spk,
            recurrent,
            mhsa,
            mask_head,
            speaker_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stft(&self) -> &StftConfig {
        self.engine.config()
    }

    pub fn engine(&self) -> &Arc<StftEngine> {
        &self.engine
    }

    /// Names of the parameters belonging to the attention path.
    pub fn mhsa_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("mhsa."))
            .map(|(_, name, _)| name.to_string())
            .collect()
    }

    /// Normalized log-amplitude features of a spectrogram.
    pub fn features(&self, spec: &Spectrogram) -> Result<Tensor> {
        normalize_per_frequency(&log_amplitude_features(spec), &self.stats)
    }

    /// Forward pass on normalized F×K features.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, features: Var) -> Result<ModelOutput> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[0] != self.config.bins {
            return Err(Error::shape("model input", &[&shape, &[self.config.bins]]));
        }
        if p.vars().len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} bound parameters for a model with {}",
                p.vars().len(),
                self.params.len()
            )));
        }
        let (f, k) = (shape[0], shape[1]);
        let image = tape.reshape(features, &[1, f, k])?;

        let c = match &self.cnn {
            Some(cnn) => cnn.forward(tape, p, image)?,
            None => features,
        };

        let lambda = match &self.spk {
            Some(spk) => {
                let h = match &spk.cnn {
                    Some(cnn) => cnn.forward(tape, p, image)?,
                    None => features,
                };
                Some(spk.rnn.forward(tape, p, h)?)
            }
            None => None,
        };

        let rnn_in = match lambda {
            Some(l) => tape.concat(&[c, l], 0)?,
            None => c,
        };
        let b = self.recurrent.forward(tape, p, rnn_in)?;

        let (gamma, m, attention) = match &self.mhsa {
            Some(block) => {
                let gamma = block.proj.forward(tape, p, c)?;
                let mut h = gamma;
                let mut maps = Vec::with_capacity(block.modules.len());
                for module in &block.modules {
                    let out = module.forward(tape, p, h)?;
                    h = out.output;
                    maps.push(out.attention);
                }
                (Some(gamma), Some(h), maps)
            }
            None => (None, None, Vec::new()),
        };

        let head_in = match m {
            Some(m) => tape.concat(&[b, m], 0)?,
            None => b,
        };
        let mask = self.mask_head.forward(tape, p, head_in)?;
        let mask_re = tape.slice(mask, 0, 0, f)?;
        let mask_im = tape.slice(mask, 0, f, f)?;

        let (logits, posterior) = match (&self.speaker_head, lambda) {
            (Some(head), Some(l)) => {
                let z = head.forward(tape, p, l)?;
                let pooled = tape.mean_axis(z, 1)?;
                let pooled = tape.reshape(pooled, &[1, self.config.speakers])?;
                let post = tape.softmax(pooled);
                let post = tape.reshape(post, &[self.config.speakers])?;
                (Some(z), Some(post))
            }
            _ => (None, None),
        };

        Ok(ModelOutput {
            mask_re,
            mask_im,
            c,
            lambda,
            b,
            gamma,
            m,
            logits,
            posterior,
            attention,
        })
    }

    /// Time-domain estimate `istft(M ⊙ X)` on the tape.
    pub fn masked_waveform(&self, tape: &mut Tape, out: &ModelOutput, spec: &Spectrogram, len: usize) -> Result<Var> {
        let xr = tape.constant(spec.re.clone());
        let xi = tape.constant(spec.im.clone());
        let rr = tape.mul(out.mask_re, xr)?;
        let ii = tape.mul(out.mask_im, xi)?;
        let ri = tape.mul(out.mask_re, xi)?;
        let ir = tape.mul(out.mask_im, xr)?;
        let yr = tape.sub(rr, ii)?;
        let yi = tape.add(ri, ir)?;
        istft_on_tape(tape, &self.engine, yr, yi, len)
    }

    /// Builds the loss of one training pair on `tape`. The cross-entropy term
    /// is included when `label` is given and the model has a speaker head.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        clean: &[f64],
        mixture: &[f64],
        label: Option<usize>,
        loss: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let spec = self.engine.analyze(mixture)?;
        let feats = tape.constant(self.features(&spec)?);
        let out = self.forward(tape, p, feats)?;
        let y = self.masked_waveform(tape, &out, &spec, mixture.len())?;
        let speaker = match (label, out.posterior) {
            (Some(l), Some(post)) => Some((post, l)),
            _ => None,
        };
        multitask_loss_on_tape(tape, clean, mixture, y, speaker, loss)
    }

    /// Enhances one waveform; the returned signal has the input's length.
    pub fn enhance(&self, waveform: &[f64]) -> Result<Enhancement> {
        let spec = self.engine.analyze(waveform)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let feats = tape.constant(self.features(&spec)?);
        let out = self.forward(&mut tape, &p, feats)?;
        let mask = ComplexMask::new(tape.value(out.mask_re).clone(), tape.value(out.mask_im).clone())?;
        let enhanced = apply_mask(&spec, &mask)?;
        let samples = self.engine.synthesize(&enhanced, waveform.len())?;
        let posteriors = match out.logits {
            Some(z) => Some(frame_posteriors(tape.value(z))),
            None => None,
        };
        let attention = out
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&a| tape.value(a).clone()).collect())
            .collect();
        Ok(Enhancement {
            samples,
            mask,
            posteriors,
            attention,
        })
    }

    /// Writes parameters and a JSON description of the model to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save_params(&self.params, dir, "model")?;
        let meta = ModelMeta {
            model: self.config.clone(),
            stft: *self.stft(),
            stats: self.stats.clone(),
        };
        let path = dir.join("model.config.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("model config", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.config.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::json("model config", e))?;
        let mut model = Model::new(meta.model, meta.stft, 0)?;
        if meta.stats.bins() != model.config.bins {
            return Err(Error::Data(format!("normalization statistics in {} have the wrong size", path.display())));
        }
        model.stats = meta.stats;
        model.replace_params(checkpoint::load_params(dir, "model")?)?;
        Ok(model)
    }

    /// Swaps in a parameter set with exactly the same names and shapes.
    pub fn replace_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                self.params.len()
            )));
        }
        for ((_, want, t0), (_, got, t1)) in self.params.iter().zip(params.iter()) {
            if want != got || t0.shape() != t1.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {got:?} {:?} does not match model tensor {want:?} {:?}",
                    t1.shape(),
                    t0.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    stft: StftConfig,
    stats: NormStats,
}

/// Per-frame posteriors `softmax(z_k)`, L×K.
pub fn frame_posteriors(logits: &Tensor) -> Tensor {
    let (l, k) = logits.dims2();
    let z = logits.data();
    let mut out = vec![0.0; l * k];
    for col in 0..k {
        let max = (0..l).map(|r| z[r * k + col]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..l).map(|r| (z[r * k + col] - max).exp()).sum();
        for r in 0..l {
            out[r * k + col] = (z[r * k + col] - max).exp() / total;
        }
    }
    Tensor::new(&[l, k], out).expect("same shape as logits")
}

/// Applies a fixed mask to a waveform: `istft(mask ⊙ stft(x))`.
pub fn resynthesize(engine: &StftEngine, waveform: &[f64], mask: &ComplexMask) -> Result<Vec<f64>> {
    let spec = engine.analyze(waveform)?;
    engine.synthesize(&apply_mask(&spec, mask)?, waveform.len())
}

/// Result of [`Model::enhance`].
#[derive(Clone, Debug)]
pub struct Enhancement {
    pub samples: Vec<f64>,
    pub mask: ComplexMask,
    /// Per-frame speaker posteriors, L×K.
    pub posteriors: Option<Tensor>,
    pub attention: Vec<Vec<Tensor>>,
}

impl Enhancement {
    /// Writes `posteriors.csv` (one row per frame) and one
    /// `attention_m{module}_h{head}.csv` per attention map.
    pub fn write_diagnostics(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        if let Some(post) = &self.posteriors {
            let (l, k) = post.dims2();
            let mut text = String::from("frame");
            for s in 0..l {
                text.push_str(&format!(",speaker_{s}"));
            }
            text.push('\n');
            for col in 0..k {
                text.push_str(&col.to_string());
                for s in 0..l {
                    text.push_str(&format!(",{:e}", post.at(&[s, col])));
                }
                text.push('\n');
            }
            let path = dir.join(format!("{stem}.posteriors.csv"));
            write_text(&path, &text)?;
            written.push(path);
        }
        for (mi, heads) in self.attention.iter().enumerate() {
            for (hi, a) in heads.iter().enumerate() {
                let (rows, cols) = a.dims2();
                let mut text = String::new();
                for r in 0..rows {
                    let row: Vec<String> = (0..cols).map(|c| format!("{:e}", a.at(&[r, c]))).collect();
                    text.push_str(&row.join(","));
                    text.push('\n');
                }
                let path = dir.join(format!("{stem}.attention_m{mi}_h{hi}.csv"));
                write_text(&path, &text)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
