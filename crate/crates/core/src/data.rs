//! Synthetic corpus, manifests, noise-swap augmentation and batching.
//!
//! Each synthetic speaker is a harmonic source with its own pitch range,
//! vocal-tract scale and syllable rate; every syllable takes one vowel from
//! an inventory shared by all speakers. Noises are white, band-passed, or
//! white noise gated on and off.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::wav::{read_wav, write_wav, WavEncoding};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};

/// Bucketing bound on max/min frame count inside one batch.
pub const MAX_BUCKET_RATIO: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Bandpass,
    Modulated,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Bandpass, NoiseKind::Modulated];
}

/// Clean speech, noise and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePair {
    pub id: String,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub mixture: Vec<f64>,
    pub speaker: usize,
    pub snr_db: f64,
    pub sample_rate: u32,
}

impl UtterancePair {
    pub fn new(id: impl Into<String>, clean: Vec<f64>, noise: Vec<f64>, speaker: usize, sample_rate: u32) -> Result<Self> {
        if clean.len() != noise.len() || clean.is_empty() {
            return Err(Error::shape("utterance pair", &[&[clean.len()], &[noise.len()]]));
        }
        let mixture = clean.iter().zip(&noise).map(|(s, n)| s + n).collect();
        let snr_db = measured_snr_db(&clean, &noise);
        Ok(UtterancePair {
            id: id.into(),
            clean,
            noise,
            mixture,
            speaker,
            snr_db,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// `10·log10(‖s‖² / ‖n‖²)`.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    let es: f64 = clean.iter().map(|v| v * v).sum();
    let en: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (es / en).log10()
}

/// Resonance centres (Hz) of the shared vowel inventory at unit scale.
pub const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];

/// Resonance bandwidths (Hz) at unit scale.
pub const BANDWIDTHS: [f64; 3] = [80.0, 110.0, 160.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0_low: f64,
    pub f0_high: f64,
    /// Multiplier on every vowel resonance (vocal-tract length).
    pub formant_scale: f64,
    /// Syllables per second.
    pub syllable_rate: f64,
}

impl SpeakerProfile {
    pub fn f0_centre(&self) -> f64 {
        0.5 * (self.f0_low + self.f0_high)
    }

    /// (centre, bandwidth) of each resonance of vowel `v`.
    pub fn resonances(&self, v: usize) -> [(f64, f64); 3] {
        let mut out = [(0.0, 0.0); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (VOWELS[v][i] * self.formant_scale, BANDWIDTHS[i] * self.formant_scale);
        }
        out
    }

    /// Larger of the pitch-centre gap and the gap of the highest neutral
    /// resonance (2500 Hz at unit scale), in Hz.
    pub fn distance(&self, other: &SpeakerProfile) -> f64 {
        let pitch = (self.f0_centre() - other.f0_centre()).abs();
        let tract = 2500.0 * (self.formant_scale - other.formant_scale).abs();
        pitch.max(tract)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub per_speaker: usize,
    pub snr_db: Vec<f64>,
    pub sample_rate: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    /// Minimum pairwise [`SpeakerProfile::distance`] in Hz.
    pub profile_margin_hz: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            speakers: 4,
            per_speaker: 300,
            snr_db: vec![0.0],
            sample_rate: 16_000,
            min_seconds: 0.5,
            max_seconds: 0.6,
            dev_fraction: 0.1,
            test_fraction: 0.15,
            profile_margin_hz: 20.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::Config(format!("corpus needs at least 2 speakers, got {}", self.speakers)));
        }
        if self.per_speaker == 0 {
            return Err(Error::Config("per_speaker must be ≥ 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("snr_db must list finite values".into()));
        }
        if !(self.min_seconds > 0.0 && self.max_seconds >= self.min_seconds) {
            return Err(Error::Config("need 0 < min_seconds ≤ max_seconds".into()));
        }
        if self.sample_rate < 4000 {
            return Err(Error::Config("sample_rate must be ≥ 4000 Hz".into()));
        }
        let (d, t) = (self.dev_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&d) || !(0.0..1.0).contains(&t) || d + t >= 1.0 {
            return Err(Error::Config("dev and test fractions must leave room for training data".into()));
        }
        Ok(())
    }

    /// (train, dev, test) utterance counts per speaker.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.per_speaker;
        let test = ((n as f64 * self.test_fraction).round() as usize).min(n);
        let dev = ((n as f64 * self.dev_fraction).round() as usize).min(n - test);
        (n - test - dev, dev, test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub sample_rate: u32,
    pub samples: usize,
    /// Paths relative to the manifest directory.
    pub clean: String,
    pub noise: String,
    pub mixture: String,
}

/// JSON-lines utterance list; WAV paths are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).map_err(|err| Error::json("manifest entry", err))?);
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a manifest file; entries resolve relative to its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("manifest {} lists no utterances", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, entries })
    }

    pub fn speakers(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.speaker).collect()
    }

    /// Loads the three signals of every entry.
    pub fn load(&self) -> Result<Corpus> {
        let mut pairs = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let read = |rel: &str| -> Result<Vec<f64>> {
                let audio = read_wav(&self.root.join(rel))?;
                if audio.sample_rate != e.sample_rate || audio.samples.len() != e.samples {
                    return Err(Error::Data(format!(
                        "{rel}: expected {} samples at {} Hz, found {} at {} Hz",
                        e.samples,
                        e.sample_rate,
                        audio.samples.len(),
                        audio.sample_rate
                    )));
                }
                Ok(audio.samples)
            };
            pairs.push(UtterancePair {
                id: e.id.clone(),
                clean: read(&e.clean)?,
                noise: read(&e.noise)?,
                mixture: read(&e.mixture)?,
                speaker: e.speaker,
                snr_db: e.snr_db,
                sample_rate: e.sample_rate,
            });
        }
        Ok(Corpus {
            manifest: self.clone(),
            pairs,
        })
    }
}

/// A manifest together with its signals, index-aligned with the entries.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub pairs: Vec<UtterancePair>,
}

/// Draws the speaker profiles of a corpus.
pub fn speaker_profiles(config: &CorpusConfig) -> Result<Vec<SpeakerProfile>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let l = config.speakers;
    let spacing = 170.0 / (l - 1) as f64;
    let mut profiles = Vec::with_capacity(l);
    for i in 0..l {
        let centre = 90.0 + spacing * i as f64 + rng.gen_range(-0.2..0.2) * spacing;
        let spread = centre * rng.gen_range(0.2..0.3);
        let scale = 0.85 + 0.3 * i as f64 / (l - 1) as f64 + rng.gen_range(-0.02..0.02);
        profiles.push(SpeakerProfile {
            f0_low: centre - spread,
            f0_high: centre + spread,
            formant_scale: scale,
            syllable_rate: rng.gen_range(3.0..6.0),
        });
    }
    for i in 0..l {
        for j in 0..i {
            let d = profiles[i].distance(&profiles[j]);
            if d < config.profile_margin_hz {
                return Err(Error::Config(format!(
                    "speakers {j} and {i} differ by only {d:.1} Hz (margin {} Hz); use fewer speakers or a smaller margin",
                    config.profile_margin_hz
                )));
            }
        }
    }
    Ok(profiles)
}

/// Harmonic speech-like signal of `len` samples with RMS 0.05.
pub fn synthesize_speech(profile: &SpeakerProfile, len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let nyquist = 0.45 * sr;
    let syllable = sr / profile.syllable_rate;
    let syllables = (len as f64 / syllable).ceil() as usize + 2;
    // per-syllable pitch target and resonance shift
    let pitch: Vec<f64> = (0..syllables).map(|_| rng.gen_range(profile.f0_low..=profile.f0_high)).collect();
    let vowel: Vec<usize> = (0..syllables).map(|_| rng.gen_range(0..VOWELS.len())).collect();
    let onset = rng.gen_range(0.0..1.0);
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    let mut out = vec![0.0; len];
    for (t, o) in out.iter_mut().enumerate() {
        let pos = t as f64 / syllable + onset;
        let idx = pos.floor() as usize;
        let frac = pos - pos.floor();
        let f0 = pitch[idx] + (pitch[idx + 1] - pitch[idx]) * frac * frac * (3.0 - 2.0 * frac);
        phase += 2.0 * PI * f0 / sr;
        let envelope = (PI * frac).sin().max(0.0).powf(0.7);
        if envelope == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        let mut h = 1.0;
        while h * f0 < nyquist {
            let freq = h * f0;
            let mut gain = 0.02 / h;
            for (centre, bw) in profile.resonances(vowel[idx]) {
                let r = (freq - centre) / bw;
                gain += 1.0 / (1.0 + r * r);
            }
            acc += gain * (h * phase).sin();
            h += 1.0;
        }
        *o = envelope * acc;
    }
    set_rms(&mut out, 0.05);
    out
}

fn set_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Unit-RMS noise of the requested family.
pub fn synthesize_noise(kind: NoiseKind, len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    match kind {
        NoiseKind::White => {}
        NoiseKind::Bandpass => {
            // RBJ band-pass biquad, run twice for a steeper skirt
            let centre = rng.gen_range(300.0..(0.3 * sr).min(4000.0));
            let q = rng.gen_range(1.0..3.0);
            let w0 = 2.0 * PI * centre / sr;
            let alpha = w0.sin() / (2.0 * q);
            let a0 = 1.0 + alpha;
            let (b0, b2) = (alpha / a0, -alpha / a0);
            let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
            for _ in 0..2 {
                let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
                for v in white.iter_mut() {
                    let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
                    x2 = x1;
                    x1 = *v;
                    y2 = y1;
                    y1 = y;
                    *v = y;
                }
            }
        }
        NoiseKind::Modulated => {
            let rate = rng.gen_range(1.5..5.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (t, v) in white.iter_mut().enumerate() {
                let s = (2.0 * PI * rate * t as f64 / sr + phase).sin();
                let gate = 1.0 / (1.0 + (-30.0 * (s - 0.2)).exp());
                *v *= 0.05 + 0.95 * gate;
            }
        }
    }
    set_rms(&mut white, 1.0);
    white
}

/// Scales `noise` so that `10·log10(‖s‖²/‖n‖²) = snr_db`.
pub fn scale_to_snr(clean: &[f64], noise: &mut [f64], snr_db: f64) {
    let es: f64 = clean.iter().map(|v| v * v).sum();
    let en: f64 = noise.iter().map(|v| v * v).sum();
    let g = (es / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    noise.iter_mut().for_each(|v| *v *= g);
}

/// Generates the corpus into `dir` (WAVs under `dir/wav`, manifest at
/// `dir/manifest.jsonl`) and returns it in memory.
pub fn generate_corpus(config: &CorpusConfig, dir: &Path) -> Result<Corpus> {
    let profiles = speaker_profiles(config)?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let (n_train, n_dev, _) = config.split_counts();
    let sr = config.sample_rate;
    let mut entries = Vec::new();
    let mut pairs = Vec::new();
    for (spk, profile) in profiles.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(spk as u64));
        for u in 0..config.per_speaker {
            let split = if u < n_train {
                Split::Train
            } else if u < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            let seconds = rng.gen_range(config.min_seconds..=config.max_seconds);
            let len = (seconds * sr as f64).round() as usize;
            let clean = synthesize_speech(profile, len, sr, &mut rng);
            let kind = NoiseKind::ALL[u % NoiseKind::ALL.len()];
            let mut noise = synthesize_noise(kind, len, sr, &mut rng);
            let snr = config.snr_db[rng.gen_range(0..config.snr_db.len())];
            scale_to_snr(&clean, &mut noise, snr);
            let id = format!("spk{spk:02}_{u:04}");
            let pair = UtterancePair::new(id.clone(), clean, noise, spk, sr)?;
            let rel = |part: &str| format!("wav/{id}_{part}.wav");
            for (part, signal) in [("clean", &pair.clean), ("noise", &pair.noise), ("mix", &pair.mixture)] {
                write_wav(&dir.join(rel(part)), signal, sr, WavEncoding::Float32)?;
            }
            let (clean, noise, mixture) = (rel("clean"), rel("noise"), rel("mix"));
            entries.push(ManifestEntry {
                id,
                speaker: spk,
                split,
                snr_db: snr,
                noise_kind: kind,
                sample_rate: sr,
                samples: len,
                clean,
                noise,
                mixture,
            });
            pairs.push(pair);
        }
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(Corpus { manifest, pairs })
}

/// Loops or trims `noise` to `len` samples.
fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    noise.iter().cycle().take(len).copied().collect()
}

/// Exchanges the noises of two pairs: returns `(s_a + n_b, s_b + n_a)`.
pub fn noise_swap_augment(a: &UtterancePair, b: &UtterancePair) -> Result<(UtterancePair, UtterancePair)> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::InvalidInput(format!(
            "cannot swap noise between {} Hz and {} Hz signals",
            a.sample_rate, b.sample_rate
        )));
    }
    let first = UtterancePair::new(a.id.clone(), a.clean.clone(), fit_length(&b.noise, a.len()), a.speaker, a.sample_rate)?;
    let second = UtterancePair::new(b.id.clone(), b.clean.clone(), fit_length(&a.noise, b.len()), b.speaker, b.sample_rate)?;
    Ok((first, second))
}

/// Randomly pairs the given utterances and swaps each pair's noise with
/// probability `prob`. Output order follows the input.
pub fn augment_epoch(pairs: &[&UtterancePair], prob: f64, rng: &mut impl Rng) -> Result<Vec<UtterancePair>> {
    let mut out: Vec<UtterancePair> = pairs.iter().map(|p| (*p).clone()).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks_exact(2) {
        if rng.gen_bool(prob) {
            let (i, j) = (chunk[0], chunk[1]);
            let (a, b) = noise_swap_augment(pairs[i], pairs[j])?;
            out[i] = a;
            out[j] = b;
        }
    }
    Ok(out)
}

/// Groups item indices into batches of at most `batch_size` whose frame
/// counts stay within [`MAX_BUCKET_RATIO`]; batch order is shuffled.
pub fn bucket_batches(frames: &[usize], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if frames.is_empty() {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| frames[i]);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let fits = current
            .first()
            .map_or(true, |&lo| frames[i] as f64 <= MAX_BUCKET_RATIO * frames[lo] as f64);
        if current.len() == batch_size || !fits {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    batches.push(current);
    batches.shuffle(rng);
    Ok(batches)
}

/// Batches of manifest indices for one split and epoch seed.
pub fn make_batches(manifest: &Manifest, split: Split, batch_size: usize, stft: &StftConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    let members: Vec<usize> = (0..manifest.entries.len()).filter(|&i| manifest.entries[i].split == split).collect();
    let frames: Vec<usize> = members.iter().map(|&i| stft.frames(manifest.entries[i].samples)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = bucket_batches(&frames, batch_size, &mut rng)
        .map_err(|e| Error::Data(format!("split {split:?}: {e}")))?;
    Ok(batches
        .into_iter()
        .map(|b| b.into_iter().map(|i| members[i]).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Train on the target speaker only.
    #[serde(rename = "close")]
    Close,
    /// Train on every other speaker.
    #[serde(rename = "open")]
    Open,
    /// As `Open`, with the SPK branch and the cross-entropy term.
    #[serde(rename = "open+spk")]
    OpenSpk,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Close, Protocol::Open, Protocol::OpenSpk];

    pub fn uses_spk(self) -> bool {
        self == Protocol::OpenSpk
    }

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Close => "Close",
            Protocol::Open => "Open",
            Protocol::OpenSpk => "Open+SPK",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "close" => Ok(Protocol::Close),
            "open" => Ok(Protocol::Open),
            "open+spk" | "open-spk" | "openspk" => Ok(Protocol::OpenSpk),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (close, open, open+spk)"))),
        }
    }
}

/// Manifest indices of one protocol arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub protocol: Protocol,
    pub target: usize,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    /// Class index of each training speaker.
    pub labels: BTreeMap<usize, usize>,
}

impl ProtocolSplit {
    pub fn train_speakers(&self) -> Vec<usize> {
        self.labels.keys().copied().collect()
    }
}

pub fn protocol_split(manifest: &Manifest, protocol: Protocol, target: usize) -> Result<ProtocolSplit> {
    let speakers = manifest.speakers();
    if !speakers.contains(&target) {
        return Err(Error::Data(format!("target speaker {target} is not in the corpus (speakers {speakers:?})")));
    }
    let trains_on = |spk: usize| match protocol {
        Protocol::Close => spk == target,
        Protocol::Open | Protocol::OpenSpk => spk != target,
    };
    let pick = |split: Split, keep: &dyn Fn(usize) -> bool| -> Vec<usize> {
        (0..manifest.entries.len())
            .filter(|&i| manifest.entries[i].split == split && keep(manifest.entries[i].speaker))
            .collect()
    };
    let train = pick(Split::Train, &trains_on);
    let dev = pick(Split::Dev, &trains_on);
    let test = pick(Split::Test, &|spk| spk == target);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "{} protocol for speaker {target}: {} training and {} test utterances",
            protocol.label(),
            train.len(),
            test.len()
        )));
    }
    let labels = speakers
        .iter()
        .copied()
        .filter(|&s| trains_on(s))
        .enumerate()
        .map(|(class, spk)| (spk, class))
        .collect();
    Ok(ProtocolSplit {
        protocol,
        target,
        train,
        dev,
        test,
        labels,
    })
}
