//! Training loop, learning-rate schedule, checkpoints, evaluation and the
//! three-protocol comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, checkpoint, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::data::{augment_epoch, bucket_batches, protocol_split, Corpus, CorpusConfig, Protocol, ProtocolSplit, UtterancePair};
use crate::dsp::{log_amplitude_features, NormStats, StftConfig, StftEngine};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::{multitask_loss, sdr, si_sdr, LossBreakdown, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub target_speaker: usize,
    /// Probability of a noise swap per pair of training utterances.
    pub augment_prob: f64,
    /// Periodic checkpoint interval in epochs (0 disables).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr: 0.001,
            batch_size: 8,
            seed: 0,
            protocol: Protocol::Open,
            target_speaker: 0,
            augment_prob: 0.5,
            checkpoint_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::Config(format!("augment_prob must lie in [0, 1], got {}", self.augment_prob)));
        }
        Ok(())
    }
}

/// Every section of a run's configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub stft: StftConfig,
}

impl ExperimentConfig {
    /// Settings of the protocol comparison: the BiGRU network at D = 128.
    pub fn verification() -> Self {
        ExperimentConfig {
            model: ModelConfig::gru(128, 4, true),
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.stft.validate()?;
        if self.model.bins != self.stft.bins() {
            return Err(Error::Config(format!(
                "model.bins = {} but stft.dft_size = {} gives {} bins",
                self.model.bins,
                self.stft.dft_size,
                self.stft.bins()
            )));
        }
        Ok(())
    }
}

/// Constant `lr0` up to `epochs/2`, then linear down to `lr0/100` at
/// `epochs`. Epochs are counted from 1.
pub fn lr_at(epoch: usize, epochs: usize, lr0: f64) -> Result<f64> {
    if epoch == 0 || epoch > epochs {
        return Err(Error::InvalidInput(format!("epoch {epoch} outside 1..={epochs}")));
    }
    let half = epochs as f64 / 2.0;
    let e = epoch as f64;
    if e <= half {
        return Ok(lr0);
    }
    let frac = (e - half) / (epochs as f64 - half);
    Ok(lr0 + (lr0 / 100.0 - lr0) * frac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub dev_si_sdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub speaker: usize,
    pub noisy_si_sdr: f64,
    pub si_sdr: f64,
    pub sdr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub utterances: usize,
    pub noisy_si_sdr: f64,
    pub si_sdr: f64,
    pub sdr: f64,
    /// Mean clipped SDR loss of the enhanced signals.
    pub loss: f64,
    /// Mean clipped SDR loss of the unprocessed mixtures.
    pub noisy_loss: f64,
}

impl TestSummary {
    pub fn from_metrics(rows: &[UtteranceMetrics], noisy_loss: f64) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&UtteranceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        TestSummary {
            utterances: rows.len(),
            noisy_si_sdr: mean(&|r| r.noisy_si_sdr),
            si_sdr: mean(&|r| r.si_sdr),
            sdr: mean(&|r| r.sdr),
            loss: mean(&|r| r.loss.total),
            noisy_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub protocol: Protocol,
    pub target_speaker: usize,
    /// Training speaker ids in class-index order.
    pub train_speakers: Vec<usize>,
    pub train_utterances: usize,
    pub parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_si_sdr: Option<f64>,
    pub test: Option<TestSummary>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,sdr_speech,sdr_noise,cross_entropy,dev_si_sdr\n");
        for r in &self.epochs {
            let dev = r.dev_si_sdr.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train.total, r.train.sdr_speech, r.train.sdr_noise, r.train.cross_entropy, dev
            ));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("train report", e))?;
        write_file(&dir.join("report.json"), &json)?;
        write_file(&dir.join("report.csv"), &self.to_csv())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Enhances every pair and scores it against its clean reference.
pub fn evaluate(model: &Model, pairs: &[&UtterancePair], loss: &LossConfig) -> Result<Vec<UtteranceMetrics>> {
    pairs
        .iter()
        .map(|p| {
            let y = model.enhance(&p.mixture)?.samples;
            Ok(UtteranceMetrics {
                id: p.id.clone(),
                speaker: p.speaker,
                noisy_si_sdr: si_sdr(&p.clean, &p.mixture)?,
                si_sdr: si_sdr(&p.clean, &y)?,
                sdr: sdr(&p.clean, &y)?,
                loss: multitask_loss(&p.clean, &y, &p.mixture, None, loss)?,
            })
        })
        .collect()
}

/// Scores of the unprocessed mixtures (identity enhancement).
pub fn evaluate_noisy(pairs: &[&UtterancePair], loss: &LossConfig) -> Result<Vec<UtteranceMetrics>> {
    pairs
        .iter()
        .map(|p| {
            let si = si_sdr(&p.clean, &p.mixture)?;
            Ok(UtteranceMetrics {
                id: p.id.clone(),
                speaker: p.speaker,
                noisy_si_sdr: si,
                si_sdr: si,
                sdr: sdr(&p.clean, &p.mixture)?,
                loss: multitask_loss(&p.clean, &p.mixture, &p.mixture, None, loss)?,
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[UtteranceMetrics]) -> String {
    let mut out = String::from("id,speaker,noisy_si_sdr,si_sdr,sdr,loss,sdr_speech,sdr_noise\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.id, r.speaker, r.noisy_si_sdr, r.si_sdr, r.sdr, r.loss.total, r.loss.sdr_speech, r.loss.sdr_noise
        ));
    }
    out
}

/// Corpus-level per-frequency statistics of the mixtures' log-amplitudes.
pub fn feature_stats(pairs: &[&UtterancePair], stft: &StftConfig) -> Result<NormStats> {
    let engine = StftEngine::new(*stft)?;
    let feats = pairs
        .iter()
        .map(|p| Ok(log_amplitude_features(&engine.analyze(&p.mixture)?)))
        .collect::<Result<Vec<Tensor>>>()?;
    NormStats::from_features(feats.iter())
}

/// One optimizer step on the mean loss of `batch`. Each item carries its
/// class label when the cross-entropy term applies.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[(&UtterancePair, Option<usize>)],
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let mut acc: Vec<Vec<f64>> = model.params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    let mut parts = Vec::with_capacity(batch.len());
    for (pair, label) in batch {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let (root, breakdown) = model.loss_on_tape(&mut tape, &p, &pair.clean, &pair.mixture, *label, loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss of utterance {} is {}", pair.id, breakdown.total)));
        }
        let grads = tape.backward(root)?;
        for (a, &v) in acc.iter_mut().zip(p.vars()) {
            for (x, g) in a.iter_mut().zip(grads.wrt(v).data()) {
                *x += g;
            }
        }
        parts.push(breakdown);
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = model
        .params
        .iter()
        .zip(acc)
        .map(|((_, _, t), g)| Tensor::new(t.shape(), g.into_iter().map(|v| v * scale).collect()))
        .collect::<Result<Vec<_>>>()?;
    adam_step(&mut model.params, &grads, adam)?;
    Ok(LossBreakdown::mean(&parts))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Resumable training state of one protocol arm.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: ExperimentConfig,
    split: ProtocolSplit,
    pub model: Model,
    adam: AdamState,
    records: Vec<EpochRecord>,
    best: Option<(usize, f64, ParamStore)>,
    /// Wall-clock seconds per epoch; kept out of the report.
    pub timings: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    adam_step: u64,
    adam_lr: f64,
    records: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_dev_si_sdr: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let split = protocol_split(&corpus.manifest, t.protocol, t.target_speaker)?;
        if corpus.pairs.len() != corpus.manifest.entries.len() {
            return Err(Error::Data("corpus signals and manifest entries are misaligned".into()));
        }
        let mut config = config.clone();
        config.model.use_spk = t.protocol.uses_spk();
        config.model.speakers = split.labels.len().max(2);
        let mut model = Model::new(config.model.clone(), config.stft, t.seed)?;
        let train_pairs: Vec<&UtterancePair> = split.train.iter().map(|&i| &corpus.pairs[i]).collect();
        model.stats = feature_stats(&train_pairs, &config.stft)?;
        let adam = AdamState::new(&model.params, t.adam, t.lr);
        Ok(Trainer {
            corpus,
            config,
            split,
            model,
            adam,
            records: Vec::new(),
            best: None,
            timings: Vec::new(),
        })
    }

    /// Restores the state written by [`Trainer::save_checkpoint`].
    pub fn resume(corpus: &'a Corpus, config: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let mut trainer = Trainer::new(corpus, config)?;
        let model = Model::load(dir)?;
        if model.config() != trainer.model.config() {
            return Err(Error::Data(format!("checkpoint in {} was written for a different model", dir.display())));
        }
        trainer.model = model;
        let path = dir.join("trainer.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text).map_err(|e| Error::json("trainer state", e))?;
        let moments = checkpoint::load_tensors(dir, "adam")?;
        let n = trainer.model.params.len();
        if moments.len() != 2 * n {
            return Err(Error::Data(format!("adam state holds {} tensors, expected {}", moments.len(), 2 * n)));
        }
        let (first, second) = moments.split_at(n);
        trainer.adam.first = first.iter().map(|(_, t)| t.data().to_vec()).collect();
        trainer.adam.second = second.iter().map(|(_, t)| t.data().to_vec()).collect();
        trainer.adam.step = state.adam_step;
        trainer.adam.lr = state.adam_lr;
        trainer.records = state.records;
        trainer.best = match (state.best_epoch, state.best_dev_si_sdr) {
            (Some(e), Some(v)) => Some((e, v, checkpoint::load_params(dir, "best")?)),
            _ => None,
        };
        Ok(trainer)
    }

    pub fn epochs_done(&self) -> usize {
        self.records.len()
    }

    pub fn split(&self) -> &ProtocolSplit {
        &self.split
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let names: Vec<String> = self.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut tensors = Vec::with_capacity(2 * names.len());
        for (kind, buffers) in [("first", &self.adam.first), ("second", &self.adam.second)] {
            for ((name, buf), (_, _, t)) in names.iter().zip(buffers).zip(self.model.params.iter()) {
                tensors.push((format!("{kind}.{name}"), Tensor::new(t.shape(), buf.clone())?));
            }
        }
        checkpoint::save_tensors(dir, "adam", tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        if let Some((_, _, params)) = &self.best {
            checkpoint::save_params(params, dir, "best")?;
        }
        let state = TrainerState {
            adam_step: self.adam.step,
            adam_lr: self.adam.lr,
            records: self.records.clone(),
            best_epoch: self.best.as_ref().map(|b| b.0),
            best_dev_si_sdr: self.best.as_ref().map(|b| b.1),
        };
        let json = serde_json::to_string_pretty(&state).map_err(|e| Error::json("trainer state", e))?;
        write_file(&dir.join("trainer.json"), &json)
    }

    fn label(&self, speaker: usize) -> Option<usize> {
        if self.config.model.use_spk {
            self.split.labels.get(&speaker).copied()
        } else {
            None
        }
    }

    /// Runs the next epoch.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let t = self.config.train.clone();
        let epoch = self.records.len() + 1;
        let lr = lr_at(epoch, t.epochs, t.lr)?;
        self.adam.lr = lr;
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(t.seed, epoch));

        let originals: Vec<&UtterancePair> = self.split.train.iter().map(|&i| &self.corpus.pairs[i]).collect();
        let pairs = augment_epoch(&originals, t.augment_prob, &mut rng)?;
        let frames: Vec<usize> = pairs.iter().map(|p| self.config.stft.frames(p.len())).collect();
        let batches = bucket_batches(&frames, t.batch_size, &mut rng)?;

        let mut parts = Vec::with_capacity(pairs.len());
        for (b, batch) in batches.iter().enumerate() {
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let speaker = pairs[i].speaker;
                let leaked = match t.protocol {
                    Protocol::Close => speaker != t.target_speaker,
                    Protocol::Open | Protocol::OpenSpk => speaker == t.target_speaker,
                };
                if leaked {
                    return Err(Error::Data(format!(
                        "epoch {epoch}, batch {b}: utterance {} of speaker {speaker} violates the {} protocol",
                        pairs[i].id,
                        t.protocol.label()
                    )));
                }
                items.push((&pairs[i], self.label(speaker)));
            }
            let loss = train_step(&mut self.model, &mut self.adam, &items, &self.config.loss).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            parts.extend(std::iter::repeat(loss).take(batch.len()));
        }

        let dev_si_sdr = if self.split.dev.is_empty() {
            None
        } else {
            let dev: Vec<&UtterancePair> = self.split.dev.iter().map(|&i| &self.corpus.pairs[i]).collect();
            let rows = evaluate(&self.model, &dev, &self.config.loss)?;
            Some(rows.iter().map(|r| r.si_sdr).sum::<f64>() / rows.len() as f64)
        };
        if let Some(v) = dev_si_sdr {
            if self.best.as_ref().map_or(true, |b| v > b.1) {
                self.best = Some((epoch, v, self.model.params.clone()));
            }
        }
        self.timings.push(start.elapsed().as_secs_f64());
        self.records.push(EpochRecord {
            epoch,
            lr,
            train: LossBreakdown::mean(&parts),
            dev_si_sdr,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs epochs up to `until` (capped at the configured count),
    /// checkpointing into `out_dir/checkpoint` and `out_dir/best`.
    pub fn run_until(&mut self, until: usize, out_dir: Option<&Path>) -> Result<()> {
        let until = until.min(self.config.train.epochs);
        while self.records.len() < until {
            let prev_best = self.best.as_ref().map(|b| b.0);
            self.run_epoch()?;
            let epoch = self.records.len();
            if let Some(dir) = out_dir {
                let every = self.config.train.checkpoint_every;
                if (every > 0 && epoch % every == 0) || epoch == until {
                    self.save_checkpoint(&dir.join("checkpoint"))?;
                }
                if self.best.as_ref().map(|b| b.0) != prev_best {
                    self.best_model()?.save(&dir.join("best"))?;
                }
            }
        }
        Ok(())
    }

    /// The model with the best dev SI-SDR so far (the current one if no
    /// dev data exists).
    pub fn best_model(&self) -> Result<Model> {
        let mut model = self.model.clone();
        if let Some((_, _, params)) = &self.best {
            model.replace_params(params.clone())?;
        }
        Ok(model)
    }

    /// Scores the selected model on the target speaker's test set.
    pub fn finish(&self) -> Result<TrainOutcome> {
        let model = self.best_model()?;
        let test: Vec<&UtterancePair> = self.split.test.iter().map(|&i| &self.corpus.pairs[i]).collect();
        let metrics = evaluate(&model, &test, &self.config.loss)?;
        let noisy = evaluate_noisy(&test, &self.config.loss)?;
        let noisy_loss = noisy.iter().map(|r| r.loss.total).sum::<f64>() / noisy.len() as f64;
        let report = TrainReport {
            config: self.config.clone(),
            protocol: self.config.train.protocol,
            target_speaker: self.config.train.target_speaker,
            train_speakers: self.split.train_speakers(),
            train_utterances: self.split.train.len(),
            parameters: model.params.numel(),
            epochs: self.records.clone(),
            best_epoch: self.best.as_ref().map_or(self.records.len(), |b| b.0),
            best_dev_si_sdr: self.best.as_ref().map(|b| b.1),
            test: Some(TestSummary::from_metrics(&metrics, noisy_loss)),
        };
        Ok(TrainOutcome {
            model,
            report,
            metrics,
            timings: self.timings.clone(),
        })
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub metrics: Vec<UtteranceMetrics>,
    pub timings: Vec<f64>,
}

impl TrainOutcome {
    /// Writes the report, per-utterance test metrics and epoch timings.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.report.write(dir)?;
        write_file(&dir.join("test_metrics.csv"), &metrics_csv(&self.metrics))?;
        let mut timings = String::from("epoch,seconds\n");
        for (i, s) in self.timings.iter().enumerate() {
            timings.push_str(&format!("{},{s:.3}\n", i + 1));
        }
        write_file(&dir.join("timings.csv"), &timings)
    }
}

/// Trains one protocol arm from scratch; with `out_dir` set, checkpoints
/// and reports are written there.
pub fn train(corpus: &Corpus, config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, config)?;
    trainer.run_until(config.train.epochs, out_dir)?;
    let outcome = trainer.finish()?;
    if let Some(dir) = out_dir {
        outcome.write(dir)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRow {
    pub method: String,
    pub si_sdr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationTable {
    pub rows: Vec<VerificationRow>,
}

impl VerificationTable {
    pub const HEADER: &'static str = "Method,SI-SDR,Loss";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{:.4},{:.4}\n", r.method, r.si_sdr, r.loss));
        }
        out
    }

    pub fn row(&self, method: &str) -> Option<&VerificationRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Trains Close, Open and Open+SPK with identical seeds and budgets and
/// scores all of them on the target speaker's test set.
pub fn run_verification_experiment(
    corpus: &Corpus,
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<(VerificationTable, BTreeMap<String, TrainReport>)> {
    let target = config.train.target_speaker;
    let speakers = corpus.manifest.speakers();
    if speakers.len() < 3 {
        return Err(Error::Data(format!("the protocol comparison needs ≥ 3 speakers, corpus has {}", speakers.len())));
    }
    let split = protocol_split(&corpus.manifest, Protocol::Close, target)?;
    let test: Vec<&UtterancePair> = split.test.iter().map(|&i| &corpus.pairs[i]).collect();
    let noisy = evaluate_noisy(&test, &config.loss)?;
    let n = noisy.len() as f64;
    let mut rows = vec![VerificationRow {
        method: "Noisy".into(),
        si_sdr: noisy.iter().map(|r| r.si_sdr).sum::<f64>() / n,
        loss: noisy.iter().map(|r| r.loss.total).sum::<f64>() / n,
    }];
    let mut reports = BTreeMap::new();
    for protocol in Protocol::ALL {
        let mut arm = config.clone();
        arm.train.protocol = protocol;
        let dir = out_dir.map(|d| d.join(protocol.label().to_ascii_lowercase()));
        let outcome = train(corpus, &arm, dir.as_deref())?;
        let summary = outcome.report.test.clone().expect("finish always scores the test set");
        rows.push(VerificationRow {
            method: protocol.label().into(),
            si_sdr: summary.si_sdr,
            loss: summary.loss,
        });
        reports.insert(protocol.label().to_string(), outcome.report);
    }
    let table = VerificationTable { rows };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("verification.csv"), &table.to_csv())?;
    }
    Ok((table, reports))
}
