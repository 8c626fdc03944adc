//! Batch construction, the two-stage adversarial schedule, checkpointing
//! and chunked inference.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{load_canonical, random_chunk, Waveform, CHUNK_LEN};
use crate::distortions::{compose_random, AppliedDistortions, DistortionConfig};
use crate::error::{Error, Result};
use crate::features::{extract_acoustic_features, AcousticMatrix, Stft, COL_LOG_F0, N_ACOUSTIC};
use crate::losses::{self, DTerms, GTerms, PowerLossConfig, TARGETS};
use crate::metrics::list_wavs;
use crate::par;
use crate::rng;
use crate::segan::{bind, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::tensor_nn::{Adam, AdamConfig, Checkpoint, CheckpointWriter, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "SEGAN")]
    Segan,
    #[serde(rename = "SEGAN-Aco")]
    SeganAco,
    #[serde(rename = "SEGAN-PTAco")]
    SeganPtAco,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SEGAN" => Ok(Preset::Segan),
            "SEGAN-Aco" => Ok(Preset::SeganAco),
            "SEGAN-PTAco" => Ok(Preset::SeganPtAco),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected SEGAN, SEGAN-Aco or SEGAN-PTAco)"
            ))),
        }
    }
}

/// Which objective an epoch optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Adversarial losses only.
    Baseline,
    /// Adversarial plus acoustic regression and power losses.
    Acoustic,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Baseline => 1,
            Stage::Acoustic => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub preset: Preset,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr_d_stage1: f64,
    pub lr_g_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
}

impl TrainSchedule {
    /// Full-scale schedule of a preset.
    pub fn preset(preset: Preset) -> Self {
        let (s1, s2) = match preset {
            Preset::Segan => (400, 0),
            Preset::SeganAco => (0, 400),
            Preset::SeganPtAco => (100, 300),
        };
        Self {
            preset,
            stage1_epochs: s1,
            stage2_epochs: s2,
            lr_d_stage1: 4e-4,
            lr_g_stage1: 1e-4,
            lr_stage2: 5e-5,
            batch_size: 150,
        }
    }

    /// Desk-scale schedule: 60 epochs in the preset's proportions, batch 16.
    pub fn smoke(preset: Preset) -> Self {
        let (s1, s2) = match preset {
            Preset::Segan => (60, 0),
            Preset::SeganAco => (0, 60),
            Preset::SeganPtAco => (20, 40),
        };
        Self {
            stage1_epochs: s1,
            stage2_epochs: s2,
            batch_size: 16,
            ..Self::preset(preset)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Stage of 1-based `epoch`.
    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch <= self.stage1_epochs {
            Stage::Baseline
        } else {
            Stage::Acoustic
        }
    }

    /// `(lr_d, lr_g)` for `stage`.
    pub fn learning_rates(&self, stage: Stage) -> (f64, f64) {
        match stage {
            Stage::Baseline => (self.lr_d_stage1, self.lr_g_stage1),
            Stage::Acoustic => (self.lr_stage2, self.lr_stage2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} leaves no unaligned pairing (need at least 2)",
                self.batch_size
            )));
        }
        if self.total_epochs() == 0 {
            return Err(Error::Config("schedule has no epochs".into()));
        }
        for lr in [self.lr_d_stage1, self.lr_g_stage1, self.lr_stage2] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub distortion: DistortionConfig,
    pub power_loss: PowerLossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(schedule: TrainSchedule, width_scale: f64, seed: u64) -> Self {
        Self {
            schedule,
            generator: GeneratorConfig::scaled(width_scale),
            discriminator: DiscriminatorConfig::scaled(width_scale),
            distortion: DistortionConfig::default(),
            power_loss: PowerLossConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.distortion.validate()?;
        self.power_loss.validate()?;
        if self.discriminator.input_len != CHUNK_LEN {
            return Err(Error::Config(format!(
                "discriminator input length {} differs from the chunk length {CHUNK_LEN}",
                self.discriminator.input_len
            )));
        }
        if CHUNK_LEN % self.generator.length_quantum() != 0 {
            return Err(Error::Config("chunk length is not a multiple of the generator's decimation".into()));
        }
        Ok(())
    }
}

/// Clean utterances at the canonical rate.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub names: Vec<String>,
    pub utterances: Vec<Waveform>,
}

impl Corpus {
    pub fn new(items: Vec<(String, Waveform)>) -> Self {
        let (names, utterances) = items.into_iter().unzip();
        Self { names, utterances }
    }

    /// Every `*.wav` of `dir`, sorted by name and resampled to 16 kHz.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let files = list_wavs(dir.as_ref())?;
        let items: Vec<(String, PathBuf)> = files.into_iter().collect();
        let loaded = par::map(&items, |(name, path)| load_canonical(path).map(|w| (name.clone(), w)));
        Ok(Self::new(loaded.into_iter().collect::<Result<_>>()?))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// One minibatch. Tensors are `[B, 1, CHUNK_LEN]`.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub clean: Tensor,
    pub distorted: Tensor,
    /// `distorted` reordered by `derangement`: conditioning from another item.
    pub unaligned: Tensor,
    pub derangement: Vec<usize>,
    /// Acoustic features of the clean chunks, when requested.
    pub theta: Option<Vec<AcousticMatrix>>,
    pub manifest: Vec<AppliedDistortions>,
    pub utterances: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.derangement.len()
    }

    pub fn is_empty(&self) -> bool {
        self.derangement.is_empty()
    }

    fn item(t: &Tensor, i: usize) -> &[f64] {
        let l = t.dim(2);
        &t.data()[i * l..(i + 1) * l]
    }
}

/// Uniform random cyclic permutation (Sattolo); no fixed points for `n >= 2`.
pub fn derangement(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn stack(items: &[Vec<f64>]) -> Tensor {
    let l = items.first().map_or(0, Vec::len);
    Tensor::new(vec![items.len(), 1, l], items.concat())
}

/// Assemble a batch from the given utterances: a random chunk of each, an
/// online random distortion of that chunk, and an in-batch derangement for
/// the unaligned conditioning. Deterministic in `seed`.
pub fn make_batch(
    corpus: &Corpus,
    utterances: &[usize],
    cfg: &DistortionConfig,
    with_features: bool,
    seed: u64,
) -> Result<TrainingBatch> {
    if corpus.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    if utterances.len() < 2 {
        return Err(Error::Data("a batch needs at least two items".into()));
    }
    let items = par::map_range(utterances.len(), |i| {
        let mut r = rng::stream(seed, "batch-item", &[i as u64]);
        let clean = random_chunk(&corpus.utterances[utterances[i]], CHUNK_LEN, &mut r);
        let (distorted, applied) = compose_random(&clean, cfg, &mut r);
        let theta = with_features.then(|| extract_acoustic_features(&clean));
        (clean.to_f64(), distorted.to_f64(), applied, theta)
    });
    let perm = derangement(utterances.len(), &mut rng::stream(seed, "derangement", &[]));
    let clean: Vec<Vec<f64>> = items.iter().map(|t| t.0.clone()).collect();
    let distorted: Vec<Vec<f64>> = items.iter().map(|t| t.1.clone()).collect();
    let unaligned: Vec<Vec<f64>> = perm.iter().map(|&j| distorted[j].clone()).collect();
    let mut manifest = Vec::new();
    let mut theta = Vec::new();
    for (_, _, m, th) in items {
        manifest.push(m);
        theta.extend(th);
    }
    Ok(TrainingBatch {
        clean: stack(&clean),
        distorted: stack(&distorted),
        unaligned: stack(&unaligned),
        derangement: perm,
        theta: with_features.then_some(theta),
        manifest,
        utterances: utterances.to_vec(),
    })
}

/// Per-column standardization of the acoustic targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ThetaStats {
    /// Column means and deviations; log-F0 uses voiced frames only.
    /// Deviations below 1e-6 are replaced by 1.
    pub fn compute(features: &[AcousticMatrix]) -> Self {
        let mut sum = vec![0.0; N_ACOUSTIC];
        let mut sq = vec![0.0; N_ACOUSTIC];
        let mut count = vec![0usize; N_ACOUSTIC];
        for f in features {
            for t in 0..f.n_frames {
                let voiced = f.voiced(t);
                for (c, &v) in f.row(t).iter().enumerate() {
                    if c == COL_LOG_F0 && !voiced {
                        continue;
                    }
                    sum[c] += v;
                    sq[c] += v * v;
                    count[c] += 1;
                }
            }
        }
        let mut mean = vec![0.0; N_ACOUSTIC];
        let mut std = vec![1.0; N_ACOUSTIC];
        for c in 0..N_ACOUSTIC {
            if count[c] == 0 {
                continue;
            }
            let n = count[c] as f64;
            mean[c] = sum[c] / n;
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            if var.sqrt() >= 1e-6 {
                std[c] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn standardize(&self, f: &AcousticMatrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(f.n_frames * N_ACOUSTIC);
        for t in 0..f.n_frames {
            out.extend(
                f.row(t)
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (v - self.mean[c]) / self.std[c]),
            );
        }
        out
    }
}

/// Seeds of the stochastic parts of one update.
#[derive(Debug, Clone, Copy)]
pub struct StepSeeds {
    pub z: u64,
    pub shuffle: u64,
}

impl StepSeeds {
    pub fn derive(seed: u64, label: &str, epoch: usize, batch: usize) -> Self {
        Self {
            z: rng::derive_seed(seed, &format!("{label}-z"), &[epoch as u64, batch as u64]),
            shuffle: rng::derive_seed(seed, &format!("{label}-shuffle"), &[epoch as u64, batch as u64]),
        }
    }
}

/// One record of the line-delimited training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub batch: usize,
    pub stage: u8,
    pub lr_d: f64,
    pub lr_g: f64,
    pub d: DTerms,
    pub g: GTerms,
}

fn grads_for(store: &ParamStore, vars: &[Var], g: &Graph, loss: Var) -> Vec<(crate::tensor_nn::ParamId, Option<Tensor>)> {
    let mut grads = g.backward(loss);
    store.ids().map(|id| (id, grads.take(vars[id.0]))).collect()
}

/// Generator, discriminator and their optimizers.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub theta_stats: Option<ThetaStats>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed batches.
    pub step: u64,
    stft: Arc<Stft>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(cfg.generator.clone(), &mut rng::stream(cfg.seed, "init-g", &[]))?;
        let disc = Discriminator::new(cfg.discriminator.clone(), &mut rng::stream(cfg.seed, "init-d", &[]))?;
        let first = cfg.schedule.stage(1);
        let (lr_d, lr_g) = cfg.schedule.learning_rates(first);
        let opt_g = Adam::new(AdamConfig::with_lr(lr_g), &gen.params);
        let opt_d = Adam::new(AdamConfig::with_lr(lr_d), &disc.params);
        let stft = Arc::new(Stft::new(cfg.power_loss.stft_config())?);
        Ok(Self {
            cfg,
            gen,
            disc,
            opt_g,
            opt_d,
            theta_stats: None,
            epoch: 0,
            step: 0,
            stft,
        })
    }

    /// Enhanced chunks `G(z, distorted)` without gradients.
    pub fn generate(&self, distorted: &Tensor, z_seed: u64) -> Result<Tensor> {
        let z = self.gen.sample_z(distorted.dim(0), distorted.dim(2), &mut rng::from_seed(z_seed));
        self.gen.infer(distorted.clone(), z)
    }

    fn acoustic_target(&self, batch: &TrainingBatch) -> Result<(Arc<Tensor>, Vec<bool>)> {
        let theta = batch
            .theta
            .as_ref()
            .ok_or_else(|| Error::Data("acoustic stage needs batch features".into()))?;
        let stats = self
            .theta_stats
            .as_ref()
            .ok_or_else(|| Error::Data("acoustic targets are not standardized yet".into()))?;
        let frames = theta[0].n_frames;
        let mut data = Vec::with_capacity(theta.len() * frames * N_ACOUSTIC);
        let mut voiced = Vec::with_capacity(theta.len() * frames);
        for f in theta {
            data.extend(stats.standardize(f));
            voiced.extend((0..f.n_frames).map(|t| f.voiced(t)));
        }
        Ok((Arc::new(Tensor::new(vec![theta.len(), frames, N_ACOUSTIC], data)), voiced))
    }

    fn d_graph(&self, g: &mut Graph, batch: &TrainingBatch, fake: &Tensor, stage: Stage, shuffle_seed: u64) -> Result<(Var, Vec<Var>, DTerms)> {
        let p = bind(&self.disc.params, g, true);
        let mut r = rng::from_seed(shuffle_seed);
        let clean = g.constant(batch.clean.clone());
        let cond = g.constant(batch.distorted.clone());
        let unaligned = g.constant(batch.unaligned.clone());
        let fake = g.constant(fake.clone());
        let real_out = self.disc.forward(g, &p, clean, cond, &mut r)?;
        let fake_out = self.disc.forward(g, &p, fake, cond, &mut r)?;
        let unal_out = self.disc.forward(g, &p, clean, unaligned, &mut r)?;
        let real = losses::score_term(g, real_out.score, TARGETS.b)?;
        let fk = losses::score_term(g, fake_out.score, TARGETS.a)?;
        let un = losses::score_term(g, unal_out.score, TARGETS.a)?;
        let mut terms = DTerms {
            real: g.value(real).item(),
            fake: g.value(fk).item(),
            unaligned: g.value(un).item(),
            ..DTerms::default()
        };
        let loss = match stage {
            Stage::Baseline => g.weighted_sum(&[(real, 1.0 / 3.0), (fk, 1.0 / 3.0), (un, 1.0 / 3.0)])?,
            Stage::Acoustic => {
                let (target, voiced) = self.acoustic_target(batch)?;
                let aco = losses::acoustic_term(g, real_out.acoustic, target, &voiced)?;
                terms.acoustic = g.value(aco).item();
                g.weighted_sum(&[(real, 0.25), (aco, 0.25), (fk, 0.25), (un, 0.25)])?
            }
        };
        terms.total = g.value(loss).item();
        Ok((loss, p, terms))
    }

    /// Discriminator loss terms for a given fake batch, without updating.
    pub fn d_loss(&self, batch: &TrainingBatch, fake: &Tensor, stage: Stage, shuffle_seed: u64) -> Result<DTerms> {
        let mut g = Graph::new();
        Ok(self.d_graph(&mut g, batch, fake, stage, shuffle_seed)?.2)
    }

    /// One discriminator update: advance spectral-norm power iteration, score
    /// real, fake (detached) and unaligned pairs, step D only. Returns the
    /// loss terms before the update.
    pub fn d_step(&mut self, batch: &TrainingBatch, stage: Stage, seeds: StepSeeds) -> Result<DTerms> {
        let fake = self.generate(&batch.distorted, seeds.z)?;
        self.d_step_with_fake(batch, &fake, stage, seeds.shuffle)
    }

    pub fn d_step_with_fake(&mut self, batch: &TrainingBatch, fake: &Tensor, stage: Stage, shuffle_seed: u64) -> Result<DTerms> {
        self.disc.params.power_iterate_all(1);
        let mut g = Graph::new().with_finite_check();
        let (loss, p, terms) = self.d_graph(&mut g, batch, fake, stage, shuffle_seed)?;
        let grads = grads_for(&self.disc.params, &p, &g, loss);
        drop(g);
        self.opt_d.step(&mut self.disc.params, &grads);
        Ok(terms)
    }

    fn g_graph(&self, g: &mut Graph, batch: &TrainingBatch, stage: Stage, seeds: StepSeeds) -> Result<(Var, Vec<Var>, GTerms)> {
        let gp = bind(&self.gen.params, g, true);
        let dp = bind(&self.disc.params, g, false);
        let z = self.gen.sample_z(batch.len(), batch.distorted.dim(2), &mut rng::from_seed(seeds.z));
        let z = g.constant(z);
        let cond = g.constant(batch.distorted.clone());
        let fake = self.gen.forward(g, &gp, cond, z)?;
        let out = self.disc.forward(g, &dp, fake, cond, &mut rng::from_seed(seeds.shuffle))?;
        let adv = losses::score_term(g, out.score, TARGETS.c)?;
        let mut terms = GTerms {
            adversarial: g.value(adv).item(),
            ..GTerms::default()
        };
        let loss = match stage {
            Stage::Baseline => adv,
            Stage::Acoustic => {
                let (target, voiced) = self.acoustic_target(batch)?;
                let aco = losses::acoustic_term(g, out.acoustic, target, &voiced)?;
                let clean: Vec<Vec<f64>> = (0..batch.len())
                    .map(|i| TrainingBatch::item(&batch.clean, i).to_vec())
                    .collect();
                let targets = par::map(&clean, |x| self.stft.magnitude_db(x).magnitude_db);
                let pow = g.power_loss(fake, self.stft.clone(), &targets, self.cfg.power_loss.alpha)?;
                terms.acoustic = g.value(aco).item();
                terms.power = g.value(pow).item();
                g.weighted_sum(&[(adv, 0.5), (aco, 0.5), (pow, 1.0)])?
            }
        };
        terms.total = g.value(loss).item();
        Ok((loss, gp, terms))
    }

    /// Generator loss terms without updating.
    pub fn g_loss(&self, batch: &TrainingBatch, stage: Stage, seeds: StepSeeds) -> Result<GTerms> {
        let mut g = Graph::new();
        Ok(self.g_graph(&mut g, batch, stage, seeds)?.2)
    }

    /// One generator update with fresh noise; D is frozen.
    pub fn g_step(&mut self, batch: &TrainingBatch, stage: Stage, seeds: StepSeeds) -> Result<GTerms> {
        let mut g = Graph::new().with_finite_check();
        let (loss, p, terms) = self.g_graph(&mut g, batch, stage, seeds)?;
        let grads = grads_for(&self.gen.params, &p, &g, loss);
        drop(g);
        self.opt_g.step(&mut self.gen.params, &grads);
        Ok(terms)
    }

    /// Utterance indices of every batch of 1-based `epoch`: a seeded
    /// permutation cut into `ceil(N / B)` batches, the last one wrapping.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let b = self.cfg.schedule.batch_size;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(self.cfg.seed, "epoch-order", &[epoch as u64]));
        (0..n.div_ceil(b))
            .map(|k| (0..b).map(|i| perm[(k * b + i) % n]).collect())
            .collect()
    }

    fn batch_seed(&self, epoch: usize, k: usize) -> u64 {
        rng::derive_seed(self.cfg.seed, "batch", &[epoch as u64, k as u64])
    }

    /// Fit the target standardization on the clean chunks of `epoch`.
    fn fit_theta_stats(&mut self, corpus: &Corpus, epoch: usize) -> Result<()> {
        let mut feats = Vec::new();
        for (k, idx) in self.epoch_batches(corpus.len(), epoch).iter().enumerate() {
            let batch = make_batch(corpus, idx, &self.cfg.distortion, true, self.batch_seed(epoch, k))?;
            feats.extend(batch.theta.unwrap());
        }
        self.theta_stats = Some(ThetaStats::compute(&feats));
        Ok(())
    }

    /// Run the next epoch, appending one record per batch to `log`.
    pub fn run_epoch(&mut self, corpus: &Corpus, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        if corpus.len() < 2 {
            return Err(Error::Data(format!("training needs at least 2 utterances, got {}", corpus.len())));
        }
        let epoch = self.epoch + 1;
        let stage = self.cfg.schedule.stage(epoch);
        let (lr_d, lr_g) = self.cfg.schedule.learning_rates(stage);
        self.opt_d.set_lr(lr_d);
        self.opt_g.set_lr(lr_g);
        if stage == Stage::Acoustic && self.theta_stats.is_none() {
            self.fit_theta_stats(corpus, epoch)?;
        }
        let mut records = Vec::new();
        for (k, idx) in self.epoch_batches(corpus.len(), epoch).iter().enumerate() {
            let batch = make_batch(corpus, idx, &self.cfg.distortion, stage == Stage::Acoustic, self.batch_seed(epoch, k))?;
            let d = self.d_step(&batch, stage, StepSeeds::derive(self.cfg.seed, "d", epoch, k))?;
            let g = self.g_step(&batch, stage, StepSeeds::derive(self.cfg.seed, "g", epoch, k))?;
            self.step += 1;
            let rec = StepRecord {
                epoch,
                step: self.step,
                batch: k + 1,
                stage: stage.number(),
                lr_d,
                lr_g,
                d,
                g,
            };
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
            records.push(rec);
        }
        log.flush()?;
        self.epoch = epoch;
        Ok(records)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut w = CheckpointWriter::new();
        for (prefix, store, opt) in [("g", &self.gen.params, &self.opt_g), ("d", &self.disc.params, &self.opt_d)] {
            let mut steps = Vec::new();
            for (id, p) in store.iter() {
                w.add_f32(&p.name, &p.value);
                let slot = &opt.slots[id.0];
                w.add_f64(&format!("adam.{}.m", p.name), p.value.shape(), &slot.m);
                w.add_f64(&format!("adam.{}.v", p.name), p.value.shape(), &slot.v);
                steps.push(slot.step);
                if let Some(s) = &p.spectral {
                    w.add_f64(&format!("sn.{}.u", p.name), &[s.u.len()], &s.u);
                    w.add_f64(&format!("sn.{}.v", p.name), &[s.v.len()], &s.v);
                }
            }
            w.set_meta(&format!("adam_steps_{prefix}"), steps)?;
            w.set_meta(&format!("lr_{prefix}"), opt.config.lr)?;
        }
        if let Some(s) = &self.theta_stats {
            w.add_f64("theta.mean", &[N_ACOUSTIC], &s.mean);
            w.add_f64("theta.std", &[N_ACOUSTIC], &s.std);
        }
        w.set_meta("config", &self.cfg)?;
        w.set_meta("epoch", self.epoch)?;
        w.set_meta("step", self.step)?;
        w.write(dir)
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let cfg: TrainConfig = ck.meta("config")?;
        let mut t = Self::new(cfg)?;
        t.epoch = ck.meta("epoch")?;
        t.step = ck.meta("step")?;
        for prefix in ["g", "d"] {
            let steps: Vec<u64> = ck.meta(&format!("adam_steps_{prefix}"))?;
            let lr: f64 = ck.meta(&format!("lr_{prefix}"))?;
            let (store, opt) = match prefix {
                "g" => (&mut t.gen.params, &mut t.opt_g),
                _ => (&mut t.disc.params, &mut t.opt_d),
            };
            if steps.len() != store.len() {
                return Err(Error::Integrity(format!("optimizer state for {prefix} does not match the model")));
            }
            opt.set_lr(lr);
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let name = store.get(id).name.clone();
                store
                    .set_value(id, ck.tensor(&name)?)
                    .map_err(|e| Error::Integrity(e.to_string()))?;
                let slot = &mut opt.slots[id.0];
                slot.m = ck.tensor(&format!("adam.{name}.m"))?.into_data();
                slot.v = ck.tensor(&format!("adam.{name}.v"))?.into_data();
                slot.step = steps[id.0];
                if let Some(s) = &mut store.get_mut(id).spectral {
                    s.u = ck.tensor(&format!("sn.{name}.u"))?.into_data();
                    s.v = ck.tensor(&format!("sn.{name}.v"))?.into_data();
                }
            }
        }
        if ck.contains("theta.mean") {
            t.theta_stats = Some(ThetaStats {
                mean: ck.tensor("theta.mean")?.into_data(),
                std: ck.tensor("theta.std")?.into_data(),
            });
        }
        Ok(t)
    }
}

/// SHA-256 over every parameter value (as stored in checkpoints).
pub fn param_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        h.update(p.name.as_bytes());
        for &v in p.value.data() {
            h.update((v as f32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory name of the checkpoint written after `epoch`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}")
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (before the schedule ends).
    pub stop_after: Option<usize>,
    /// Keep only the newest `n` epoch checkpoints.
    pub keep_checkpoints: Option<usize>,
}

/// Train on `corpus`, writing `train_log.jsonl` and one checkpoint per epoch
/// under `out_dir`. Returns the last checkpoint directory.
pub fn train(corpus: &Corpus, cfg: TrainConfig, out_dir: impl AsRef<Path>, opts: &TrainOptions) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    if corpus.len() < 2 {
        return Err(Error::Data(format!("training needs at least 2 utterances, got {}", corpus.len())));
    }
    let mut trainer = match &opts.resume {
        Some(dir) => {
            let t = Trainer::load(dir)?;
            if t.cfg != cfg {
                return Err(Error::Config("checkpoint was trained with a different configuration".into()));
            }
            t
        }
        None => Trainer::new(cfg)?,
    };
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);
    let total = trainer.cfg.schedule.total_epochs();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut last = opts.resume.clone().unwrap_or_else(|| out_dir.to_path_buf());
    while trainer.epoch < stop {
        trainer.run_epoch(corpus, &mut log)?;
        last = out_dir.join(checkpoint_name(trainer.epoch));
        trainer.save(&last)?;
        if let Some(keep) = opts.keep_checkpoints {
            if trainer.epoch > keep {
                let old = out_dir.join(checkpoint_name(trainer.epoch - keep));
                if old.is_dir() {
                    fs::remove_dir_all(old)?;
                }
            }
        }
    }
    Ok(last)
}

/// Cross-fade weight of sample `n` in a window of `len`.
pub fn crossfade_weight(n: usize, len: usize) -> f64 {
    let half = len as f64 / 2.0;
    1.0 - ((n as f64 + 0.5) - half).abs() / half
}

/// Start offsets of the 50%-overlapping windows covering `len` samples.
pub fn window_starts(len: usize, window: usize) -> Vec<usize> {
    let hop = window / 2;
    let mut starts = vec![0];
    while starts.last().unwrap() + window < len {
        starts.push(starts.last().unwrap() + hop);
    }
    starts
}

/// Overlap-add `frames` (one per window start) with triangular cross-fades,
/// normalized by the summed weights.
pub fn overlap_add(frames: &[Vec<f64>], starts: &[usize], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let mut norm = vec![0.0; len];
    for (f, &s) in frames.iter().zip(starts) {
        for (n, &v) in f.iter().enumerate() {
            if s + n >= len {
                break;
            }
            let w = crossfade_weight(n, f.len());
            acc[s + n] += w * v;
            norm[s + n] += w;
        }
    }
    acc.iter().zip(&norm).map(|(a, w)| if *w > 0.0 { a / w } else { 0.0 }).collect()
}

/// Windows per generator call during inference.
const ENHANCE_BATCH: usize = 8;

/// Enhance a whole utterance: 16384-sample windows with 50% overlap (zero
/// padded at the end), each passed through G, then cross-faded.
pub fn enhance(gen: &Generator, w: &Waveform, seed: u64) -> Result<Waveform> {
    if w.is_empty() {
        return Ok(w.clone());
    }
    let x = w.to_f64();
    let starts = window_starts(x.len(), CHUNK_LEN);
    let windows: Vec<Vec<f64>> = starts
        .iter()
        .map(|&s| {
            let mut v = x[s..(s + CHUNK_LEN).min(x.len())].to_vec();
            v.resize(CHUNK_LEN, 0.0);
            v
        })
        .collect();
    let mut r = rng::stream(seed, "enhance", &[]);
    let mut frames = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(ENHANCE_BATCH) {
        let z = gen.sample_z(chunk.len(), CHUNK_LEN, &mut r);
        let y = gen.infer(stack(chunk), z)?;
        frames.extend(y.data().chunks(CHUNK_LEN).map(<[f64]>::to_vec));
    }
    let y = overlap_add(&frames, &starts, x.len());
    Ok(Waveform::new(y.iter().map(|&v| v as f32).collect(), w.sample_rate))
}

/// Restore only the generator from a checkpoint.
pub fn load_generator(dir: impl AsRef<Path>) -> Result<Generator> {
    let ck = Checkpoint::load(dir)?;
    let cfg: TrainConfig = ck.meta("config")?;
    let mut gen = Generator::new(cfg.generator, &mut rng::stream(cfg.seed, "init-g", &[]))?;
    let ids: Vec<_> = gen.params.ids().collect();
    for id in ids {
        let name = gen.params.get(id).name.clone();
        gen.params
            .set_value(id, ck.tensor(&name)?)
            .map_err(|e| Error::Integrity(e.to_string()))?;
    }
    Ok(gen)
}
