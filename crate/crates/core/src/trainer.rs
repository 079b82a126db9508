//! Alternating adversarial optimization.
//!
//! Each step updates the discriminator on fresh fakes, then the generator,
//! then the EMA copy of the generator. All randomness (noise and LabelMix
//! coins) comes from one seeded stream owned by the trainer, so a run is a
//! pure function of its seed and data.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    encode_labels, sample_noise_batch, DatasetIndex, LabelMap, Sample,
};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{contract, Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{
    adaptive_perceptual_loss, class_weights, d_adversarial_loss, depth_l1_loss, g_adversarial_loss,
    labelmix, labelmix_consistency_from_logits, labelmix_mask, stack_masks, ClassWeights, LossParts,
    LossWeights,
};
use crate::nn::{scalar, Mode};
use crate::optim::{ema_update, Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: (f64, f64),
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 2e-4,
            betas: (0.0, 0.999),
            ema_decay: 0.9999,
            batch_size: 8,
            max_steps: 100_000,
            seed: 0,
            ckpt_every: 5_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "train.ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("train.betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeightMode {
    /// Estimated on each batch.
    #[default]
    Batch,
    /// Precomputed once over the whole training split.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_adv: f64,
    pub w_ap: f64,
    pub w_depth: f64,
    pub w_lm: f64,
    /// Let the perceptual term also update the discriminator.
    pub ap_updates_disc: bool,
    pub class_weights: ClassWeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_ap: 1.0,
            w_depth: 1.0,
            w_lm: 1.0,
            ap_updates_disc: false,
            class_weights: ClassWeightMode::Batch,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            adv: self.w_adv,
            ap: self.w_ap,
            depth: self.w_depth,
            lm: self.w_lm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Everything needed to rebuild a trainer; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub max_depth_m: f32,
    pub precision: Precision,
}

impl TrainerConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            generator: GeneratorConfig::new(num_classes),
            discriminator: DiscriminatorConfig::new(num_classes),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            max_depth_m: 10.0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.generator.num_classes != self.discriminator.num_classes {
            return Err(Error::Config(
                "generator and discriminator disagree on the number of classes".into(),
            ));
        }
        if self.max_depth_m <= 0.0 {
            return Err(Error::Config("data.max_depth_m must be positive".into()));
        }
        Ok(())
    }
}

/// A collated batch on the training device.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labels: Vec<LabelMap>,
    pub onehot: Tensor,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub depth_valid: Tensor,
}

impl Batch {
    pub fn new(samples: &[Sample], dtype: DType, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            contract!("empty batch");
        }
        let labels: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
        let stack = |f: &dyn Fn(&Sample) -> Result<Tensor>| -> Result<Tensor> {
            let parts = samples.iter().map(f).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&parts, 0)?)
        };
        Ok(Self {
            onehot: encode_labels(&labels, dtype, device)?,
            rgb: stack(&|s| s.rgb.to_tensor(dtype, device))?,
            depth: stack(&|s| s.depth.to_tensor(dtype, device))?,
            depth_valid: stack(&|s| s.depth.validity_tensor(dtype, device))?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub g_adv: f64,
    pub ap: f64,
    pub depth: f64,
    pub d_adv: f64,
    pub lm: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    /// The batch had no valid depth pixel.
    pub depth_empty: bool,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,g_adv,ap,depth,d_adv,lm,loss_g,loss_d";

    pub fn parts(&self) -> LossParts {
        LossParts {
            g_adv: self.g_adv,
            ap: self.ap,
            depth: self.depth,
            d_adv: self.d_adv,
            lm: self.lm,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.g_adv, self.ap, self.depth, self.d_adv, self.lm, self.loss_g, self.loss_d
        )
    }
}

pub struct Trainer {
    config: TrainerConfig,
    device: Device,
    generator: Generator,
    ema: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
    global_weights: Option<ClassWeights>,
}

impl Trainer {
    pub fn new(config: TrainerConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let seed = config.train.seed;
        let generator = Generator::new(config.generator.clone(), seed, dtype, device)?;
        let ema = Generator::new(config.generator.clone(), seed, dtype, device)?;
        ema.store().copy_from(generator.store())?;
        let discriminator =
            Discriminator::new(config.discriminator.clone(), seed.wrapping_add(1), dtype, device)?;
        let betas = config.train.betas;
        let opt_g = Adam::new(AdamConfig::new(config.train.lr_g, betas), generator.store())?;
        let opt_d = Adam::new(AdamConfig::new(config.train.lr_d, betas), discriminator.store())?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
            config,
            device: device.clone(),
            generator,
            ema,
            discriminator,
            opt_g,
            opt_d,
            step: 0,
            global_weights: None,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Shadow weights used for inference.
    pub fn ema(&self) -> &Generator {
        &self.ema
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.opt_g, &self.opt_d)
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub(crate) fn restore_state(
        &mut self,
        step: u64,
        rng: ChaCha8Rng,
        opt_g: (u64, Vec<Tensor>, Vec<Tensor>),
        opt_d: (u64, Vec<Tensor>, Vec<Tensor>),
    ) -> Result<()> {
        self.opt_g.restore(opt_g.0, opt_g.1, opt_g.2)?;
        self.opt_d.restore(opt_d.0, opt_d.1, opt_d.2)?;
        self.step = step;
        self.rng = rng;
        Ok(())
    }

    /// Changes the step at which [`Trainer::run`] stops, e.g. to continue a
    /// resumed run past its original length.
    pub fn set_max_steps(&mut self, max_steps: u64) {
        self.config.train.max_steps = max_steps;
    }

    /// Uses fixed class weights instead of per-batch estimates.
    pub fn set_global_class_weights(&mut self, weights: Option<ClassWeights>) {
        self.global_weights = weights;
    }

    fn disc_input(&self, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        Ok(if self.config.discriminator.in_channels == 4 {
            Tensor::cat(&[rgb, depth], 1)?
        } else {
            rgb.clone()
        })
    }

    fn weights_for(&self, labels: &[LabelMap]) -> Result<ClassWeights> {
        match (&self.config.loss.class_weights, &self.global_weights) {
            (ClassWeightMode::Dataset, Some(w)) => Ok(w.clone()),
            (ClassWeightMode::Dataset, None) => contract!("dataset class weights were not provided"),
            (ClassWeightMode::Batch, _) => class_weights(labels),
        }
    }

    fn finite(&self, name: &str, value: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFiniteLoss {
                step: self.step,
                component: name.to_string(),
            })
        }
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let dtype = self.dtype();
        let (b, _, h, w) = batch.onehot.dims4()?;
        let cfg = &self.config;
        let weights = self.weights_for(&batch.labels)?;
        let loss_w = cfg.loss.weights();
        let real = self.disc_input(&batch.rgb, &batch.depth)?;

        // Discriminator phase.
        let z = sample_noise_batch(&mut self.rng, b, cfg.generator.noise_channels, h, w, dtype, &self.device)?;
        let fake = self.generator.forward(&batch.onehot, &z, Mode::Train)?;
        let fake = self.disc_input(&fake.rgb.detach(), &fake.depth.detach())?;
        let real_out = self.discriminator.forward(&real, Mode::Train)?;
        let fake_out = self.discriminator.forward(&fake, Mode::Train)?;
        let d_adv = d_adversarial_loss(&real_out, &batch.labels, &fake_out, &weights)?;
        let masks = batch
            .labels
            .iter()
            .map(|l| labelmix_mask(l, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let mask = stack_masks(&masks, dtype, &self.device)?;
        let mixed_logits = self
            .discriminator
            .logits(&labelmix(&real, &fake, &mask)?, Mode::Train)?;
        let lm = labelmix_consistency_from_logits(&mixed_logits, &real_out.logits, &fake_out.logits, &mask)?;
        let d_adv_v = self.finite("d_adv", scalar(&d_adv)?)?;
        let lm_v = self.finite("lm", scalar(&lm)?)?;
        let loss_d = ((d_adv * loss_w.adv)? + (lm * loss_w.lm)?)?;
        let grads = loss_d.backward()?;
        self.opt_d.step(self.discriminator.store(), &grads)?;
        drop(grads);

        // Generator phase.
        let cfg = &self.config;
        let z = sample_noise_batch(&mut self.rng, b, cfg.generator.noise_channels, h, w, dtype, &self.device)?;
        let out = self.generator.forward(&batch.onehot, &z, Mode::Train)?;
        let fake = self.disc_input(&out.rgb, &out.depth)?;
        let fake_out = self.discriminator.forward(&fake, Mode::Train)?;
        let g_adv = g_adversarial_loss(&fake_out, &batch.labels, &weights)?;
        let mut real_taps = self.discriminator.backbone_forward(&real, Mode::Eval)?;
        if !cfg.loss.ap_updates_disc {
            real_taps = real_taps.iter().map(|t| t.detach()).collect();
        }
        let ap = adaptive_perceptual_loss(&real_taps, &fake_out.taps)?;
        let depth = depth_l1_loss(&out.depth, &batch.depth, &batch.depth_valid)?;
        let g_adv_v = self.finite("g_adv", scalar(&g_adv)?)?;
        let ap_v = self.finite("ap", scalar(&ap)?)?;
        let depth_v = self.finite("depth", scalar(&depth.loss)?)?;
        let weighted_ap = (ap * loss_w.ap)?;
        let loss_g = (((g_adv * loss_w.adv)? + &weighted_ap)? + (depth.loss * loss_w.depth)?)?;
        let grads = loss_g.backward()?;
        self.opt_g.step(self.generator.store(), &grads)?;
        drop(grads);
        if cfg.loss.ap_updates_disc {
            let grads = weighted_ap.backward()?;
            self.opt_d.step(self.discriminator.store(), &grads)?;
        }

        ema_update(self.ema.store(), self.generator.store(), cfg.train.ema_decay)?;

        let stats = StepStats {
            step: self.step,
            g_adv: g_adv_v,
            ap: ap_v,
            depth: depth_v,
            d_adv: d_adv_v,
            lm: lm_v,
            loss_g: loss_w.adv * g_adv_v + loss_w.ap * ap_v + loss_w.depth * depth_v,
            loss_d: loss_w.adv * d_adv_v + loss_w.lm * lm_v,
            depth_empty: depth.no_valid_pixels,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Sample indices for a given step: consecutive slices of the seeded
    /// per-epoch permutations, wrapping across epochs.
    pub fn batch_indices(&self, data: &DatasetIndex, step: u64) -> Vec<usize> {
        batch_indices(data, self.config.train.seed, self.config.train.batch_size, step)
    }

    /// Trains from the current step up to `train.max_steps`.
    ///
    /// Batches are decoded on a worker thread and handed over through a
    /// bounded queue in step order. `on_step` runs after every step and can
    /// stop the run early by returning `false`.
    pub fn run<F>(&mut self, data: &DatasetIndex, mut on_step: F) -> Result<()>
    where
        F: FnMut(&mut Trainer, &StepStats) -> Result<bool>,
    {
        if data.is_empty() {
            contract!("cannot train on an empty dataset");
        }
        let size = self.config.generator.image_size;
        let max_depth = self.config.max_depth_m;
        let (seed, bs) = (self.config.train.seed, self.config.train.batch_size);
        let (first, last) = (self.step, self.config.train.max_steps);
        let (dtype, device) = (self.dtype(), self.device.clone());
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
        std::thread::scope(|scope| -> Result<()> {
            scope.spawn(move || {
                for step in first..last {
                    let batch = batch_indices(data, seed, bs, step)
                        .into_iter()
                        .map(|i| data.load(i, size, max_depth))
                        .collect::<Result<Vec<_>>>()
                        .and_then(|s| Batch::new(&s, dtype, &device));
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            for batch in rx.iter() {
                let stats = self.train_step(&batch?)?;
                if !on_step(self, &stats)? {
                    break;
                }
            }
            Ok(())
        })
    }
}

pub fn batch_indices(data: &DatasetIndex, seed: u64, batch_size: usize, step: u64) -> Vec<usize> {
    let n = data.len() as u64;
    let start = step * batch_size as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (start..start + batch_size as u64)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, data.epoch_order(seed, epoch)));
            }
            cached.as_ref().expect("cached order").1[(pos % n) as usize]
        })
        .collect()
}

/// Writes step statistics as JSON lines, CSV, or both.
pub struct LossLog {
    jsonl: Option<BufWriter<File>>,
    csv: Option<BufWriter<File>>,
}

impl LossLog {
    /// Starts fresh logs, truncating existing files.
    pub fn create(jsonl: Option<&Path>, csv: Option<&Path>) -> Result<Self> {
        Self::open(jsonl, csv, false)
    }

    /// Continues existing logs, e.g. after resuming from a checkpoint.
    pub fn append(jsonl: Option<&Path>, csv: Option<&Path>) -> Result<Self> {
        Self::open(jsonl, csv, true)
    }

    fn open(jsonl: Option<&Path>, csv: Option<&Path>, append: bool) -> Result<Self> {
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        let jsonl = jsonl.map(|p| open(p).map(BufWriter::new)).transpose()?;
        let csv = match csv {
            Some(p) => {
                let file = open(p)?;
                let empty = file.metadata().map_err(|e| Error::io(p, e))?.len() == 0;
                let mut w = BufWriter::new(file);
                if empty {
                    writeln!(w, "{}", StepStats::CSV_HEADER).map_err(|e| Error::io(p, e))?;
                }
                Some(w)
            }
            None => None,
        };
        Ok(Self { jsonl, csv })
    }

    pub fn record(&mut self, stats: &StepStats) -> Result<()> {
        if let Some(w) = self.jsonl.as_mut() {
            let line = serde_json::to_string(stats).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
        }
        if let Some(w) = self.csv.as_mut() {
            writeln!(w, "{}", stats.csv_row()).map_err(|e| Error::io("loss csv", e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for w in self.jsonl.iter_mut().chain(self.csv.iter_mut()) {
            w.flush().map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }
}
