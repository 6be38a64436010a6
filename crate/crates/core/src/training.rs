//! Adversarial training of the translation networks with the co-trained
//! structure segmenter, and plain segmenter training on (translated) data.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    apply_crop, collate, crop_all, mix_seed, shuffled_indices, write_directory_dataset, CropKind,
    CropSpec, Domain, Image, PairedSample,
};
use crate::error::{dim_err, invalid, Error, Result};
use crate::losses::{
    cycle_loss, focal_tversky_loss, lsgan_loss, sp_generator_objective, structure_loss, LossConfig,
    LossParts, MaskBatch,
};
use crate::nn::WeightInit;
use crate::models::{build_segmenter, Generator, ModelBundle, ModelConfig, Segmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    /// First epoch whose learning rate is below the base rate's plateau.
    pub anneal_start_epoch: usize,
    pub lr_gan: f64,
    pub lr_seg: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint period in epochs; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 200,
            anneal_start_epoch: 150,
            lr_gan: 2e-4,
            lr_seg: 1e-3,
            batch_size: 2,
            buffer_capacity: 50,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anneal_start_epoch == 0 || self.anneal_start_epoch > self.total_epochs {
            return Err(invalid(format!(
                "need 0 < anneal_start_epoch ({}) <= total_epochs ({})",
                self.anneal_start_epoch, self.total_epochs
            )));
        }
        if !(self.lr_gan > 0.0 && self.lr_seg > 0.0) {
            return Err(invalid("learning rates must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(invalid("buffer_capacity must be >= 1"));
        }
        self.loss.validate()
    }
}

/// Constant learning rate until `anneal_start_epoch`, then a linear ramp that
/// would reach zero at `total_epochs`.
pub fn lr_at_epoch(cfg: &TrainConfig, base_lr: f64, epoch: usize) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    if epoch < cfg.anneal_start_epoch {
        return Ok(base_lr);
    }
    let remaining = (cfg.total_epochs - epoch) as f64;
    let span = (cfg.total_epochs - cfg.anneal_start_epoch) as f64;
    Ok(base_lr * remaining / span)
}

/// Pool of previously generated images shown to a discriminator.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T = Tensor> {
    capacity: usize,
    stored: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayOutcome {
    /// Buffer not yet full: the fresh image was stored and returned.
    Stored,
    /// Full buffer, fresh image passed through.
    Fresh,
    /// Full buffer, a stored image was returned and replaced by the fresh one.
    Swapped,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay buffer capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            stored: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn stored(&self) -> &[T] {
        &self.stored
    }
}

/// Image for the discriminator given a freshly generated one.
pub fn replay_sample<T: Clone>(
    buffer: &mut ReplayBuffer<T>,
    fresh: T,
    rng: &mut impl Rng,
) -> (T, ReplayOutcome) {
    if buffer.stored.len() < buffer.capacity {
        buffer.stored.push(fresh.clone());
        return (fresh, ReplayOutcome::Stored);
    }
    if rng.random_bool(0.5) {
        let i = rng.random_range(0..buffer.stored.len());
        let old = std::mem::replace(&mut buffer.stored[i], fresh);
        (old, ReplayOutcome::Swapped)
    } else {
        (fresh, ReplayOutcome::Fresh)
    }
}

/// Runs each image of a generated batch through the buffer.
fn replay_batch(buffer: &mut ReplayBuffer, fake: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let fake = fake.detach();
    let mut picked = Vec::with_capacity(fake.dim(0)?);
    for i in 0..fake.dim(0)? {
        let (img, _) = replay_sample(buffer, fake.narrow(0, i, 1)?.copy()?, rng);
        picked.push(img);
    }
    Ok(Tensor::cat(&picked, 0)?)
}

/// Identity in the forward pass; scales the incoming gradient by the factor
/// in the backward pass and cuts the path entirely when it is zero.
struct GradScale(f64);

impl CustomOp1 for GradScale {
    fn name(&self) -> &'static str {
        "grad-scale"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let CpuStorage::F32(values) = storage else {
            candle_core::bail!("grad-scale supports f32 only");
        };
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("grad-scale expects a contiguous input");
        };
        Ok((CpuStorage::F32(values[start..end].to_vec()), layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        if self.0 == 0.0 {
            Ok(None)
        } else {
            Ok(Some(grad_res.affine(self.0, 0.0)?))
        }
    }
}

fn grad_scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradScale(factor))?)
}

/// Loss components and learning rates of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    #[serde(rename = "adv_F")]
    pub adv_f: f64,
    pub d_x: f64,
    pub d_y: f64,
    #[serde(rename = "cyc_X")]
    pub cyc_x: f64,
    #[serde(rename = "cyc_Y")]
    pub cyc_y: f64,
    #[serde(rename = "struct")]
    pub structure: f64,
    pub total: f64,
    pub lr_gan: f64,
    pub lr_seg: f64,
}

impl IterationRecord {
    pub fn parts(&self) -> LossParts {
        LossParts {
            adv_g: self.adv_g,
            adv_f: self.adv_f,
            cyc_x: self.cyc_x,
            cyc_y: self.cyc_y,
            structure: self.structure,
        }
    }
}

/// Means of the iteration records of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    #[serde(rename = "adv_F")]
    pub adv_f: f64,
    pub d_x: f64,
    pub d_y: f64,
    #[serde(rename = "cyc_X")]
    pub cyc_x: f64,
    #[serde(rename = "cyc_Y")]
    pub cyc_y: f64,
    #[serde(rename = "struct")]
    pub structure: f64,
    pub total: f64,
    pub lr_gan: f64,
    pub lr_seg: f64,
}

impl EpochSummary {
    fn from_records(epoch: usize, records: &[IterationRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&IterationRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            steps: records.len(),
            adv_g: mean(|r| r.adv_g),
            adv_f: mean(|r| r.adv_f),
            d_x: mean(|r| r.d_x),
            d_y: mean(|r| r.d_y),
            cyc_x: mean(|r| r.cyc_x),
            cyc_y: mean(|r| r.cyc_y),
            structure: mean(|r| r.structure),
            total: mean(|r| r.total),
            lr_gan: records.first().map_or(0.0, |r| r.lr_gan),
            lr_seg: records.first().map_or(0.0, |r| r.lr_seg),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Iteration(&'a IterationRecord),
    Epoch(&'a EpochSummary),
    SegmenterEpoch { epoch: usize, loss: f64, lr_seg: f64 },
}

/// Newline-delimited JSON metrics file.
struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn open(dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Ok(Self(Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))))
            }
            None => Ok(Self(None)),
        }
    }

    fn write(&mut self, line: &LogLine) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut w) = self.0 {
            w.flush()?;
        }
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

fn ensure_finite(value: f64, component: &'static str, epoch: usize, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            component,
            epoch,
            step,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn adam(vars: Vec<candle_core::Var>, lr: f64, beta1: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Optimizers, replay buffers and sampling state for adversarial training.
/// Owns the bundle for the duration of training.
pub struct SpTrainer {
    pub bundle: ModelBundle,
    cfg: TrainConfig,
    opt_gen: AdamW,
    opt_disc: AdamW,
    opt_seg: Option<AdamW>,
    pool_x: ReplayBuffer,
    pool_y: ReplayBuffer,
    rng: ChaCha8Rng,
}

impl SpTrainer {
    pub fn new(bundle: ModelBundle, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut gen_vars = bundle.g.params().vars();
        gen_vars.extend(bundle.f.params().vars());
        let mut disc_vars = bundle.d_x.params().vars();
        disc_vars.extend(bundle.d_y.params().vars());
        let opt_seg = match &bundle.u {
            Some(u) => Some(adam(u.params().vars(), cfg.lr_seg, 0.9)?),
            None => None,
        };
        Ok(Self {
            opt_gen: adam(gen_vars, cfg.lr_gan, 0.5)?,
            opt_disc: adam(disc_vars, cfg.lr_gan, 0.5)?,
            opt_seg,
            pool_x: ReplayBuffer::new(cfg.buffer_capacity)?,
            pool_y: ReplayBuffer::new(cfg.buffer_capacity)?,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5EED_B0F)),
            cfg: cfg.clone(),
            bundle,
        })
    }

    fn learning_rates(&self) -> (f64, f64) {
        (
            self.opt_gen.learning_rate(),
            self.opt_seg
                .as_ref()
                .map_or(self.cfg.lr_seg, |o| o.learning_rate()),
        )
    }

    /// Applies the schedule for `epoch` to every optimizer.
    pub fn set_epoch(&mut self, epoch: usize) -> Result<()> {
        let lr_gan = lr_at_epoch(&self.cfg, self.cfg.lr_gan, epoch)?;
        let lr_seg = lr_at_epoch(&self.cfg, self.cfg.lr_seg, epoch)?;
        self.opt_gen.set_learning_rate(lr_gan);
        self.opt_disc.set_learning_rate(lr_gan);
        if let Some(o) = &mut self.opt_seg {
            o.set_learning_rate(lr_seg);
        }
        Ok(())
    }

    /// One generator/segmenter update followed by one discriminator update.
    /// `x` is a labelled source batch, `y` an unlabelled target batch.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        x_labels: &MaskBatch,
        y: &Tensor,
        epoch: usize,
        step: usize,
    ) -> Result<IterationRecord> {
        let gen = self.generator_phase(x, x_labels, y, epoch, step)?;
        let (d_x, d_y) = self.discriminator_phase(x, y, &gen, epoch, step)?;
        let (lr_gan, lr_seg) = self.learning_rates();
        let p = gen.parts;
        Ok(IterationRecord {
            epoch,
            step,
            adv_g: p.adv_g,
            adv_f: p.adv_f,
            d_x,
            d_y,
            cyc_x: p.cyc_x,
            cyc_y: p.cyc_y,
            structure: p.structure,
            total: gen.total,
            lr_gan,
            lr_seg,
        })
    }

    /// Updates G, F and U on the composite objective. Discriminator
    /// parameters receive gradients here but are never stepped.
    pub fn generator_phase(
        &mut self,
        x: &Tensor,
        x_labels: &MaskBatch,
        y: &Tensor,
        epoch: usize,
        step: usize,
    ) -> Result<GeneratorPhase> {
        let (bx, _, hx, wx) = x.dims4()?;
        if x_labels.dims() != (bx, hx, wx) {
            return Err(dim_err(format!(
                "source labels {:?} do not match images {:?}",
                x_labels.dims(),
                x.dims()
            )));
        }
        let loss_cfg = self.cfg.loss;
        let b = &self.bundle;

        let y_fake = b.g.forward(x)?;
        let x_rec = b.f.forward(&y_fake)?;
        let x_fake = b.f.forward(y)?;
        let y_rec = b.g.forward(&x_fake)?;

        let adv_g = lsgan_loss(&b.d_y.forward(&y_fake)?, true)?;
        let adv_f = lsgan_loss(&b.d_x.forward(&x_fake)?, true)?;
        let cyc_x = cycle_loss(x, &x_rec)?;
        let cyc_y = cycle_loss(y, &y_rec)?;
        let mut gen_loss = ((&adv_g + &adv_f)? + ((&cyc_x + &cyc_y)? * loss_cfg.lambda_cyc)?)?;

        let mut parts = LossParts {
            adv_g: ensure_finite(scalar(&adv_g)?, "adv_G", epoch, step)?,
            adv_f: ensure_finite(scalar(&adv_f)?, "adv_F", epoch, step)?,
            cyc_x: ensure_finite(scalar(&cyc_x)?, "cyc_X", epoch, step)?,
            cyc_y: ensure_finite(scalar(&cyc_y)?, "cyc_Y", epoch, step)?,
            structure: 0.0,
        };
        if let Some(u) = &b.u {
            // U sees the unweighted loss; G and F receive it scaled by zeta.
            let seg = u.forward(&grad_scale(&x_rec, loss_cfg.zeta)?)?;
            let st = structure_loss(&seg, x_labels, &loss_cfg)?;
            parts.structure = ensure_finite(scalar(&st)?, "struct", epoch, step)?;
            gen_loss = (gen_loss + st)?;
        }
        let total = ensure_finite(sp_generator_objective(&parts, &loss_cfg), "total", epoch, step)?;

        let grads = gen_loss.backward()?;
        self.opt_gen.step(&grads)?;
        if let Some(o) = &mut self.opt_seg {
            o.step(&grads)?;
        }
        Ok(GeneratorPhase {
            parts,
            total,
            y_fake: y_fake.detach(),
            x_fake: x_fake.detach(),
        })
    }

    /// Updates D_X and D_Y on real images and replayed fakes; returns their
    /// losses `(d_x, d_y)`.
    pub fn discriminator_phase(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        gen: &GeneratorPhase,
        epoch: usize,
        step: usize,
    ) -> Result<(f64, f64)> {
        let y_pool = replay_batch(&mut self.pool_y, &gen.y_fake, &mut self.rng)?;
        let x_pool = replay_batch(&mut self.pool_x, &gen.x_fake, &mut self.rng)?;
        let b = &self.bundle;
        let d_y = ((lsgan_loss(&b.d_y.forward(y)?, true)?
            + lsgan_loss(&b.d_y.forward(&y_pool)?, false)?)?
            * 0.5)?;
        let d_x = ((lsgan_loss(&b.d_x.forward(x)?, true)?
            + lsgan_loss(&b.d_x.forward(&x_pool)?, false)?)?
            * 0.5)?;
        let d_y_val = ensure_finite(scalar(&d_y)?, "d_y", epoch, step)?;
        let d_x_val = ensure_finite(scalar(&d_x)?, "d_x", epoch, step)?;
        let grads = (d_x + d_y)?.backward()?;
        self.opt_disc.step(&grads)?;
        Ok((d_x_val, d_y_val))
    }
}

/// Result of a generator phase: objective parts and the detached fakes the
/// discriminators are trained against.
#[derive(Debug, Clone)]
pub struct GeneratorPhase {
    pub parts: LossParts,
    pub total: f64,
    pub y_fake: Tensor,
    pub x_fake: Tensor,
}

/// Where training writes its metrics log and checkpoints. `None` keeps
/// everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints").join(name))
    }
}

#[derive(Debug)]
pub struct DaOutcome {
    pub bundle: ModelBundle,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Per-epoch view of a dataset: fixed crops are taken once, random crops are
/// redrawn each epoch.
struct EpochCropper<'a> {
    samples: &'a [PairedSample],
    spec: Option<CropSpec>,
    fixed: Option<Vec<PairedSample>>,
    seed: u64,
}

impl<'a> EpochCropper<'a> {
    fn new(samples: &'a [PairedSample], spec: Option<CropSpec>, seed: u64) -> Result<Self> {
        let fixed = match spec {
            Some(s) if s.kind != CropKind::Random => Some(crop_all(samples, &s, seed)?),
            _ => None,
        };
        Ok(Self {
            samples,
            spec,
            fixed,
            seed,
        })
    }

    fn len(&self) -> usize {
        self.fixed.as_ref().map_or(self.samples.len(), Vec::len)
    }

    fn get(&self, i: usize, epoch: usize) -> Result<PairedSample> {
        if let Some(fixed) = &self.fixed {
            return Ok(fixed[i].clone());
        }
        match &self.spec {
            Some(spec) => {
                let salt = (epoch as u64) << 32 | i as u64;
                let mut out = apply_crop(&self.samples[i], spec, mix_seed(self.seed, salt))?;
                Ok(out.remove(0))
            }
            None => Ok(self.samples[i].clone()),
        }
    }
}

fn without_labels(samples: &[PairedSample]) -> Vec<PairedSample> {
    samples
        .iter()
        .map(|s| PairedSample {
            label: None,
            ..s.clone()
        })
        .collect()
}

/// Full adversarial schedule over `total_epochs`, pairing min(|source|,
/// |target|) samples per epoch with independent shuffles. Target labels, if
/// any, are dropped before training starts.
pub fn train_sp_cyclegan(
    source: &[PairedSample],
    target: &[PairedSample],
    bundle: ModelBundle,
    train_cfg: &TrainConfig,
    crop: Option<CropSpec>,
    output: &TrainOutput,
) -> Result<DaOutcome> {
    train_cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(invalid("source and target datasets must be non-empty"));
    }
    if let Some(s) = source.iter().find(|s| s.label.is_none()) {
        return Err(invalid(format!("source sample {} is unlabelled", s.name)));
    }
    let target = without_labels(target);
    let num_classes = bundle.config.label_classes();
    let device = Device::Cpu;

    let src = EpochCropper::new(source, crop, mix_seed(train_cfg.seed, 11))?;
    let tgt = EpochCropper::new(&target, crop, mix_seed(train_cfg.seed, 12))?;
    let pairs = src.len().min(tgt.len());

    let mut trainer = SpTrainer::new(bundle, train_cfg)?;
    let mut log = MetricsLog::open(output.dir.as_deref())?;
    let mut iterations = Vec::new();
    let mut epochs = Vec::new();

    for epoch in 0..train_cfg.total_epochs {
        trainer.set_epoch(epoch)?;
        let src_order = shuffled_indices(src.len(), mix_seed(train_cfg.seed, 1), epoch);
        let tgt_order = shuffled_indices(tgt.len(), mix_seed(train_cfg.seed, 2), epoch);
        let mut records = Vec::new();
        for (step, start) in (0..pairs).step_by(train_cfg.batch_size).enumerate() {
            let end = (start + train_cfg.batch_size).min(pairs);
            let xs = src_order[start..end]
                .iter()
                .map(|&i| src.get(i, epoch))
                .collect::<Result<Vec<_>>>()?;
            let ys = tgt_order[start..end]
                .iter()
                .map(|&i| tgt.get(i, epoch))
                .collect::<Result<Vec<_>>>()?;
            let xb = collate(&xs.iter().collect::<Vec<_>>(), Domain::Source, num_classes, &device)?;
            let yb = collate(&ys.iter().collect::<Vec<_>>(), Domain::Target, num_classes, &device)?;
            let masks = xb
                .masks
                .ok_or_else(|| invalid("source batch lost its labels"))?;
            let record =
                trainer.train_step(xb.images.tensor(), &masks, yb.images.tensor(), epoch, step)?;
            log.write(&LogLine::Iteration(&record))?;
            records.push(record);
        }
        let summary = EpochSummary::from_records(epoch, &records);
        log.write(&LogLine::Epoch(&summary))?;
        log::info!(
            "epoch {epoch}: total {:.4} struct {:.4} d_x {:.4} d_y {:.4}",
            summary.total,
            summary.structure,
            summary.d_x,
            summary.d_y
        );
        epochs.push(summary);
        iterations.extend(records);

        let done = epoch + 1;
        if train_cfg.checkpoint_every > 0
            && done % train_cfg.checkpoint_every == 0
            && done < train_cfg.total_epochs
        {
            if let Some(path) = output.checkpoint_path(&format!("epoch_{done:04}.safetensors")) {
                trainer.bundle.save(&path, done)?;
            }
        }
    }
    log.finish()?;
    if let Some(path) = output.checkpoint_path(FINAL_CHECKPOINT) {
        trainer.bundle.save(&path, train_cfg.total_epochs)?;
    }
    Ok(DaOutcome {
        bundle: trainer.bundle,
        iterations,
        epochs,
    })
}

/// Anything that maps a batch of images to a batch of images of the same
/// shape: a trained generator, or the identity for the untranslated arm.
pub trait Translator {
    fn translate(&self, x: &Tensor) -> Result<Tensor>;
}

impl Translator for Generator {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Translator for Identity {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Crops every labelled sample, translates the image and keeps the cropped
/// label untouched. Writes a directory dataset when `out_dir` is given.
pub fn translate_dataset(
    translator: &impl Translator,
    dataset: &[PairedSample],
    crop: Option<&CropSpec>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<PairedSample>> {
    let cropped = match crop {
        Some(spec) => crop_all(dataset, spec, seed)?,
        None => dataset.to_vec(),
    };
    let device = Device::Cpu;
    let mut out = Vec::with_capacity(cropped.len());
    for s in cropped {
        if s.label.is_none() {
            return Err(invalid(format!("sample {} has no label to carry over", s.name)));
        }
        let x = s.image.to_tensor(&device)?.unsqueeze(0)?;
        let translated = translator.translate(&x)?;
        if translated.dims() != x.dims() {
            return Err(dim_err(format!(
                "translator mapped {:?} to {:?}",
                x.dims(),
                translated.dims()
            )));
        }
        let image = Image::from_tensor(&translated.squeeze(0)?.clamp(-1f32, 1f32)?)?;
        out.push(PairedSample::new(s.name, image, s.label)?);
    }
    if let Some(dir) = out_dir {
        write_directory_dataset(dir, &out)?;
    }
    Ok(out)
}

#[derive(Debug)]
pub struct SegmenterOutcome {
    pub segmenter: Segmenter,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains a freshly initialized segmenter (He-normal weights) with the
/// focal-Tversky loss and returns the parameters of the epoch with the lowest mean training loss.
pub fn train_segmenter(
    dataset: &[PairedSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    crop: Option<CropSpec>,
    output: &TrainOutput,
) -> Result<SegmenterOutcome> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("segmenter training set is empty"));
    }
    if let Some(s) = dataset.iter().find(|s| s.label.is_none()) {
        return Err(invalid(format!("training sample {} is unlabelled", s.name)));
    }
    let device = Device::Cpu;
    let segmenter = build_segmenter(model_cfg, &device)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(model_cfg.init_seed, 0x5E6));
    segmenter
        .params()
        .reinitialize_with(WeightInit::HeNormal, &mut init_rng)?;
    let mut opt = adam(segmenter.params().vars(), train_cfg.lr_seg, 0.9)?;

    let data = EpochCropper::new(dataset, crop, mix_seed(train_cfg.seed, 21))?;
    let num_classes = model_cfg.label_classes();
    let mut log = MetricsLog::open(output.dir.as_deref())?;
    let mut epoch_losses = Vec::with_capacity(train_cfg.total_epochs);
    let mut best: Option<(f64, usize, _)> = None;

    for epoch in 0..train_cfg.total_epochs {
        let lr = lr_at_epoch(train_cfg, train_cfg.lr_seg, epoch)?;
        opt.set_learning_rate(lr);
        let order = shuffled_indices(data.len(), mix_seed(train_cfg.seed, 3), epoch);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| data.get(i, epoch))
                .collect::<Result<Vec<_>>>()?;
            let batch = collate(&samples.iter().collect::<Vec<_>>(), Domain::Source, num_classes, &device)?;
            let masks = batch
                .masks
                .ok_or_else(|| invalid("training batch lost its labels"))?;
            let pred = segmenter.forward(batch.images.tensor())?;
            let loss = focal_tversky_loss(&pred, &masks, &train_cfg.loss)?;
            sum += ensure_finite(scalar(&loss)?, "segmenter", epoch, step)?;
            steps += 1;
            opt.backward_step(&loss)?;
        }
        let mean = sum / steps as f64;
        log.write(&LogLine::SegmenterEpoch {
            epoch,
            loss: mean,
            lr_seg: lr,
        })?;
        log::info!("segmenter epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if best.as_ref().is_none_or(|(l, _, _)| mean < *l) {
            best = Some((mean, epoch, segmenter.params().snapshot()?));
        }
    }
    log.finish()?;
    let (_, best_epoch, snapshot) = best.ok_or_else(|| invalid("no training epochs were run"))?;
    segmenter.params().restore(&snapshot)?;
    if let Some(path) = output.checkpoint_path(FINAL_CHECKPOINT) {
        checkpoint::save_segmenter(&path, model_cfg, &segmenter, best_epoch + 1)?;
    }
    Ok(SegmenterOutcome {
        segmenter,
        epoch_losses,
        best_epoch,
    })
}
