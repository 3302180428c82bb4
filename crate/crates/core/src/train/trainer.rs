use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adamw_step, charbonnier, clip_grad_norm, lr_at, psnr, ssim, AdamHyper, OptimState, Schedule};
use crate::error::{Error, Result};
use crate::model::checkpoint::OptimSection;
use crate::model::{crop_to, pad_to_multiple, Checkpoint, Model};
use crate::snowsynth::{derive_seed, Augment, Dataset};
use crate::tensor::{Scalar, Tape, Tensor};

pub const METRICS_LOG: &str = "metrics.log";
pub const LAST_CHECKPOINT: &str = "last.mspf";

/// Training hyperparameters; every field is one `key = value` of a `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Train until this many epochs have completed (counting resumed ones).
    pub epochs: u64,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub lr0: f64,
    pub hold_epochs: u64,
    pub total_epochs: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub checkpoint_every: u64,
    /// Global gradient-norm limit; `0` disables clipping.
    pub clip_grad_norm: f64,
    /// Random flips, rotations and crop offsets; otherwise a fixed top-left crop.
    pub augment: bool,
    /// Writes `secs=0` so logs are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = Schedule::default();
        let h = AdamHyper::default();
        TrainConfig {
            epochs: 600,
            batch: 2,
            crop: 64,
            seed: 0,
            lr0: s.lr0,
            hold_epochs: s.hold_epochs,
            total_epochs: s.total_epochs,
            beta1: h.beta1,
            beta2: h.beta2,
            adam_eps: h.eps,
            weight_decay: h.weight_decay,
            checkpoint_every: 10,
            clip_grad_norm: 0.0,
            augment: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr0: self.lr0,
            hold_epochs: self.hold_epochs,
            total_epochs: self.total_epochs,
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.hyper().validate()?;
        if self.batch == 0 || self.crop == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("batch, crop and checkpoint_every must be ≥ 1"));
        }
        if self.epochs > self.total_epochs {
            return Err(Error::config(format!(
                "epochs ({}) exceeds the schedule's total_epochs ({})",
                self.epochs, self.total_epochs
            )));
        }
        if !(self.clip_grad_norm >= 0.0) {
            return Err(Error::config("clip_grad_norm must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Number of completed epochs after this one.
    pub epoch: u64,
    pub lr: f64,
    /// Mean per-batch loss.
    pub loss: f64,
    pub secs: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.9} loss={:.9} secs={:.3}",
            self.epoch, self.lr, self.loss, self.secs
        )
    }
}

/// Model, optimizer state and epoch counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer<S: Scalar = f32> {
    pub model: Model<S>,
    pub optim: OptimState<S>,
    pub epoch: u64,
    pub cfg: TrainConfig,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optim = OptimState::new(&model.params, cfg.hyper());
        Ok(Trainer {
            model,
            optim,
            epoch: 0,
            cfg,
        })
    }

    /// Restores weights, optimizer moments and epoch counter.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = ck.to_model::<S>(None)?;
        let mut t = Trainer::new(model, cfg)?;
        t.epoch = ck.epoch.unwrap_or(0);
        if let Some(opt) = &ck.optim {
            t.optim.t = opt.t;
            for (name, tensor) in &opt.tensors {
                let (base, which) = name
                    .rsplit_once('.')
                    .ok_or_else(|| Error::input(format!("bad optimizer entry {name}")))?;
                let id = t
                    .model
                    .params
                    .id(base)
                    .ok_or_else(|| Error::input(format!("optimizer entry {name} has no parameter")))?;
                let slot = match which {
                    "m" => &mut t.optim.m[id.index()],
                    "v" => &mut t.optim.v[id.index()],
                    _ => return Err(Error::input(format!("bad optimizer entry {name}"))),
                };
                if slot.len() != tensor.len() {
                    return Err(Error::shape(format!("optimizer entry {name} has the wrong size")));
                }
                for (d, s) in slot.iter_mut().zip(tensor.data()) {
                    *d = S::of(*s as f64);
                }
            }
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        let mut tensors = Vec::with_capacity(2 * self.model.params.len());
        for (i, (name, p)) in self.model.params.iter().enumerate() {
            for (suffix, buf) in [("m", &self.optim.m[i]), ("v", &self.optim.v[i])] {
                let data = buf.iter().map(|v| v.as_f64() as f32).collect();
                tensors.push((format!("{name}.{suffix}"), Tensor::new(p.shape(), data)?));
            }
        }
        ck.optim = Some(OptimSection {
            tensors,
            t: self.optim.t,
        });
        ck.epoch = Some(self.epoch);
        Ok(ck)
    }

    fn batch(&self, data: &Dataset, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor<S>, Tensor<S>)> {
        let crop = self.cfg.crop;
        let mut snowy = Vec::new();
        let mut clean = Vec::new();
        for &i in idx {
            let p = &data.pairs[i];
            let (_, _, h, w) = p.snowy.dims4()?;
            let t = if self.cfg.augment {
                Augment::sample(rng, h, w, crop)?
            } else {
                if crop > h.min(w) {
                    return Err(Error::input(format!("crop {crop} does not fit {} ({h}x{w})", p.name)));
                }
                Augment {
                    y0: 0,
                    x0: 0,
                    crop,
                    flip: false,
                    quarter_turns: 0,
                }
            };
            snowy.extend(t.apply(&p.snowy)?.data().iter().map(|&v| S::of(v as f64)));
            clean.extend(t.apply(&p.clean)?.data().iter().map(|&v| S::of(v as f64)));
        }
        let shape = [idx.len(), 3, crop, crop];
        Ok((Tensor::new(&shape, snowy)?, Tensor::new(&shape, clean)?))
    }

    /// One optimizer step on a prepared batch; returns the loss.
    pub fn step(&mut self, snowy: Tensor<S>, clean: Tensor<S>, lr: f64) -> Result<f64> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let x = tape.constant(snowy);
        let y = self.model.forward(&p, x)?;
        let loss = charbonnier(y, tape.constant(clean), super::CHARBONNIER_EPS)?;
        let value = loss.value().item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at epoch {}", self.epoch + 1)));
        }
        tape.backward(loss)?;
        self.model.params.zero_grads();
        self.model.params.accumulate_grads(&p)?;
        if self.cfg.clip_grad_norm > 0.0 {
            clip_grad_norm(&mut self.model.params, self.cfg.clip_grad_norm);
        }
        adamw_step(&mut self.model.params, &mut self.optim, lr)?;
        Ok(value)
    }

    /// Shuffle, augment, and one step per batch.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        let start = Instant::now();
        let lr = lr_at(self.epoch, &self.cfg.schedule())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(self.cfg.batch) {
            let (snowy, clean) = self.batch(data, idx, &mut rng)?;
            total += self.step(snowy, clean, lr)?;
            steps += 1;
        }
        self.epoch += 1;
        let secs = if self.cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        Ok(EpochStats {
            epoch: self.epoch,
            lr,
            loss: total / steps as f64,
            secs,
        })
    }

    /// Mean loss over full (uncropped) pairs without updating anything.
    pub fn loss_on(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::input("dataset is empty"));
        }
        let mut total = 0.0;
        for p in &data.pairs {
            let out = self.model.infer(&p.snowy.cast())?;
            let tape = Tape::<S>::no_grad();
            let l = charbonnier(tape.constant(out), tape.constant(p.clean.cast()), super::CHARBONNIER_EPS)?;
            total += l.value().item()?.as_f64();
        }
        Ok(total / data.len() as f64)
    }

    /// Trains until `cfg.epochs`, appending to `out/metrics.log` and saving
    /// `out/last.mspf` every `checkpoint_every` epochs and at the end. On a
    /// numeric failure the last saved checkpoint is left untouched.
    pub fn fit(&mut self, data: &Dataset, out: Option<&Path>) -> Result<Vec<EpochStats>> {
        if data.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(METRICS_LOG))?)
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            let stats = self.run_epoch(data)?;
            if let Some(f) = &mut log {
                writeln!(f, "{}", stats.log_line())?;
            }
            if let Some(dir) = out {
                if stats.epoch % self.cfg.checkpoint_every == 0 {
                    self.checkpoint()?.save(dir.join(LAST_CHECKPOINT))?;
                }
            }
            history.push(stats);
        }
        if let Some(dir) = out {
            self.checkpoint()?.save(dir.join(LAST_CHECKPOINT))?;
        }
        Ok(history)
    }
}

/// Builds a trainer around `model` and runs it; see [`Trainer::fit`].
pub fn train_loop<S: Scalar>(
    model: Model<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(Trainer<S>, Vec<EpochStats>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let history = t.fit(data, out)?;
    Ok((t, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_baseline_psnr: f64,
    pub mean_baseline_ssim: f64,
    /// Pairs the dataset could not read.
    pub skipped: usize,
}

impl EvalReport {
    /// Tab-separated table with a header and a final `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("name\tpsnr\tssim\tbaseline_psnr\tbaseline_ssim\n");
        for r in &self.rows {
            s += &format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.name, r.psnr, r.ssim, r.baseline_psnr, r.baseline_ssim
            );
        }
        s += &format!(
            "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.mean_psnr, self.mean_ssim, self.mean_baseline_psnr, self.mean_baseline_ssim
        );
        s
    }
}

/// Restores `snowy` at any size: reflect-pad, forward, crop, clamp to `[0, 1]`.
pub fn restore<S: Scalar>(model: &Model<S>, snowy: &Tensor<S>) -> Result<Tensor<S>> {
    let (padded, orig) = pad_to_multiple(snowy, model.input_multiple())?;
    let out = crop_to(&model.infer(&padded)?, orig)?;
    Ok(out.map(|v| v.max(S::zero()).min(S::one())))
}

/// Per-image and mean PSNR/SSIM of the restored output and of the raw
/// input, both against the clean target, in dataset order.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let rows = data
        .pairs
        .par_iter()
        .map(|p| {
            let snowy: Tensor<S> = p.snowy.cast();
            let clean: Tensor<S> = p.clean.cast();
            let out = restore(model, &snowy)?;
            Ok(EvalRow {
                name: p.name.clone(),
                psnr: psnr(&out, &clean)?,
                ssim: ssim(&out, &clean)?,
                baseline_psnr: psnr(&snowy, &clean)?,
                baseline_ssim: ssim(&snowy, &clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        mean_psnr: mean(|r| r.psnr),
        mean_ssim: mean(|r| r.ssim),
        mean_baseline_psnr: mean(|r| r.baseline_psnr),
        mean_baseline_ssim: mean(|r| r.baseline_ssim),
        skipped: data.skipped.len(),
        rows,
    })
}
