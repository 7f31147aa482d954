//! Epoch loop: shuffled mini-batches, per-clip gradients merged in a fixed
//! order, optional global-norm clipping, scheduled AdamW, CSV logging and
//! atomic checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Reduction, StpConfig};
use crate::error::{Error, Result};
use crate::evaluation::{MetricsReport, PredictionRecord};
use crate::features::SyntheticClip;
use crate::model::{clip_loss, infer_batch, init_params};
use crate::numerics::io::{read_records, write_records};
use crate::numerics::{Graph, GradMap, ParamStore, Tensor};
use crate::rng::stream_rng;
use crate::training::{learning_rate, AdamW};

pub const CHECKPOINT_FILE: &str = "checkpoint.stpk";
pub const MODEL_FILE: &str = "model.stpk";
const EPOCH_RECORD: &str = "train.epoch";
const PARAM_PREFIX: &str = "param.";

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub lr: f64,
    /// Only filled on evaluation epochs.
    pub train_ao_score: Option<f64>,
}

/// Log file name; ablated runs get their own file.
pub fn log_file_name(cfg: &StpConfig) -> String {
    format!("train_log_{}.csv", cfg.ablation.label())
}

/// Metrics of `store` on `clips`, plus the raw predictions.
pub fn evaluate(
    clips: &[SyntheticClip],
    store: &ParamStore,
    cfg: &StpConfig,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let preds = infer_batch(clips, store, cfg)?;
    let records = clips
        .iter()
        .zip(&preds)
        .flat_map(|(c, p)| p.iter().map(|s| PredictionRecord::new(&c.video_id, s)))
        .collect();
    let pairs: Vec<_> = preds.into_iter().zip(clips).map(|(p, c)| (p, c.ground_truth.clone())).collect();
    let opts = crate::evaluation::AoOptions { allow_reuse: cfg.eval.allow_reuse };
    Ok((MetricsReport::compute(&pairs, cfg.data.classes, opts)?, records))
}

/// Parameters from either a final model file or a training checkpoint,
/// checked against the shapes `cfg` implies.
pub fn load_model(path: &Path, cfg: &StpConfig) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let records = read_records(&mut bytes.as_slice())?;
    let is_checkpoint = records.iter().any(|(n, _)| n == EPOCH_RECORD);
    let expected = init_params(cfg, 0)?;
    let mut store = ParamStore::new();
    for (name, t) in records {
        let path = if is_checkpoint {
            match name.strip_prefix(PARAM_PREFIX) {
                Some(p) => p.to_string(),
                None => continue,
            }
        } else {
            name
        };
        let want = expected
            .value(&path)
            .map_err(|_| Error::Format(format!("parameter `{path}` is not part of this config")))?;
        if want.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter `{path}` has shape {:?}, config expects {:?}",
                t.shape(),
                want.shape()
            )));
        }
        store.insert(path, t);
    }
    if let Some(missing) = expected.paths().find(|p| !store.contains(p)) {
        return Err(Error::Format(format!("model file lacks parameter `{missing}`")));
    }
    Ok(store)
}

pub struct Trainer {
    pub cfg: StpConfig,
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh parameters drawn from the config seed.
    pub fn new(cfg: StpConfig) -> Result<Self> {
        let store = init_params(&cfg, cfg.seed)?;
        let optimizer = AdamW::new(cfg.train.adamw.clone());
        Ok(Self { cfg, store, optimizer, epoch: 0 })
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: StpConfig, checkpoint: &Path) -> Result<Self> {
        let bytes = fs::read(checkpoint)?;
        let records = read_records(&mut bytes.as_slice())?;
        let store = load_model(checkpoint, &cfg)?;
        let epoch = records.iter().find(|(n, _)| n == EPOCH_RECORD).map(|(_, t)| t.item().map(|v| v as usize)).transpose()?;
        let epoch = epoch.ok_or_else(|| Error::Format("checkpoint has no epoch record".into()))?;
        let optimizer = AdamW::from_records(cfg.train.adamw.clone(), &records)?;
        Ok(Self { cfg, store, optimizer, epoch })
    }

    /// Write parameters, optimizer state and epoch; the file is replaced
    /// atomically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let params: Vec<(String, Tensor)> =
            self.store.iter().map(|(k, p)| (format!("{PARAM_PREFIX}{k}"), p.value.clone())).collect();
        let epoch = (EPOCH_RECORD.to_string(), Tensor::scalar(self.epoch as f64));
        let optim = self.optimizer.to_records();
        let all: Vec<(&str, &Tensor)> = params
            .iter()
            .chain(std::iter::once(&epoch))
            .chain(optim.iter())
            .map(|(k, t)| (k.as_str(), t))
            .collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &all)?;
        write_atomic(path, &buf)
    }

    pub fn steps_per_epoch(&self, clips: usize) -> usize {
        clips.div_ceil(self.cfg.train.batch_size)
    }

    /// Schedule horizon in optimizer steps.
    pub fn total_steps(&self, clips: usize) -> u64 {
        (self.steps_per_epoch(clips) * self.cfg.train.epochs) as u64
    }

    fn diverged(&self, reason: impl Into<String>) -> Error {
        Error::Diverged { step: self.optimizer.step as usize, reason: reason.into() }
    }

    /// Loss values and merged gradients of one batch.
    fn batch_gradients(&self, clips: &[SyntheticClip], batch: &[usize]) -> Result<([f64; 3], GradMap)> {
        let per_clip: Vec<Result<([f64; 3], GradMap)>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new();
                let l = clip_loss(&mut g, &clips[i], &self.store, &self.cfg)?;
                let vals = [l.parts.total, l.parts.cls, l.parts.reg].map(|v| g.value(v).data()[0]);
                Ok((vals, g.gradients(l.parts.total)?))
            })
            .collect();
        let scale = match self.cfg.train.reduction {
            Reduction::Mean => 1.0 / batch.len() as f64,
            Reduction::Sum => 1.0,
        };
        let mut losses = [0.0; 3];
        let mut merged = GradMap::new();
        for r in per_clip {
            let (vals, grads) = r.map_err(|e| match e {
                Error::NonFinite { op } => self.diverged(format!("non-finite value in {op}")),
                Error::Module { source, module } if matches!(*source, Error::NonFinite { .. }) => {
                    self.diverged(format!("non-finite value in {module}: {source}"))
                }
                other => other,
            })?;
            for (acc, v) in losses.iter_mut().zip(vals) {
                *acc += v * scale;
            }
            for (path, t) in grads {
                let t = t.map(|v| v * scale);
                match merged.get_mut(&path) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        merged.insert(path, t);
                    }
                }
            }
        }
        Ok((losses, merged))
    }

    /// One optimizer step on `batch`; returns the batch losses.
    fn step(&mut self, clips: &[SyntheticClip], batch: &[usize], total_steps: u64) -> Result<([f64; 3], f64)> {
        let (losses, grads) = self.batch_gradients(clips, batch)?;
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(self.diverged(format!("loss is {}", losses[0])));
        }
        self.store.zero_grads();
        self.store.accumulate_all(&grads)?;
        let norm = self.store.grad_norm();
        if !norm.is_finite() {
            return Err(self.diverged(format!("gradient norm is {norm}")));
        }
        let clip = self.cfg.train.grad_clip;
        if clip > 0.0 && norm > clip {
            let s = clip / norm;
            for (_, p) in self.store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        let t = &self.cfg.train;
        let lr = learning_rate(t.schedule, t.lr, t.power, self.optimizer.step, total_steps);
        self.optimizer.update(&mut self.store, lr);
        Ok((losses, lr))
    }

    /// One pass over `clips` in the epoch's shuffled order. The training-set
    /// AO score is computed when `evaluate` is set.
    pub fn train_epoch(&mut self, clips: &[SyntheticClip], evaluate_now: bool) -> Result<EpochLog> {
        if clips.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let total_steps = self.total_steps(clips.len());
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, "shuffle", self.epoch as u64));
        let mut sums = [0.0; 3];
        let mut lr = 0.0;
        let batches = order.chunks(self.cfg.train.batch_size);
        let n_batches = batches.len() as f64;
        for batch in batches {
            let (losses, step_lr) = self.step(clips, batch, total_steps)?;
            for (s, v) in sums.iter_mut().zip(losses) {
                *s += v / n_batches;
            }
            lr = step_lr;
        }
        self.epoch += 1;
        let train_ao_score = if evaluate_now { Some(evaluate(clips, &self.store, &self.cfg)?.0.ao_score) } else { None };
        let row = EpochLog {
            epoch: self.epoch,
            loss_total: sums[0],
            loss_cls: sums[1],
            loss_reg: sums[2],
            lr,
            train_ao_score,
        };
        log::info!(
            "epoch {} loss {:.6} (cls {:.6}, reg {:.6}) lr {:.3e}{}",
            row.epoch,
            row.loss_total,
            row.loss_cls,
            row.loss_reg,
            row.lr,
            row.train_ao_score.map(|a| format!(" train AO {a:.4}")).unwrap_or_default()
        );
        Ok(row)
    }

    fn is_eval_epoch(&self, epoch: usize) -> bool {
        epoch % self.cfg.train.eval_every == 0 || epoch == self.cfg.train.epochs
    }

    /// Train until `cfg.train.epochs`. With `out_dir`, rows are appended to
    /// the CSV log, checkpoints are written every `checkpoint_every` epochs,
    /// and the final parameters land in [`MODEL_FILE`]. On divergence the
    /// last checkpoint is left untouched.
    pub fn run(&mut self, clips: &[SyntheticClip], out_dir: Option<&Path>) -> Result<Vec<EpochLog>> {
        self.run_until(clips, out_dir, self.cfg.train.epochs)
    }

    /// [`Trainer::run`] that stops after epoch `stop` without changing the
    /// schedule; a checkpoint is always written at the stop.
    pub fn run_until(&mut self, clips: &[SyntheticClip], out_dir: Option<&Path>, stop: usize) -> Result<Vec<EpochLog>> {
        let stop = stop.min(self.cfg.train.epochs);
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(CsvLog::open(&dir.join(log_file_name(&self.cfg)), self.epoch > 0)?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.epoch < stop {
            let eval_now = self.is_eval_epoch(self.epoch + 1);
            let row = self.train_epoch(clips, eval_now)?;
            if let Some(log) = log.as_mut() {
                log.write(&row)?;
            }
            if let Some(dir) = out_dir {
                if self.epoch % self.cfg.train.checkpoint_every == 0 || self.epoch == stop {
                    self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            rows.push(row);
        }
        if let Some(dir) = out_dir.filter(|_| self.epoch == self.cfg.train.epochs) {
            let mut buf = Vec::new();
            let params: Vec<(&str, &Tensor)> = self.store.iter().map(|(k, p)| (k, &p.value)).collect();
            write_records(&mut buf, &params)?;
            write_atomic(&dir.join(MODEL_FILE), &buf)?;
        }
        Ok(rows)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct CsvLog {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if append {
            OpenOptions::new().create(true).append(true).open(path)?
        } else {
            File::create(path)?
        };
        let writer = csv::WriterBuilder::new()
            .has_headers(!(append && exists))
            .from_writer(BufWriter::new(file));
        Ok(Self { writer })
    }

    fn write(&mut self, row: &EpochLog) -> Result<()> {
        self.writer.serialize(row).map_err(|e| Error::Format(format!("log: {e}")))?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::generate_synthetic_dataset;
    use crate::model::tests::tiny_config;

    fn setup(epochs: usize) -> (StpConfig, Vec<SyntheticClip>) {
        let mut cfg = tiny_config();
        cfg.data.clips = 4;
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 2;
        cfg.train.eval_every = 2;
        cfg.train.lr = 5e-3;
        let clips = generate_synthetic_dataset(&cfg.data, 11).unwrap();
        (cfg, clips)
    }

    #[test]
    fn loss_goes_down() {
        let (mut cfg, clips) = setup(30);
        cfg.train.grad_clip = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let rows = t.run(&clips, None).unwrap();
        assert_eq!(rows.len(), 30);
        assert_eq!(t.optimizer.step, 60);
        assert!(rows.last().unwrap().loss_total < 0.5 * rows[0].loss_total, "{rows:?}");
        assert!(rows[1].train_ao_score.is_some() && rows[0].train_ao_score.is_none());
    }

    #[test]
    fn reruns_are_identical() {
        let (cfg, clips) = setup(3);
        let a = Trainer::new(cfg.clone()).unwrap().run(&clips, None).unwrap();
        let b = Trainer::new(cfg).unwrap().run(&clips, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, clips) = setup(4);
        let mut full = Trainer::new(cfg.clone()).unwrap();
        let full_rows = full.run(&clips, None).unwrap();

        let mut first = Trainer::new(cfg.clone()).unwrap();
        let mut rows = vec![first.train_epoch(&clips, false).unwrap(), first.train_epoch(&clips, true).unwrap()];
        first.save_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();

        let mut second = Trainer::resume(cfg, &dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(second.epoch, 2);
        assert_eq!(second.optimizer.step, 4);
        rows.extend(second.run(&clips, None).unwrap());
        assert_eq!(rows, full_rows);
        assert_eq!(second.store, full.store);
    }

    #[test]
    fn run_writes_log_checkpoint_and_model() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, clips) = setup(2);
        cfg.ablation.causal_mask = false;
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&clips, Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join("train_log_no_causal_mask.csv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "epoch,loss_total,loss_cls,loss_reg,lr,train_ao_score");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(',') && !lines[2].ends_with(','));
        let model = crate::numerics::io::load_params(&dir.path().join(MODEL_FILE)).unwrap();
        assert_eq!(model.num_scalars(), t.store.num_scalars());
        let from_checkpoint = load_model(&dir.path().join(CHECKPOINT_FILE), &t.cfg).unwrap();
        assert_eq!(from_checkpoint, model);
        let loaded = load_model(&dir.path().join(MODEL_FILE), &t.cfg).unwrap();
        assert!(loaded.iter().zip(t.store.iter()).all(|(a, b)| a.0 == b.0 && a.1.value == b.1.value));
    }

    #[test]
    fn divergence_is_reported_and_checkpoint_kept() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, clips) = setup(1);
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&clips, Some(dir.path())).unwrap();
        let before = fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        t.cfg.train.epochs = 2;
        t.store.value_mut("decoder.cls.weight").unwrap().data_mut()[0] = f64::NAN;
        let err = t.run(&clips, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert_eq!(fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(), before);
    }

    #[test]
    fn resume_rejects_foreign_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _) = setup(1);
        let t = Trainer::new(cfg.clone()).unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        t.save_checkpoint(&path).unwrap();
        let mut other = cfg;
        other.encoder.dim = 8;
        other.sync();
        assert!(Trainer::resume(other, &path).is_err());
    }
}
