//! Training loop with per-epoch checkpoints and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskseg_core::model::Model;
use riskseg_core::nn::params::{splitmix64, stream_seed};
use riskseg_core::synthdata::{Batch, SampleRecord};

use crate::checkpoint::{Checkpoint, EpochLog};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{HarnessError, Result};
use crate::eval::evaluate;
use crate::optim::{poly_lr, AdamW};

pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    Ok(Model::new(&cfg.model_config()?, cfg.seed, cfg.dtype()?)?)
}

/// Builds the model described by the checkpoint's config and loads its weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let model = build_model(&ckpt.config)?;
    let expected: Vec<&String> = model.store.iter().map(|(k, _)| k).collect();
    let stored: Vec<&String> = ckpt.params.keys().collect();
    if expected != stored {
        return Err(HarnessError::Config(format!(
            "checkpoint holds {} tensors but the model has {}; parameter names differ",
            stored.len(),
            expected.len()
        )));
    }
    for (name, t) in &ckpt.params {
        model.store.assign(name, t)?;
    }
    Ok(model)
}

pub fn snapshot(model: &Model) -> BTreeMap<String, Tensor> {
    model.store.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach().copy().unwrap())).collect()
}

/// Sample order for an epoch; depends only on the run seed and epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(stream_seed(seed, "shuffle") ^ epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

/// Dropout stream for one optimizer step, so resumed runs match uninterrupted ones.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(stream_seed(seed, "dropout") ^ step as u64))
}

pub fn batch_of(records: &[SampleRecord], idx: &[usize], cfg: &RunConfig) -> Result<Batch> {
    let refs: Vec<&SampleRecord> = idx.iter().map(|&i| &records[i]).collect();
    Ok(Batch::from_records(&refs, cfg.dtype()?)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `last.ckpt`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many epochs in total (for tests and interrupted runs).
    pub stop_after: Option<usize>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Trains `cfg` on `data`. A non-finite loss aborts the run with
/// [`HarnessError::NonFinite`]; the checkpoint from the last finished epoch
/// stays on disk.
pub fn train(cfg: &RunConfig, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut ckpt = Checkpoint {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        epochs_done: 0,
        global_step: 0,
        log: Vec::new(),
        params: BTreeMap::new(),
        optimizer: BTreeMap::new(),
    };
    if let Some(r) = &opts.resume {
        if r.config_hash != cfg.hash() {
            return Err(HarnessError::HashMismatch {
                path: PathBuf::from("<resume>"),
                stored: r.config_hash.clone(),
                expected: cfg.hash(),
            });
        }
        let m = model_from_checkpoint(r)?;
        for (name, t) in snapshot(&m) {
            model.store.assign(&name, &t)?;
        }
        r.restore_optimizer(&mut opt);
        ckpt.epochs_done = r.epochs_done;
        ckpt.global_step = r.global_step;
        ckpt.log = r.log.clone();
    }
    let records = &data.train.records;
    let per_epoch = records.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let last_epoch = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let path = opts.out_dir.as_ref().map(|d| d.join(LAST_CHECKPOINT));

    for epoch in ckpt.epochs_done..last_epoch {
        let t0 = Instant::now();
        let order = epoch_order(records.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let step = ckpt.global_step;
            lr = poly_lr(cfg.lr, step, total_steps, cfg.poly_power);
            let batch = batch_of(records, idx, cfg)?;
            let mut rng = step_rng(cfg.seed, step);
            let out = model.forward(&batch.images, &batch.tokens, Some(&mut rng))?;
            let losses = model.losses(&out, &batch.masks, step).map_err(|e| match e {
                riskseg_core::Error::NonFinite { what } => HarnessError::NonFinite {
                    epoch,
                    step: b,
                    detail: what.to_string(),
                },
                e => e.into(),
            })?;
            let total = scalar(&losses.total)?;
            let grads = losses.total.backward()?;
            opt.step(&model.store, &grads, lr)?;
            loss_sum += total * idx.len() as f64;
            ckpt.global_step += 1;
        }
        let train_loss = loss_sum / records.len() as f64;
        let val = evaluate(&model, &data.val.records, cfg.batch_size, false)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_miou: val.miou(),
            lr,
        };
        log::info!(
            "epoch {:>3}/{}  train_loss {:.4}  val_miou {:.4}  lr {:.2e}  ({:.1}s)",
            entry.epoch,
            cfg.epochs,
            entry.train_loss,
            entry.val_miou,
            lr,
            t0.elapsed().as_secs_f64()
        );
        ckpt.log.push(entry);
        ckpt.epochs_done = epoch + 1;
        if let Some(p) = &path {
            ckpt.params = snapshot(&model);
            ckpt.optimizer = opt.state.clone();
            ckpt.save(p)?;
        }
    }
    ckpt.params = snapshot(&model);
    ckpt.optimizer = opt.state.clone();
    Ok(TrainOutcome { model, checkpoint: ckpt, path })
}

/// Resumes from `path` and trains to the configured number of epochs.
pub fn resume(path: &Path, data: &Dataset, force: bool) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(path, None, force)?;
    let cfg = ckpt.config.clone();
    train(
        &cfg,
        data,
        TrainOptions {
            out_dir: path.parent().map(Path::to_path_buf),
            resume: Some(ckpt),
            stop_after: None,
        },
    )
}
