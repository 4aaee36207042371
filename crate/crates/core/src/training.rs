//! Loss, SNR sampling and the staged training loop.

use crate::channel::SnrDb;
use crate::checkpoint::{parameter_hash, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{eval_rate_vs_snr, EvalOptions};
use crate::model::{JsccModel, ModelKind, StepInputs};
use crate::nn::Module;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const CURVE_FILE: &str = "curve.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn stage_checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.ckpt")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean squared error per pixel.
    pub reconstruction: f64,
    /// Batch mean of the number of active selective groups.
    pub efficiency: f64,
    pub weighted_efficiency: f64,
}

/// Mean per-pixel MSE plus `alpha` times the batch-mean mask sum.
///
/// `mask` is `[B, G_s]` and may hold relaxed values.
pub fn loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &Tensor<T>, alpha: f64) -> Result<LossBreakdown> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} does not match input {:?}",
            y.shape(),
            x.shape()
        )));
    }
    if x.is_empty() || mask.shape().len() != 2 || mask.dim(0) != x.dim(0) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match a batch of {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("alpha must be non-negative, got {alpha}")));
    }
    let sq: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64_lossy();
            d * d
        })
        .sum();
    let reconstruction = sq / x.len() as f64;
    let efficiency = mask.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / mask.dim(0) as f64;
    let weighted_efficiency = alpha * efficiency;
    Ok(LossBreakdown {
        total: reconstruction + weighted_efficiency,
        reconstruction,
        efficiency,
        weighted_efficiency,
    })
}

/// One uniform draw from `range` (dB).
pub fn sample_training_snr(rng: &mut impl Rng, range: [f64; 2]) -> SnrDb {
    let [lo, hi] = range;
    let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    SnrDb::new(v).expect("finite range")
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1-based.
    pub stage: usize,
    pub lr: f64,
    pub tau: f64,
    pub train_loss: f64,
    pub train_mse: f64,
    /// Mean active selective groups.
    pub train_rate: f64,
    /// `(snr_db, psnr, cpp)` when this epoch was evaluated.
    pub eval: Option<Vec<(f64, f64, f64)>>,
}

/// Hashes of the frozen parameters around a frozen stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeCheck {
    pub stage: usize,
    pub before: String,
    pub after: String,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for checkpoints, the curve and the manifest.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many epochs in total (for resumable partial runs).
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}


pub struct TrainOutcome {
    pub model: JsccModel<f32>,
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub freeze_checks: Vec<FreezeCheck>,
}

/// Provenance record written next to every run's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub kind: Option<ModelKind>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub epochs_completed: Option<usize>,
    pub resumed_from_epoch: Option<usize>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, kind: Option<ModelKind>) -> Self {
        let now = unix_now();
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            kind,
            started_unix: now,
            finished_unix: now,
            epochs_completed: None,
            resumed_from_epoch: None,
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Stage (1-based) that `epoch` (0-based) falls into.
pub fn stage_of(config: &ExperimentConfig, epoch: usize) -> usize {
    let mut end = 0;
    for (i, s) in config.stages.iter().enumerate() {
        end += s.epochs;
        if epoch < end {
            return i + 1;
        }
    }
    config.stages.len()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0xA5A5_0000)
}

/// Runs every configured stage and returns the final model.
pub fn train(
    config: &ExperimentConfig,
    kind: ModelKind,
    train_data: &Dataset,
    eval_data: &Dataset,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let [c, h, w] = train_data.image_shape();
    if c != 3 || h != config.image_height || w != config.image_width {
        return Err(Error::Data(format!(
            "dataset images are {c}x{h}x{w}, config expects 3x{}x{}",
            config.image_height, config.image_width
        )));
    }
    let command = match kind {
        ModelKind::Adaptive => "train",
        ModelKind::Fixed { .. } => "train-baseline",
    };
    let mut manifest = RunManifest::new(command, config, Some(kind));
    let (mut model, mut adam, start_epoch, mut provenance) = match opts.resume.take() {
        Some(ck) => {
            if ck.header.config != *config || ck.header.kind != kind {
                return Err(Error::Checkpoint(
                    "resume checkpoint was trained under a different config or model kind".into(),
                ));
            }
            (ck.model()?, ck.optimizer(), ck.header.epoch, ck.header.provenance.clone())
        }
        None => (JsccModel::<f32>::new(config, kind, config.seed)?, Adam::new(), 0, Vec::new()),
    };
    let resumed_from = (start_epoch > 0).then_some(start_epoch);

    let mut curve = match (&opts.out_dir, resumed_from) {
        (Some(dir), Some(e)) if dir.join(CURVE_FILE).exists() => {
            let mut rows = read_curve(&dir.join(CURVE_FILE))?;
            rows.retain(|r| r.epoch < e);
            rows
        }
        _ => Vec::new(),
    };
    let total = config.total_epochs();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let adaptive = matches!(kind, ModelKind::Adaptive);
    // The rate term is a constant for fixed-rate models.
    let alpha = if adaptive { config.alpha } else { 0.0 };
    let eval_opts = EvalOptions {
        mode: config.eval_decision,
        seed: config.seed,
        batch_size: config.batch_size,
    };
    let eval_subset = (eval_data.len() > config.eval_subset)
        .then(|| eval_data.subset(&(0..config.eval_subset).collect::<Vec<_>>()));
    let eval_set = eval_subset.as_ref().unwrap_or(eval_data);
    let mut freeze_checks = Vec::new();
    let mut freeze_before: Option<String> = None;

    for epoch in start_epoch..stop {
        let stage = stage_of(config, epoch);
        let sc = &config.stages[stage - 1];
        let frozen = sc.freeze_source_and_policy;
        let stage_start = config.stages[..stage - 1].iter().map(|s| s.epochs).sum::<usize>();
        if frozen && (epoch == stage_start || freeze_before.is_none()) {
            freeze_before = Some(parameter_hash(&model, &JsccModel::<f32>::is_source_or_policy));
        }
        let tau = config.temperature.at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut mse_sum, mut rate_sum) = (0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let images = train_data.batch(idx);
            let snrs: Vec<f64> = idx
                .iter()
                .map(|_| sample_training_snr(&mut rng, config.snr_train_db).db())
                .collect();
            model.zero_grad();
            let stats = model.accumulate_gradients(
                &StepInputs {
                    images: &images,
                    snr_db: &snrs,
                    tau,
                    alpha,
                    freeze_source_and_policy: frozen,
                },
                &mut rng,
            )?;
            let trainable = |name: &str| !(frozen && JsccModel::<f32>::is_source_or_policy(name));
            adam.step(&mut model, sc.learning_rate, &trainable);
            let n = idx.len() as f64;
            loss_sum += stats.loss * n;
            mse_sum += stats.mse * n;
            rate_sum += stats.active_selective * n;
        }
        let n = train_data.len() as f64;
        let last_epoch = epoch + 1 == total;
        let evaluate = !config.eval_snrs_db.is_empty()
            && !eval_set.is_empty()
            && (last_epoch || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0));
        let eval = if evaluate {
            let records = eval_rate_vs_snr(&model, &config.eval_snrs_db, eval_set, &eval_opts)?;
            Some(records.iter().map(|r| (r.snr_db, r.avg_psnr_db, r.avg_cpp)).collect())
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            stage,
            lr: sc.learning_rate,
            tau,
            train_loss: loss_sum / n,
            train_mse: mse_sum / n,
            train_rate: rate_sum / n,
            eval,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        curve.push(record);

        let stage_end = stage_start + sc.epochs;
        let ends_stage = epoch + 1 == stage_end;
        if ends_stage {
            provenance.push(format!(
                "stage {stage}: epochs {}..{} lr {} {}",
                stage_start,
                stage_end,
                sc.learning_rate,
                if frozen { "source encoder and policy frozen" } else { "all parameters trained" }
            ));
            if frozen {
                freeze_checks.push(FreezeCheck {
                    stage,
                    before: freeze_before.take().unwrap_or_default(),
                    after: parameter_hash(&model, &JsccModel::<f32>::is_source_or_policy),
                });
            }
        }
        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint::from_model(&model, Some(&adam), epoch + 1, stage, provenance.clone());
            ck.save(&dir.join(LATEST_CHECKPOINT))?;
            if ends_stage {
                ck.save(&dir.join(stage_checkpoint_name(stage)))?;
            }
            write_curve(&dir.join(CURVE_FILE), &config.eval_snrs_db, &curve)?;
        }
    }

    let epoch_done = stop.max(start_epoch);
    let checkpoint = Checkpoint::from_model(
        &model,
        Some(&adam),
        epoch_done,
        if epoch_done == 0 { 0 } else { stage_of(config, epoch_done - 1) },
        provenance,
    );
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        manifest.epochs_completed = Some(epoch_done);
        manifest.resumed_from_epoch = resumed_from;
        manifest.finish(dir)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        curve,
        freeze_checks,
    })
}

/// Trains a model whose mask always keeps `active_groups` selective groups.
pub fn train_fixed_rate_baseline(
    config: &ExperimentConfig,
    active_groups: usize,
    train_data: &Dataset,
    eval_data: &Dataset,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if active_groups > config.g_selective {
        return Err(Error::Argument(format!(
            "active groups {active_groups} outside 0..={}",
            config.g_selective
        )));
    }
    train(config, ModelKind::Fixed { active_groups }, train_data, eval_data, opts)
}

fn curve_header(snrs: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "stage", "lr", "tau", "train_loss", "train_mse", "train_rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(snrs.iter().map(|s| format!("eval_psnr@{s}")));
    h.extend(snrs.iter().map(|s| format!("eval_cpp@{s}")));
    h
}

pub fn write_curve(path: &Path, snrs: &[f64], rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(curve_header(snrs))?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.stage.to_string(),
            r.lr.to_string(),
            r.tau.to_string(),
            r.train_loss.to_string(),
            r.train_mse.to_string(),
            r.train_rate.to_string(),
        ];
        match &r.eval {
            Some(e) => {
                rec.extend(e.iter().map(|(_, p, _)| p.to_string()));
                rec.extend(e.iter().map(|(_, _, c)| c.to_string()));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 2 * snrs.len())),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let snrs: Vec<f64> = header
        .iter()
        .filter_map(|h| h.strip_prefix("eval_psnr@"))
        .map(|s| s.parse().map_err(|_| Error::Data(format!("bad curve column {s}"))))
        .collect::<Result<_>>()?;
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Data(format!("bad curve value '{s}'"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let k = snrs.len();
        let eval = if rec.get(7).is_some_and(|s| !s.is_empty()) {
            let mut e = Vec::with_capacity(k);
            for (i, &snr) in snrs.iter().enumerate() {
                e.push((snr, num(&rec[7 + i])?, num(&rec[7 + k + i])?));
            }
            Some(e)
        } else {
            None
        };
        rows.push(EpochRecord {
            epoch: num(&rec[0])? as usize,
            stage: num(&rec[1])? as usize,
            lr: num(&rec[2])?,
            tau: num(&rec[3])?,
            train_loss: num(&rec[4])?,
            train_mse: num(&rec[5])?,
            train_rate: num(&rec[6])?,
            eval,
        });
    }
    Ok(rows)
}
