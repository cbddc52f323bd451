use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::config::{lr_at_step, TrainConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::{stratified_kfold, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::{
    forward, predict_log_proba, Checkpoint, CheckpointMeta, ModelParams, ModelSpec, Mode, BN_MOMENTUM,
};
use crate::os_loss::{os_penalty, partition, total_loss, weighted_cross_entropy};

const EVAL_CHUNK: usize = 64;

// Random stream tags; every draw in a run comes from `seed` plus one of these.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

fn rng_for(seed: u64, tag: u64, fold: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | ((fold as u64) << 24) | epoch as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Sample-weighted mean penalty over the epoch; absent without the OS term.
    pub os_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub os: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub report: MetricsReport,
    pub epochs: Vec<EpochRecord>,
}

pub struct FoldOutcome {
    pub result: FoldResult,
    pub steps: Vec<StepRecord>,
    pub checkpoint: Checkpoint,
}

/// Per-fold log files under a run directory.
struct FoldLog {
    dir: PathBuf,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl FoldLog {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut steps = create(&dir.join("steps.tsv"))?;
        let mut epochs = create(&dir.join("epochs.tsv"))?;
        let p = dir.join("steps.tsv");
        writeln!(steps, "step\tlr\tce\tos\ttotal").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("epochs.tsv");
        writeln!(epochs, "epoch\tlr\ttrain_loss\ttrain_accuracy\tval_loss\tval_accuracy\tos_mean")
            .map_err(|e| Error::io(&p, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            steps,
            epochs,
        })
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.steps, "{}\t{}\t{}\t{}\t{}", r.step, r.lr, r.ce, opt(r.os), r.total)
            .map_err(|e| Error::io(self.dir.join("steps.tsv"), e))
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(
            self.epochs,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_accuracy,
            r.val_loss,
            r.val_accuracy,
            opt(r.os_mean)
        )
        .map_err(|e| Error::io(self.dir.join("epochs.tsv"), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.steps
            .flush()
            .and_then(|_| self.epochs.flush())
            .map_err(|e| Error::io(&self.dir, e))
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

/// Eval-mode log-probabilities for `indices`, in order.
pub fn predict_indices(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (batch, _) = ds.batch::<ChaCha8Rng>(chunk, None)?;
        out.extend(predict_log_proba(spec, params, batch)?);
    }
    Ok(out)
}

/// Weighted mean negative log-likelihood and accuracy of log-probabilities.
fn score(logp: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> (f64, f64) {
    let n = labels.len() as f64;
    let loss = logp
        .iter()
        .zip(labels)
        .map(|(row, &y)| -weights[y] * row[y])
        .sum::<f64>()
        / n;
    let hits = logp.iter().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    (loss, hits as f64 / n)
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step: step as usize,
            detail: format!("non-finite {op}"),
        },
        other => other,
    }
}

/// Trains one fold from scratch and evaluates it on the fold's test split.
///
/// With `log_dir`, writes `steps.tsv`, `epochs.tsv`, `checkpoint.bin` and
/// `metrics.json` there. On divergence the parameters from before the failed
/// step are checkpointed and `Error::Diverged` is returned.
pub fn train_fold(
    ds: &Dataset,
    split: &FoldSplit,
    fold: usize,
    cfg: &TrainConfig,
    log_dir: Option<&Path>,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if ds.side != cfg.profile.image_side {
        return Err(Error::Config(format!(
            "dataset decoded at {} pixels, profile expects {}",
            ds.side, cfg.profile.image_side
        )));
    }
    let num_classes = ds.classes.len();
    let spec = ModelSpec::darkcovidnet(num_classes, cfg.model_os_k(), cfg.profile)?;
    if cfg.os_enabled {
        cfg.os.validate(spec.flatten_len()?)?;
    }
    let weights = cfg.class_weights(num_classes)?;
    let meta = CheckpointMeta {
        num_classes,
        os_k: cfg.model_os_k(),
        seed: cfg.seed,
        profile: cfg.profile,
        class_names: ds.classes.clone(),
        running_stats_updated: false,
    };

    let init_seed = rng_for(cfg.seed, STREAM_INIT, fold, 0).next_u64();
    let mut params = ModelParams::<f32>::init(&spec, init_seed)?;
    let names = params.trainable_names();
    let mut adam = AdamState::new(params.named_tensors().into_iter().filter_map(|(n, t)| {
        names.contains(&n).then_some(t)
    }));
    let hyper = cfg.adam();
    let mut log = log_dir.map(FoldLog::open).transpose()?;
    let test_labels: Vec<usize> = split.test.iter().map(|&i| ds.samples[i].label).collect();

    let save_ckpt = |params: &ModelParams<f32>| -> Result<Checkpoint> {
        let ck = Checkpoint {
            meta: CheckpointMeta {
                running_stats_updated: params.running_stats_updated,
                ..meta.clone()
            },
            params: params.clone(),
        };
        if let Some(dir) = log_dir {
            ck.save(&dir.join("checkpoint.bin"))?;
        }
        Ok(ck)
    };

    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng_for(cfg.seed, STREAM_SHUFFLE, fold, epoch));
        let mut aug_rng = rng_for(cfg.seed, STREAM_AUGMENT, fold, epoch);
        let (mut loss_sum, mut os_sum, mut hits, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let lr_epoch_start = lr_at_step(step, cfg);

        for batch_idx in order.chunks(cfg.batch_size) {
            // batch statistics are undefined for a single sample
            if batch_idx.len() < 2 {
                continue;
            }
            let lr = lr_at_step(step, cfg);
            let aug = cfg.augment.as_ref().map(|a| (a, &mut aug_rng));
            let (x, labels) = ds.batch(batch_idx, aug)?;

            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape, true);
            let input = tape.constant(x);
            let out = forward(&spec, &params, &bound, &mut tape, input, Mode::Train)?;
            let outcome = (|| -> Result<_> {
                let ce = weighted_cross_entropy(&mut tape, out.logits, &labels, &weights)?;
                if cfg.os_enabled {
                    let fm = partition(&mut tape, out.features, cfg.os.k)?;
                    let os = os_penalty(&mut tape, &fm)?;
                    let total = total_loss(&mut tape, ce, os, cfg.os.lambda)?;
                    Ok((ce, Some(os), total))
                } else {
                    Ok((ce, None, ce))
                }
            })();
            let (ce, os, total) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    save_ckpt(&params)?;
                    return Err(diverged(step, e));
                }
            };
            tape.backward(total)?;

            let vars = bound.trainable_vars();
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            if let Err(e) = adam_step(&mut params.trainable_mut(), &grad_refs, &names, &mut adam, lr, &hyper) {
                save_ckpt(&params)?;
                return Err(e);
            }
            params.apply_moments(&out.bn_moments, BN_MOMENTUM)?;

            let rec = StepRecord {
                step,
                lr,
                ce: tape.value(ce).item() as f64,
                os: os.map(|v| tape.value(v).item() as f64),
                total: tape.value(total).item() as f64,
            };
            let b = batch_idx.len();
            let logits = tape.value(out.logits).data();
            hits += logits
                .chunks(num_classes)
                .zip(&labels)
                .filter(|(row, &y)| {
                    let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                    argmax(&row) == y
                })
                .count();
            seen += b;
            loss_sum += rec.total * b as f64;
            os_sum += rec.os.unwrap_or(0.0) * b as f64;
            if let Some(l) = log.as_mut() {
                l.step(&rec)?;
            }
            steps.push(rec);
            step += 1;
        }

        let logp = predict_indices(&spec, &params, ds, &split.test)?;
        let (val_loss, val_accuracy) = score(&logp, &test_labels, &weights);
        let seen_f = seen.max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr: lr_epoch_start,
            train_loss: loss_sum / seen_f,
            train_accuracy: hits as f64 / seen_f,
            val_loss,
            val_accuracy,
            os_mean: cfg.os_enabled.then_some(os_sum / seen_f),
        };
        info!(
            "fold {fold} epoch {}/{}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}{}",
            rec.epoch,
            cfg.epochs,
            rec.train_loss,
            rec.train_accuracy,
            rec.val_loss,
            rec.val_accuracy,
            rec.os_mean.map(|o| format!(", os {o:.4}")).unwrap_or_default()
        );
        if let Some(l) = log.as_mut() {
            l.epoch(&rec)?;
        }
        epochs.push(rec);
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }

    let logp = predict_indices(&spec, &params, ds, &split.test)?;
    let probs: Vec<Vec<f64>> = logp
        .iter()
        .map(|r| r.iter().map(|v| v.exp()).collect())
        .collect();
    let report = MetricsReport::from_probs(&probs, &test_labels, &ds.classes)?;
    let checkpoint = save_ckpt(&params)?;
    let result = FoldResult {
        fold,
        train_size: split.train.len(),
        test_size: split.test.len(),
        report,
        epochs,
    };
    if let Some(dir) = log_dir {
        write_json(&dir.join("metrics.json"), &result)?;
    }
    Ok(FoldOutcome {
        result,
        steps,
        checkpoint,
    })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub ece: MeanStd,
    pub oe: MeanStd,
    pub brier: MeanStd,
}

impl Aggregate {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let col = |f: &dyn Fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            accuracy: col(&|r| r.accuracy),
            precision: col(&|r| r.precision),
            recall: col(&|r| r.recall),
            f1: col(&|r| r.f1),
            ece: col(&|r| r.calibration.ece),
            oe: col(&|r| r.calibration.oe),
            brier: col(&|r| r.calibration.brier),
        }
    }
}

/// Contents of a run directory's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub k: Option<usize>,
    pub lambda: f64,
    pub augment: bool,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Stratified cross-validation. Folds train in parallel and are written to
/// `run_dir/fold_<i>/`; `only_fold` restricts the run to a single fold.
pub fn cross_validate(
    ds: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    only_fold: Option<usize>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let splits = stratified_kfold(&ds.labels(), cfg.folds, cfg.seed)?;
    let chosen: Vec<usize> = match only_fold {
        Some(f) if f >= cfg.folds => {
            return Err(Error::Config(format!("fold {f} out of range for {} folds", cfg.folds)))
        }
        Some(f) => vec![f],
        None => (0..cfg.folds).collect(),
    };
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    }
    let results = chosen
        .par_iter()
        .map(|&f| {
            let dir = run_dir.map(|d| d.join(format!("fold_{f}")));
            train_fold(ds, &splits[f], f, cfg, dir.as_deref()).map(|o| o.result)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<&MetricsReport> = results.iter().map(|r| &r.report).collect();
    let summary = RunSummary {
        label: cfg.label(),
        k: cfg.model_os_k(),
        lambda: if cfg.os_enabled { cfg.os.lambda } else { 1.0 },
        augment: cfg.augment.is_some(),
        seed: cfg.seed,
        aggregate: Aggregate::of(&reports),
        folds: results,
    };
    if let Some(dir) = run_dir {
        write_json(&dir.join("metrics.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K,
    Lambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: RunSummary,
}

/// One cross-validation per value of `axis`, each in `out/<axis>_<value>/` when `out` is given.
pub fn sweep(
    ds: &Dataset,
    axis: SweepAxis,
    values: &[f64],
    base: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let mut cfgs = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::K => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("k = {v} is not a positive integer")));
                }
                cfg.os.k = v as usize;
                cfg.os_enabled = true;
                let spec = ModelSpec::darkcovidnet(ds.classes.len(), Some(cfg.os.k), cfg.profile)?;
                cfg.os.validate(spec.flatten_len()?)?;
            }
            SweepAxis::Lambda => {
                cfg.os.lambda = v;
                cfg.validate()?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("lambda = {v} outside [0, 1]")));
                }
            }
        }
        cfgs.push((v, cfg));
    }
    cfgs.into_iter()
        .map(|(value, cfg)| {
            let name = match axis {
                SweepAxis::K => format!("k_{value}"),
                SweepAxis::Lambda => format!("lambda_{value}"),
            };
            let dir = out.map(|o| o.join(name));
            let summary = cross_validate(ds, &cfg, dir.as_deref(), None)?;
            Ok(SweepRow { value, summary })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let m = MeanStd::of(&[0.8; 5]);
        assert_eq!((m.mean, m.std), (0.8, 0.0));
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m.mean, 3.0);
        assert!((m.std - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn score_matches_definition() {
        let logp = vec![vec![0.5f64.ln(), 0.5f64.ln()], vec![0.9f64.ln(), 0.1f64.ln()]];
        let (loss, acc) = score(&logp, &[0, 1], &[4.0, 1.0]);
        assert!((loss - (4.0 * 0.5f64.ln().abs() + 0.1f64.ln().abs()) / 2.0).abs() < 1e-12);
        assert_eq!(acc, 0.5);
    }
}
