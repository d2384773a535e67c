//! Train/test split, mini-batch Adam training with early stopping, and
//! argmax prediction.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Model};
pub use crate::dataset::Sample;
use crate::encoding::{self, IntensityImage, MembershipConfig, NegationConfig};
use crate::metrics::{Counts, LabelMask, MetricsReport};
use crate::tensor::{Adam, AdamConfig, Graph, Mode, Scalar, Tensor};
use crate::{derive_seed, Error, Result};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const DROPOUT_SALT: u64 = 0x4452_4f50;
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EarlyStop {
    Off,
    Patience { patience: usize, min_delta: f64 },
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop::Patience {
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

/// Input transform for the IFS arm: membership then negation, fed as the
/// three channels `(mu, nu, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeConfig {
    pub membership: MembershipConfig,
    pub negation: NegationConfig,
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.membership.validate()?;
        self.negation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop: EarlyStop,
    pub batch_size: usize,
    pub lr: f64,
    pub split_fraction: f64,
    pub seed: u64,
    pub encode: Option<EncodeConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            early_stop: EarlyStop::default(),
            batch_size: 2,
            lr: 1e-3,
            split_fraction: 0.8,
            seed: 0,
            encode: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if let EarlyStop::Patience {
            patience,
            min_delta,
        } = self.early_stop
        {
            if patience == 0 || min_delta.is_nan() || min_delta < 0.0 {
                return Err(Error::InvalidConfig(
                    "early stopping needs patience >= 1 and min_delta >= 0".into(),
                ));
            }
        }
        if let Some(enc) = &self.encode {
            enc.validate()?;
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.encode.is_some() {
            3
        } else {
            1
        }
    }
}

/// Train/test index partition: a seeded shuffle, with the first
/// `round(fraction * n)` indices going to training.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction {fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * n as f64).round() as usize;
    let test = idx.split_off(k);
    Ok((idx, test))
}

pub fn split(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (tr, te) = split_indices(samples.len(), fraction, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&tr), pick(&te)))
}

/// Network input for one image in CHW order: the `(mu, nu, pi)` planes when
/// `encode` is set, otherwise the min-max normalised image.
pub fn prepare_input(image: &IntensityImage, encode: Option<&EncodeConfig>) -> Result<Vec<f64>> {
    match encode {
        Some(e) => {
            let ifs = encoding::encode(image, &e.membership, &e.negation)?;
            Ok([ifs.mu, ifs.nu, ifs.pi].concat())
        }
        None => encoding::membership(image, &MembershipConfig::default()),
    }
}

fn one_hot<T: Scalar>(label: &LabelMask, out: &mut [T]) {
    let hw = label.len();
    for (p, &c) in label.data.iter().enumerate() {
        out[c as usize * hw + p] = T::one();
    }
}

/// Inputs and targets prepared once, indexed like the sample slice.
struct Prepared<T> {
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    inputs: Vec<Vec<T>>,
    targets: Vec<Vec<T>>,
    labels: Vec<LabelMask>,
}

impl<T: Scalar> Prepared<T> {
    fn new(samples: &[Sample], arch: &ArchConfig, encode: Option<&EncodeConfig>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (width, height) = (first.image.width(), first.image.height());
        arch.check_input(height, width)?;
        let k = arch.num_classes;
        let channels = if encode.is_some() { 3 } else { 1 };
        if channels != arch.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model has {} input channels but the input transform yields {channels}",
                arch.in_channels
            )));
        }
        let prepared = samples
            .par_iter()
            .map(|s| {
                s.validate(k)?;
                if (s.image.width(), s.image.height()) != (width, height) {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {} is {}x{}, expected {width}x{height}",
                        s.id,
                        s.image.width(),
                        s.image.height()
                    )));
                }
                let x = prepare_input(&s.image, encode)?;
                let mut t = vec![T::zero(); k * width * height];
                one_hot(&s.label, &mut t);
                Ok((x.into_iter().map(T::of).collect(), t))
            })
            .collect::<Result<Vec<(Vec<T>, Vec<T>)>>>()?;
        let (inputs, targets) = prepared.into_iter().unzip();
        Ok(Prepared {
            channels,
            height,
            width,
            k,
            inputs,
            targets,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
        })
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let gather = |src: &[Vec<T>], c: usize| {
            let data = idx.iter().flat_map(|&i| src[i].iter().copied()).collect();
            Tensor::new(&[idx.len(), c, self.height, self.width], data).expect("batch shape")
        };
        (
            gather(&self.inputs, self.channels),
            gather(&self.targets, self.k),
        )
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ac: f64,
    pub val_dc: f64,
    pub val_iou: f64,
    /// Optimizer steps taken during this epoch.
    #[serde(skip)]
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_ac,val_dc,val_iou";

    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.epochs {
            wr.serialize(e)?;
        }
        wr.flush()
            .map_err(|e| Error::io(Path::new("<epoch log>"), e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<EpochRecord>> {
        let mut rd = csv::Reader::from_reader(r);
        Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Mean cross-entropy of the final output and pooled metrics over a set.
struct Evaluation {
    loss: f64,
    report: MetricsReport,
}

fn evaluate_prepared<T: Scalar>(model: &mut Model<T>, data: &Prepared<T>) -> Result<Evaluation> {
    let n = data.inputs.len();
    let mut counts = Counts::new(data.k);
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, t) = data.batch(chunk);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, _) = model.forward(&mut g, xv, Mode::Eval, 0)?;
        let ce = g.softmax_cross_entropy(out.logits, &t)?;
        loss_sum += g.value(ce).data()[0].as_f64() * chunk.len() as f64;
        let preds = argmax_masks(g.value(out.logits))?;
        for (p, &i) in preds.iter().zip(chunk) {
            counts.add(p, &data.labels[i])?;
        }
    }
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        report: counts.report(),
    })
}

/// Trains `model` on `train` and monitors `val` once per epoch.
///
/// Each epoch reshuffles the training order from a seed derived from
/// `(cfg.seed, epoch)`; the last incomplete batch is kept. With early
/// stopping, training halts after `patience` epochs without a val-loss
/// improvement larger than `min_delta`, and the best parameters are
/// restored. `observer` sees each record as it is produced.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = model.config().clone();
    let tr = Prepared::<T>::new(train, &arch, cfg.encode.as_ref())?;
    let va = Prepared::<T>::new(val, &arch, cfg.encode.as_ref())?;
    if (tr.height, tr.width) != (va.height, va.width) {
        return Err(Error::ShapeMismatch(format!(
            "train images are {}x{}, val images {}x{}",
            tr.width, tr.height, va.width, va.height
        )));
    }

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut log = TrainLog::default();
    let mut best: Option<(f64, crate::arch::ModelState<T>)> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SHUFFLE_SALT, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t) = tr.batch(chunk);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let seed = derive_seed(cfg.seed ^ DROPOUT_SALT, step);
            let (out, vars) = model.forward(&mut g, xv, Mode::Train, seed)?;
            let loss = model.loss(&mut g, &out, &t)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, step {step}: loss {value}"
                )));
            }
            g.backward(loss)?;
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate_grads(&g, &vars);
            let (values, grads) = params.values_and_grads_mut();
            adam.step(values, grads);
            loss_sum += value * chunk.len() as f64;
            steps += 1;
            step += 1;
        }
        let eval = evaluate_prepared(model, &va)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: val loss {}",
                eval.loss
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_ac: eval.report.ac,
            val_dc: eval.report.dc,
            val_iou: eval.report.iou,
            steps,
        };
        observer(&record);
        log.epochs.push(record);

        if let EarlyStop::Patience {
            patience,
            min_delta,
        } = cfg.early_stop
        {
            let improved = best.as_ref().is_none_or(|(b, _)| eval.loss < b - min_delta);
            if improved {
                best = Some((eval.loss, model.state()));
                log.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        } else {
            log.best_epoch = epoch;
        }
    }
    if let Some((_, state)) = &best {
        model.restore(state);
    }
    Ok(log)
}

pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, train, val, cfg, |_| {})
}

/// Per-pixel argmax over the class axis of `(N, K, H, W)` logits; ties go
/// to the lower class index.
pub fn argmax_masks<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<LabelMask>> {
    let (n, k, h, w) = logits.dims4()?;
    if k > 256 {
        return Err(Error::ShapeMismatch(format!(
            "{k} classes do not fit u8 labels"
        )));
    }
    let hw = h * w;
    let d = logits.data();
    (0..n)
        .map(|b| {
            let base = b * k * hw;
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[base + c * hw + p] > d[base + best * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(w, h, data)
        })
        .collect()
}

pub fn predict<T: Scalar>(
    model: &mut Model<T>,
    image: &IntensityImage,
    encode: Option<&EncodeConfig>,
) -> Result<LabelMask> {
    let c = if encode.is_some() { 3 } else { 1 };
    let x = prepare_input(image, encode)?;
    let x = Tensor::<T>::from_f64(&[1, c, image.height(), image.width()], &x)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (out, _) = model.forward(&mut g, xv, Mode::Eval, 0)?;
    Ok(argmax_masks(g.value(out.logits))?.remove(0))
}

/// Pooled metrics of `model` over a sample set.
pub fn evaluate_model<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    encode: Option<&EncodeConfig>,
) -> Result<MetricsReport> {
    let data = Prepared::<T>::new(samples, &model.config().clone(), encode)?;
    Ok(evaluate_prepared(model, &data)?.report)
}

/// JSON sidecar stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub arch: ArchConfig,
    pub encode: Option<EncodeConfig>,
    /// Split used at training time, so the held-out part can be rebuilt.
    #[serde(default)]
    pub split: Option<SplitInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub fraction: f64,
    pub seed: u64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(
    path: &Path,
    model: &Model<f32>,
    encode: Option<&EncodeConfig>,
    split: Option<SplitInfo>,
) -> Result<()> {
    model.save(path)?;
    let card = ModelCard {
        arch: model.config().clone(),
        encode: encode.copied(),
        split,
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&card)?).map_err(|e| Error::io(&side, e))
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, ModelCard)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let card: ModelCard = serde_json::from_str(&text)?;
    Ok((Model::load(card.arch.clone(), path)?, card))
}
