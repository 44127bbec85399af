//! Training loop, warm-restart cosine schedule, F1 metrics and k-fold
//! cross-validation.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use paddyspec_nn::{AdamState, Element, Mode, ResNet18, ResNetConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{class_weights_from_counts, FoldAssignment, LABELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::spectral::FusedSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Rgb,
    #[default]
    RgbNdvi,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Rgb => 3,
            InputMode::RgbNdvi => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Rgb => "rgb",
            InputMode::RgbNdvi => "rgb_ndvi",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(InputMode::Rgb),
            "rgb_ndvi" => Ok(InputMode::RgbNdvi),
            _ => Err(Error::Config(format!("input mode must be rgb or rgb_ndvi, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_epochs: f64,
    pub input_mode: InputMode,
    /// Taken from the pipeline seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Side length the fused samples are resized to.
    pub image_size: usize,
    /// Overrides the inverse-frequency weights computed from the training folds.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_max: 0.05,
            lr_min: 0.0,
            cycle_epochs: 10.0,
            input_mode: InputMode::RgbNdvi,
            seed: 0,
            image_size: 256,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.cycle_epochs > 0.0) {
            return bad(format!("cycle_epochs must be positive, got {}", self.cycle_epochs));
        }
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return bad(format!("need 0 <= lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max));
        }
        if self.image_size < 32 {
            return bad(format!("image_size must be at least 32, got {}", self.image_size));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts of constant length.
pub fn lr_at(step_epoch: f64, cfg: &TrainConfig) -> f64 {
    let t = step_epoch.rem_euclid(cfg.cycle_epochs);
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t / cfg.cycle_epochs).cos())
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Invalid(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut m = Self::default();
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(Error::Invalid(format!("class index out of range: {t} / {p}")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `2PR / (P + R)`, written as `2TP / (2TP + FP + FN)`; 0 when the class
    /// is neither present nor predicted correctly.
    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.counts[c][c];
        let fp: u64 = (0..NUM_CLASSES).map(|t| self.counts[t][c]).sum::<u64>() - tp;
        let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let denom = 2 * tp + fp + fn_;
        if tp == 0 || denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        }
    }

    pub fn per_class_f1(&self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| self.f1(c))
    }

    pub fn macro_f1(&self) -> f64 {
        self.per_class_f1().iter().sum::<f64>() / NUM_CLASSES as f64
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        correct as f64 / self.total().max(1) as f64
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "true\\pred")?;
        for l in LABELS {
            write!(f, "{:>12}", l.as_str())?;
        }
        for (l, row) in LABELS.iter().zip(&self.counts) {
            write!(f, "\n{:<12}", l.as_str())?;
            for v in row {
                write!(f, "{v:>12}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
}

impl Evaluation {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Self {
            f1: confusion.per_class_f1(),
            macro_f1: confusion.macro_f1(),
            confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub f1: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub confusion: ConfusionMatrix,
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_macro_f1,f1_blast,f1_spot,f1_healthy\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.10e},{:.10e},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.lr, e.train_loss, e.val_macro_f1, e.f1[0], e.f1[1], e.f1[2]
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Network inputs in CHW layout, one per sample, plus labels and ids.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `channels x size x size` values per sample.
    pub inputs: Vec<Vec<f32>>,
    pub channels: usize,
    pub size: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds a set from fused `[R, G, B, NDVI]` samples; `Rgb` keeps the first
    /// three bands.
    pub fn from_fused(items: &[(String, usize, FusedSample)], mode: InputMode) -> Result<Self> {
        let mut set = SampleSet {
            channels: mode.channels(),
            ..Default::default()
        };
        for (id, label, s) in items {
            let img = &s.image;
            if img.width() != img.height() {
                return Err(Error::Invalid(format!("fused sample is {}x{}, expected square", img.width(), img.height()))
                    .in_sample(id));
            }
            if set.inputs.is_empty() {
                set.size = img.width();
            } else if img.width() != set.size {
                return Err(Error::Invalid(format!("fused sample is {0}x{0}, others are {1}x{1}", img.width(), set.size))
                    .in_sample(id));
            }
            let plane = img.width() * img.height();
            let mut chw = vec![0.0f32; set.channels * plane];
            for (i, px) in img.data().chunks_exact(img.channels()).enumerate() {
                for c in 0..set.channels {
                    chw[c * plane + i] = px[c];
                }
            }
            set.ids.push(id.clone());
            set.labels.push(*label);
            set.inputs.push(chw);
        }
        Ok(set)
    }

    pub fn subset(&self, idx: &[usize]) -> SampleSet {
        SampleSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            channels: self.channels,
            size: self.size,
        }
    }

    /// Drops the NDVI channel of a 4-channel set.
    pub fn rgb_only(&self) -> SampleSet {
        if self.channels == 3 {
            return self.clone();
        }
        let keep = 3 * self.size * self.size;
        SampleSet {
            inputs: self.inputs.iter().map(|v| v[..keep].to_vec()).collect(),
            channels: 3,
            ..self.clone()
        }
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn batch<T: Element>(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(idx.len() * self.inputs.first().map_or(0, Vec::len));
        for &i in idx {
            data.extend_from_slice(&self.inputs[i]);
        }
        Ok(Tensor::<f32>::new(&[idx.len(), self.channels, self.size, self.size], data)?.cast())
    }
}

/// Splits a shuffled order into batches; a trailing batch of one sample is
/// merged into the previous one since batch statistics need two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let n = order.len();
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().expect("at least one batch") = &order[start..n];
    }
    out
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    batches(&(0..n).collect::<Vec<_>>(), batch_size).len()
}

/// Eval-mode predictions (argmax, lowest index on ties) and probabilities.
pub fn predict<T: Element>(model: &ResNet18<T>, set: &SampleSet) -> Result<(Vec<usize>, Vec<[f64; NUM_CLASSES]>)> {
    let mut preds = Vec::with_capacity(set.len());
    let mut probs = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(32) {
        let x = set.batch::<T>(chunk)?;
        let (_, p) = model.predict(&x)?;
        for row in p.data().chunks_exact(NUM_CLASSES) {
            let row: [f64; NUM_CLASSES] = std::array::from_fn(|c| Element::to_f64(row[c]));
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if row[c] > row[best] {
                    best = c;
                }
            }
            preds.push(best);
            probs.push(row);
        }
    }
    Ok((preds, probs))
}

pub fn evaluate<T: Element>(model: &ResNet18<T>, set: &SampleSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty sample set".into()));
    }
    let (preds, _) = predict(model, set)?;
    Ok(Evaluation::from_confusion(ConfusionMatrix::from_pairs(&set.labels, &preds)?))
}

/// Called after every epoch with the epoch record; return `false` to stop.
pub type EpochHook<'a, T> = dyn FnMut(&ResNet18<T>, &EpochRecord) -> bool + 'a;

pub struct Trained<T> {
    pub model: ResNet18<T>,
    pub history: RunHistory,
    pub steps: usize,
}

/// One optimizer step on the given batch; returns the batch loss.
fn train_step<T: Element>(
    model: &mut ResNet18<T>,
    adam: &mut AdamState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &[f64; NUM_CLASSES],
    lr: f64,
) -> Result<f64> {
    let (mut grads, params, stats, loss) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let f = model.forward_tape(&mut tape, xv, Mode::Train)?;
        let l = tape.weighted_cross_entropy(f.logits, labels, weights)?;
        let loss = Element::to_f64(tape.value(l).data()[0]);
        (tape.backward(l)?, f.params, f.batch_stats, loss)
    };
    model.store_gradients(&mut grads, &params)?;
    model.apply_batch_stats(&stats);
    adam.step(&mut model.parameters_mut(), lr)?;
    Ok(loss)
}

/// Trains a fresh model on `train`; `val` (if any) is scored after every epoch.
pub fn train<T: Element>(
    cfg: &TrainConfig,
    train: &SampleSet,
    val: Option<&SampleSet>,
    hook: Option<&mut EpochHook<'_, T>>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Dataset(format!("training needs at least 2 samples, got {}", train.len())));
    }
    if train.channels != cfg.input_mode.channels() {
        return Err(Error::Config(format!(
            "input mode {} expects {} channels, samples have {}",
            cfg.input_mode,
            cfg.input_mode.channels(),
            train.channels
        )));
    }
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => class_weights_from_counts(&train.counts())?,
    };
    let mut model = ResNet18::<T>::new(ResNetConfig {
        in_channels: train.channels,
        num_classes: NUM_CLASSES,
        seed: cfg.seed,
    })?;
    let mut adam = AdamState::<T>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let spe = steps_per_epoch(train.len(), cfg.batch_size);
    let mut history = RunHistory::default();
    let mut hook = hook;
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let first_lr = lr_at(epoch as f64, cfg);
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let lr = lr_at(epoch as f64 + b as f64 / spe as f64, cfg);
            let x = train.batch::<T>(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let loss = train_step(&mut model, &mut adam, &x, &labels, &weights, lr)?;
            if !loss.is_finite() {
                return Err(Error::Invalid(format!("training loss became {loss} at epoch {epoch}")));
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            steps += 1;
        }
        let (val_macro_f1, f1) = match val {
            Some(v) if !v.is_empty() => {
                let e = evaluate(&model, v)?;
                history.confusion = e.confusion;
                (e.macro_f1, e.f1)
            }
            _ => (f64::NAN, [f64::NAN; NUM_CLASSES]),
        };
        let record = EpochRecord {
            epoch,
            lr: first_lr,
            train_loss: loss_sum / seen as f64,
            val_macro_f1,
            f1,
        };
        log::info!(
            "epoch {epoch} lr {first_lr:.5} loss {:.5} val macro F1 {val_macro_f1:.4}",
            record.train_loss
        );
        history.epochs.push(record);
        if let Some(h) = hook.as_mut() {
            if !h(&model, history.epochs.last().expect("just pushed")) {
                break;
            }
        }
    }
    Ok(Trained { model, history, steps })
}

pub struct FoldResult<T> {
    pub fold: usize,
    pub model: ResNet18<T>,
    pub history: RunHistory,
    pub evaluation: Evaluation,
}

/// Trains on every fold but `fold` and validates on `fold`.
pub fn train_fold<T: Element>(
    cfg: &TrainConfig,
    data: &SampleSet,
    folds: &FoldAssignment,
    fold: usize,
) -> Result<FoldResult<T>> {
    if fold >= folds.k {
        return Err(Error::Config(format!("fold {fold} out of range for k = {}", folds.k)));
    }
    if folds.folds.len() != data.len() {
        return Err(Error::Dataset(format!(
            "fold assignment covers {} samples, data has {}",
            folds.folds.len(),
            data.len()
        )));
    }
    let train_set = data.subset(&folds.complement(fold));
    let val_set = data.subset(&folds.indices(fold));
    let trained = train::<T>(cfg, &train_set, Some(&val_set), None)?;
    let evaluation = evaluate(&trained.model, &val_set)?;
    Ok(FoldResult {
        fold,
        model: trained.model,
        history: trained.history,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub mode: InputMode,
    pub folds: Vec<Evaluation>,
}

impl ModeReport {
    pub fn mean_macro_f1(&self) -> f64 {
        self.folds.iter().map(|e| e.macro_f1).sum::<f64>() / self.folds.len().max(1) as f64
    }

    /// Per-class F1 averaged over folds.
    pub fn mean_f1(&self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| self.folds.iter().map(|e| e.f1[c]).sum::<f64>() / self.folds.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub modes: Vec<ModeReport>,
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}-fold cross-validation, seed {} (F1, mean over folds)", self.k, self.seed)?;
        write!(f, "{:<14}", "class")?;
        for m in &self.modes {
            write!(f, "{:>12}", m.mode.as_str())?;
        }
        for (c, l) in LABELS.iter().enumerate() {
            write!(f, "\n{:<14}", l.as_str())?;
            for m in &self.modes {
                write!(f, "{:>12.4}", m.mean_f1()[c])?;
            }
        }
        write!(f, "\n{:<14}", "macro")?;
        for m in &self.modes {
            write!(f, "{:>12.4}", m.mean_macro_f1())?;
        }
        for fold in 0..self.k {
            write!(f, "\n{:<14}", format!("fold {fold}"))?;
            for m in &self.modes {
                match m.folds.get(fold) {
                    Some(e) => write!(f, "{:>12.4}", e.macro_f1)?,
                    None => write!(f, "{:>12}", "-")?,
                }
            }
        }
        Ok(())
    }
}

/// Paired protocol: every mode sees the same folds and seed. `data` must be a
/// 4-channel set; the RGB mode drops its NDVI channel.
pub fn cross_validate<T: Element>(
    cfg: &TrainConfig,
    data: &SampleSet,
    folds: &FoldAssignment,
    modes: &[InputMode],
) -> Result<CvReport> {
    if data.channels != 4 {
        return Err(Error::Config("cross-validation needs fused 4-channel samples".into()));
    }
    let mut out = Vec::new();
    for &mode in modes {
        let set = match mode {
            InputMode::Rgb => data.rgb_only(),
            InputMode::RgbNdvi => data.clone(),
        };
        let mode_cfg = TrainConfig {
            input_mode: mode,
            ..cfg.clone()
        };
        let mut evals = Vec::with_capacity(folds.k);
        for fold in 0..folds.k {
            let r = train_fold::<T>(&mode_cfg, &set, folds, fold)?;
            log::info!("{mode} fold {fold}: macro F1 {:.4}", r.evaluation.macro_f1);
            evals.push(r.evaluation);
        }
        out.push(ModeReport { mode, folds: evals });
    }
    Ok(CvReport {
        k: folds.k,
        seed: folds.seed,
        modes: out,
    })
}

/// Checkpoint with the training config and input mode in its metadata.
pub fn save_checkpoint<T: Element>(model: &ResNet18<T>, cfg: &TrainConfig, extra: &[(&str, String)], path: &Path) -> Result<()> {
    let mut meta = vec![
        ("input_mode".to_string(), cfg.input_mode.to_string()),
        ("epochs".to_string(), cfg.epochs.to_string()),
        ("image_size".to_string(), cfg.image_size.to_string()),
    ];
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    model.save(path, &meta).map_err(|e| Error::format(path, e.to_string()))
}

pub struct LoadedCheckpoint {
    pub model: ResNet18<f32>,
    pub input_mode: InputMode,
    /// Side length the model was trained at, when recorded.
    pub image_size: Option<usize>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (model, archive) = ResNet18::<f32>::load(path).map_err(|e| Error::format(path, e.to_string()))?;
    let input_mode = match archive.meta("input_mode") {
        Some(m) => m.parse()?,
        None if model.config.in_channels == 3 => InputMode::Rgb,
        None => InputMode::RgbNdvi,
    };
    if input_mode.channels() != model.config.in_channels {
        return Err(Error::format(path, "checkpoint input mode disagrees with its stem width"));
    }
    let image_size = archive.meta("image_size").and_then(|v| v.parse().ok());
    Ok(LoadedCheckpoint {
        model,
        input_mode,
        image_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0.0, &cfg), 0.05);
        assert!((lr_at(5.0, &cfg) - 0.025).abs() < 1e-15);
        assert_eq!(lr_at(10.0, &cfg), 0.05);
        assert!(lr_at(9.999, &cfg) < 1e-8);
        assert_eq!(lr_at(0.0, &TrainConfig { lr_max: 0.0, ..cfg.clone() }), 0.0);
    }

    #[test]
    fn worked_confusion() {
        let m = ConfusionMatrix {
            counts: [[8, 2, 0], [1, 9, 0], [0, 0, 10]],
        };
        let f = m.per_class_f1();
        assert!((f[0] - 16.0 / 19.0).abs() < 1e-15);
        assert!((f[1] - 18.0 / 21.0).abs() < 1e-15);
        assert_eq!(f[2], 1.0);
        assert!((m.macro_f1() - 0.8997).abs() < 1e-3);
        assert_eq!(m.total(), 30);
    }

    #[test]
    fn never_predicted_class_scores_zero() {
        let m = ConfusionMatrix::from_pairs(&[0, 1, 2, 2], &[0, 1, 1, 0]).unwrap();
        assert_eq!(m.f1(2), 0.0);
        let empty = ConfusionMatrix::from_pairs(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(empty.per_class_f1(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..33).collect();
        let b = batches(&order, 16);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![16, 17]);
        assert_eq!(batches(&order[..32], 16).len(), 2);
        assert_eq!(batches(&order[..1], 16).len(), 1);
        assert_eq!(steps_per_epoch(48, 16), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { cycle_epochs: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { class_weights: Some([1.0, 0.0, 1.0]), ..Default::default() }.validate().is_err());
        assert_eq!("rgb".parse::<InputMode>().unwrap(), InputMode::Rgb);
        assert!("nir".parse::<InputMode>().is_err());
    }
}
