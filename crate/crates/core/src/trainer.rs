//! Mini-batch training of every trainable group under the joint objective.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{LossRecord, ModelCheckpoint, TrainingMeta};
use crate::diffnum::{adam_step, finite_diff_check, AdamConfig, AdamState, GradCheckOptions, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::inference::accuracy;
use crate::model::{batch_tensor, Model, ModelConfig};
use crate::objective::{total_terms, LossWeights};
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::signal::IqFrame;

/// Largest seed the TOML header of a checkpoint can carry.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Seed for batch order.
    pub seed: u64,
    pub loss: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stops after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: 1e-4,
            max_epochs: 200,
            batch_size: 64,
            seed: 0,
            loss: LossWeights::default(),
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if self.seed > MAX_SEED {
            return Err(Error::Config(format!("seed must be at most {MAX_SEED}")));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub step: usize,
    pub losses: LossRecord,
    pub val_accuracy: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} total={:.6} cls={:.6} spr={:.6} div={:.6}",
            self.epoch, self.step, self.losses.total, self.losses.cls, self.losses.spr, self.losses.div
        )?;
        match self.val_accuracy {
            Some(a) => write!(f, " val_acc={a:.4}"),
            None => write!(f, " val_acc=-"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub last: ModelCheckpoint<T>,
    /// Highest validation accuracy, earliest epoch on ties; `None` without a validation set.
    pub best: Option<ModelCheckpoint<T>>,
    pub history: Vec<EpochLog>,
}

/// Runs one optimizer step on `batch` and returns its loss terms.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[&IqFrame],
    weights: &LossWeights,
    adam: &AdamConfig,
    state: &mut AdamState<T>,
) -> Result<LossRecord> {
    let labels: Vec<usize> = batch.iter().map(|f| f.device).collect();
    let mut tape = Tape::new();
    let x = tape.constant(batch_tensor(batch)?);
    let out = model.forward(&mut tape, x)?;
    let terms = total_terms(&mut tape, out.logits, &labels, out.activations, weights)?;
    let rec = LossRecord {
        total: tape.value(terms.total).item().as_f64(),
        cls: tape.value(terms.cls).item().as_f64(),
        spr: tape.value(terms.spr).item().as_f64(),
        div: tape.value(terms.div).item().as_f64(),
    };
    for (name, v) in [("L_cls", rec.cls), ("L_spr", rec.spr), ("L_div", rec.div), ("total", rec.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v} at optimizer step {}", state.step + 1)));
        }
    }
    let grads = tape.backward(terms.total)?;
    model.store.zero_grads();
    tape.write_param_grads(&grads, &mut model.store)?;
    adam_step(&mut model.store, adam, state)?;
    model.store.zero_grads();
    Ok(rec)
}

/// Finite-difference check of the full training loss with respect to the
/// model tensors selected by `opts`.
pub fn loss_gradcheck<T: Scalar>(
    model: &mut Model<T>,
    batch: &[&IqFrame],
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let labels: Vec<usize> = batch.iter().map(|f| f.device).collect();
    let x = batch_tensor::<T>(batch)?;
    let shell = model.clone();
    let report = finite_diff_check(
        |tape, store| {
            let xv = tape.constant(x.clone());
            let out = shell.forward_with(tape, store, xv)?;
            Ok(total_terms(tape, out.logits, &labels, out.activations, weights)?.total)
        },
        &mut model.store,
        opts,
    );
    model.store.zero_grads();
    report
}

/// Shuffled batch order of `n` items for `epoch` (0-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// Initializes a model from `model_cfg` and trains it on `train`.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[IqFrame],
    val: &[IqFrame],
    log: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if model_cfg.seed > MAX_SEED {
        return Err(Error::Config(format!("model seed must be at most {MAX_SEED}")));
    }
    let model = Model::<T>::init(model_cfg, train)?;
    train_model(model, cfg, train, val, log)
}

/// Continues training an existing model.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    train: &[IqFrame],
    val: &[IqFrame],
    mut log: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Insufficient("training set is empty".into()));
    }
    let classes = model.config.classes;
    if let Some(f) = train.iter().chain(val).find(|f| f.device >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {classes} classes",
            f.device
        )));
    }
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let val_refs: Vec<&IqFrame> = val.iter().collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, ModelCheckpoint<T>)> = None;
    let meta = |epoch, step, losses, val_accuracy| TrainingMeta {
        epoch,
        step,
        seed: cfg.seed,
        losses,
        val_accuracy,
        lambda1: Some(cfg.loss.lambda1),
        lambda2: Some(cfg.loss.lambda2),
    };
    let mut step = 0usize;
    let mut last = LossRecord::default();
    let mut epochs_done = 0;
    let mut last_val = None;
    'epochs: for epoch in 0..cfg.max_epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sum = LossRecord::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&IqFrame> = chunk.iter().map(|&i| &train[i]).collect();
            let r = train_step(&mut model, &batch, &cfg.loss, &adam, &mut state)?;
            sum.total += r.total;
            sum.cls += r.cls;
            sum.spr += r.spr;
            sum.div += r.div;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let n = batches as f64;
        last = LossRecord {
            total: sum.total / n,
            cls: sum.cls / n,
            spr: sum.spr / n,
            div: sum.div / n,
        };
        let val_accuracy = if val_refs.is_empty() {
            None
        } else {
            Some(accuracy(&model, &val_refs)?)
        };
        epochs_done = epoch + 1;
        last_val = val_accuracy;
        let entry = EpochLog {
            epoch: epochs_done,
            step,
            losses: last,
            val_accuracy,
        };
        log(&entry);
        history.push(entry);
        if let Some(a) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, ModelCheckpoint::new(model.clone(), meta(epochs_done, step, last, Some(a)))));
            }
        }
    }
    Ok(TrainOutcome {
        last: ModelCheckpoint::new(model, meta(epochs_done, step, last, last_val)),
        best: best.map(|(_, c)| c),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::embedder::EmbedderConfig;
    use crate::objective::diversity_loss;
    use crate::shapelet::ShapeletConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frame_length: 32,
            classes: 2,
            d_l: 4,
            embedder: EmbedderConfig {
                hidden_channels: 4,
                ..EmbedderConfig::default()
            },
            backbone: BackboneConfig {
                layer_count: 1,
                d_h: 8,
                head_count: 2,
                ff_width: 16,
                max_seq: 16,
                ..BackboneConfig::default()
            },
            shapelets: ShapeletConfig {
                groups: vec![(3, 4), (3, 8)],
                ..ShapeletConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn constant_frames(n: usize) -> Vec<IqFrame> {
        (0..n)
            .map(|k| {
                let c = k % 2;
                let amp = if c == 0 { 0.3f32 } else { 1.2 };
                let jitter = 0.01 * (k / 2) as f32;
                IqFrame::new(&[amp + jitter; 32], &[-amp; 32], c, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn separable_toy_is_learned() {
        let frames = constant_frames(16);
        let cfg = TrainConfig {
            lr: 1e-2,
            max_epochs: 20,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&tiny(), &cfg, &frames, &frames, |_| {}).unwrap();
        assert_eq!(out.history.len(), 20);
        let refs: Vec<&IqFrame> = frames.iter().collect();
        assert_eq!(accuracy(&out.last.model, &refs).unwrap(), 1.0);
        assert_eq!(out.best.unwrap().meta.val_accuracy, Some(1.0));
    }

    #[test]
    fn same_seed_same_checkpoint_bytes() {
        let frames = constant_frames(12);
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train::<f64>(&tiny(), &cfg, &frames, &[], |_| {}).unwrap();
        let b = train::<f64>(&tiny(), &cfg, &frames, &[], |_| {}).unwrap();
        assert!(a.best.is_none());
        assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
        let c = train::<f64>(&tiny(), &TrainConfig { seed: 4, ..cfg }, &frames, &[], |_| {}).unwrap();
        assert_ne!(a.last.to_bytes().unwrap(), c.last.to_bytes().unwrap());
    }

    #[test]
    fn frozen_groups_never_move() {
        let frames = constant_frames(8);
        let model = Model::<f64>::init(&tiny(), &frames).unwrap();
        let before = model.store.clone();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            max_steps: Some(6),
            ..TrainConfig::default()
        };
        let out = train_model(model, &cfg, &frames, &[], |_| {}).unwrap();
        assert_eq!(out.last.meta.step, 6);
        assert_eq!(out.last.meta.epoch, 3);
        for (id, p) in out.last.model.store.iter() {
            let was = before.value(id).data();
            if out.last.model.store.is_trainable(id) {
                assert_ne!(p.value.data(), was, "{} did not train", p.name);
            } else {
                assert_eq!(p.value.data(), was, "{} moved", p.name);
            }
        }
    }

    #[test]
    fn strong_diversity_weight_lowers_diversity() {
        let frames = constant_frames(16);
        let run = |lambda2| {
            let cfg = TrainConfig {
                lr: 1e-2,
                max_epochs: 8,
                batch_size: 8,
                loss: LossWeights { lambda1: 0.0, lambda2 },
                ..TrainConfig::default()
            };
            let m = train::<f64>(&tiny(), &cfg, &frames, &[], |_| {}).unwrap().last.model;
            let refs: Vec<&IqFrame> = frames.iter().collect();
            diversity_loss(&m.forward_joint(&refs).unwrap().activations).unwrap()
        };
        assert!(run(10.0) < run(0.0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let frames = constant_frames(4);
        let cfg = TrainConfig::default();
        assert!(train::<f64>(&tiny(), &TrainConfig { lr: 0.0, ..cfg.clone() }, &frames, &[], |_| {}).is_err());
        assert!(train::<f64>(&tiny(), &TrainConfig { batch_size: 0, ..cfg.clone() }, &frames, &[], |_| {}).is_err());
        let mut bad = frames.clone();
        bad[0] = IqFrame::new(&[0.0; 32], &[0.0; 32], 5, 0).unwrap();
        assert!(matches!(train::<f64>(&tiny(), &cfg, &bad, &[], |_| {}), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nonfinite_loss_names_the_term() {
        let frames = constant_frames(4);
        let mut model = Model::<f64>::init(&tiny(), &frames).unwrap();
        let id = model.store.id("output_head.bias").unwrap();
        model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
        let err = train_model(model, &TrainConfig::default(), &frames, &[], |_| {}).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("L_cls")), "{err}");
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let frames = crate::model::tests::frames(6);
        let refs: Vec<&IqFrame> = frames[..3].iter().collect();
        // shapelets drawn from the checked frames sit at the kink of the norm
        let mut model = Model::<f64>::init(&crate::model::tests::desk(), &frames[3..]).unwrap();
        let weights = LossWeights { lambda1: 0.1, lambda2: 0.3 };
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(6),
            trainable_only: true,
            ..GradCheckOptions::default()
        };
        let r = loss_gradcheck(&mut model, &refs, &weights, &opts).unwrap();
        let trainable = model.store.iter().filter(|(id, _)| model.store.is_trainable(*id)).count();
        assert_eq!(r.tensors.len(), trainable);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn log_line_format() {
        let e = EpochLog {
            epoch: 2,
            step: 10,
            losses: LossRecord {
                total: 1.0,
                cls: 0.5,
                spr: 0.25,
                div: 0.125,
            },
            val_accuracy: Some(0.5),
        };
        assert_eq!(
            e.to_string(),
            "epoch=2 step=10 total=1.000000 cls=0.500000 spr=0.250000 div=0.125000 val_acc=0.5000"
        );
    }
}
