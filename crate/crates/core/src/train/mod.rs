//! Losses, the Adam optimizer, the epoch loop with validation and
//! resumable checkpoints, and majority-vote ensembling.

mod loss;

pub use loss::{bce_loss, dice_loss, total_loss, DICE_GUARD, Q_MIN};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice_labels;
use crate::model::{Checkpoint, Model, NamedArray};
use crate::nn::{Mode, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::volume::{crop, normalize, pad_to_multiple, Mask, PadRecord, Volume};

fn default_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    700
}
fn default_batch() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its stored
/// gradient. Nothing is modified if any gradient is missing or non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.params.len() {
        return Err(Error::contract("optimizer state does not match the parameters"));
    }
    for p in &params.params {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("parameter '{}' has no gradient", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::contract(format!("gradient of '{}' has the wrong shape", p.name)));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("gradient of parameter '{}' contains {bad}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for ((p, m), v) in params.params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.as_ref().expect("checked above").data();
        for (((w, mi), vi), gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// A training or validation item: normalized, padded image and target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `(1, 1, d, h, w)` padded intensities.
    pub image: Tensor,
    /// `(1, 1, d, h, w)` padded ground truth.
    pub target: Tensor,
    pub mask: Mask,
    pub pad: PadRecord,
}

impl Sample {
    pub fn new(id: impl Into<String>, volume: &Volume, mask: &Mask, multiple: usize) -> Result<Self> {
        let id = id.into();
        if volume.dims != mask.dims {
            return Err(Error::contract(format!(
                "sample {id}: image dims {:?} differ from label dims {:?}",
                volume.dims, mask.dims
            )));
        }
        let (img, pad) = pad_to_multiple(&normalize(volume), multiple);
        let (lab, _) = pad_to_multiple(mask, multiple);
        let [d, h, w] = img.dims;
        let shape = vec![1, 1, d, h, w];
        Ok(Sample {
            image: Tensor::new(shape.clone(), img.into_data())?,
            target: Tensor::new(shape, lab.data().iter().map(|&v| f64::from(v)).collect())?,
            mask: mask.clone(),
            pad,
            id,
        })
    }
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        if p.shape() != first {
            return Err(Error::contract(format!(
                "batch items differ in shape: {:?} vs {first:?}",
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = first.to_vec();
    shape[0] = parts.len();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_dice";

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.train_loss, cell(self.val_loss), cell(self.val_dice))
    }
}

/// Snapshot of the model with the lowest validation loss so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_loss: f64,
    state: Vec<NamedArray>,
}

/// Mean total loss and mean argmax Dice of `model` over `samples`, in eval
/// mode. The mode is restored afterwards.
pub fn evaluate(model: &mut Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let result = (|| {
        let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
        for s in samples {
            let tape = Tape::inference();
            let x = tape.constant(s.image.clone());
            let (q, _) = model.forward(&tape, x)?;
            let loss = tape.value(total_loss(&tape, q, &s.target)?)?.item()?;
            let probs = crate::model::ProbabilityVolume((*tape.value(q)?).clone());
            let padded = Mask::new(s.pad.padded_dims(), s.mask.spacing, probs.labels(0)?)?;
            let pred = crop(&padded, &s.pad)?;
            loss_sum += loss;
            dice_sum += dice_labels(pred.data(), s.mask.data());
        }
        let n = samples.len() as f64;
        Ok((loss_sum / n, dice_sum / n))
    })();
    model.set_mode(prev);
    result
}

/// The training loop state; everything needed to continue a run
/// bit-exactly is in [`Trainer::checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    adam: AdamState,
    cfg: TrainConfig,
    history: Vec<EpochRecord>,
    best: Option<BestSnapshot>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            adam: AdamState::new(model.params()),
            model,
            cfg,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.cfg.epochs
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    /// Model with the lowest validation loss; the last model when there has
    /// been no validation.
    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            let ckpt = Checkpoint {
                config: m.config().clone(),
                meta: BTreeMap::new(),
                arrays: b.state.clone(),
            };
            m.load_state(&ckpt, "")?;
        }
        Ok(m)
    }

    /// Training order for an epoch: a ChaCha8 shuffle keyed by the seed and
    /// the epoch number.
    fn order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    fn step(&mut self, image: Tensor, target: &Tensor) -> Result<f64> {
        self.model.set_mode(Mode::Train);
        let tape = Tape::new();
        let x = tape.constant(image);
        let (q, vars) = self.model.forward(&tape, x)?;
        let loss = total_loss(&tape, q, target)?;
        let value = tape.value(loss)?.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss is {value}")));
        }
        let mut grads = tape.backward(loss)?;
        self.model.params_mut().set_grads(&vars, &mut grads)?;
        adam_step(self.model.params_mut(), &mut self.adam, &self.cfg)?;
        self.model.params_mut().zero_grads();
        Ok(value)
    }

    /// Runs one epoch over `train` and evaluates on `val`.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let epoch = self.epochs_done() + 1;
        let with_epoch = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
            other => other,
        };
        let order = self.order(epoch, train.len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].image).collect();
            let targets: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].target).collect();
            let (x, t) = (stack(&images)?, stack(&targets)?);
            total += self.step(x, &t).map_err(with_epoch)?;
            batches += 1;
        }
        let (val_loss, val_dice) = if val.is_empty() {
            (None, None)
        } else {
            let (l, d) = evaluate(&mut self.model, val).map_err(with_epoch)?;
            if !l.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}: validation loss is {l}")));
            }
            (Some(l), Some(d))
        };
        if let Some(l) = val_loss {
            if self.best.as_ref().is_none_or(|b| l < b.val_loss) {
                self.best = Some(BestSnapshot {
                    epoch,
                    val_loss: l,
                    state: self.model.state_arrays(""),
                });
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss,
            val_dice,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn train(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let rec = self.run_epoch(train, val)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    /// Full resumable state: model, optimizer moments, history and best
    /// snapshot.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.meta.insert("epochs_done".into(), self.epochs_done() as u64);
        ckpt.meta.insert("adam_t".into(), self.adam.t);
        ckpt.meta.insert("seed".into(), self.cfg.seed);
        let names: Vec<String> = self.model.params().params.iter().map(|p| p.name.clone()).collect();
        for (moments, tag) in [(&self.adam.m, "adam.m."), (&self.adam.v, "adam.v.")] {
            for (name, vals) in names.iter().zip(moments) {
                ckpt.arrays.push(NamedArray {
                    name: format!("{tag}{name}"),
                    shape: vec![vals.len()],
                    data: vals.clone(),
                });
            }
        }
        let col = |f: &dyn Fn(&EpochRecord) -> f64| self.history.iter().map(f).collect::<Vec<f64>>();
        for (name, data) in [
            ("history.train_loss", col(&|r| r.train_loss)),
            ("history.val_loss", col(&|r| r.val_loss.unwrap_or(f64::NAN))),
            ("history.val_dice", col(&|r| r.val_dice.unwrap_or(f64::NAN))),
        ] {
            ckpt.arrays.push(NamedArray {
                name: name.into(),
                shape: vec![data.len()],
                data,
            });
        }
        if let Some(b) = &self.best {
            ckpt.meta.insert("best_epoch".into(), b.epoch as u64);
            ckpt.arrays.push(NamedArray {
                name: "best.val_loss".into(),
                shape: vec![1],
                data: vec![b.val_loss],
            });
            ckpt.arrays.extend(b.state.iter().map(|a| NamedArray {
                name: format!("best.{}", a.name),
                ..a.clone()
            }));
        }
        ckpt
    }

    /// Restores a trainer written by [`Trainer::checkpoint`]. `cfg` may
    /// raise the epoch count but must otherwise match the run.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let meta = |k: &str| {
            ckpt.meta
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("checkpoint has no training state ('{k}' missing)")))
        };
        if meta("seed")? != cfg.seed {
            return Err(Error::Config("resume seed differs from the checkpoint".into()));
        }
        let model = Model::from_checkpoint(ckpt)?;
        let array = |name: &str| {
            ckpt.array(name)
                .map(|a| a.data.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks array '{name}'")))
        };
        let mut adam = AdamState::new(model.params());
        adam.t = meta("adam_t")?;
        for (i, p) in model.params().params.iter().enumerate() {
            adam.m[i] = array(&format!("adam.m.{}", p.name))?;
            adam.v[i] = array(&format!("adam.v.{}", p.name))?;
            if adam.m[i].len() != p.value.len() || adam.v[i].len() != p.value.len() {
                return Err(Error::Config(format!("optimizer state for '{}' has the wrong size", p.name)));
            }
        }
        let done = meta("epochs_done")? as usize;
        let (tl, vl, vd) = (
            array("history.train_loss")?,
            array("history.val_loss")?,
            array("history.val_dice")?,
        );
        if tl.len() != done || vl.len() != done || vd.len() != done {
            return Err(Error::Config("history length does not match epochs_done".into()));
        }
        let finite = |v: f64| (!v.is_nan()).then_some(v);
        let history = (0..done)
            .map(|i| EpochRecord {
                epoch: i + 1,
                train_loss: tl[i],
                val_loss: finite(vl[i]),
                val_dice: finite(vd[i]),
            })
            .collect();
        let best = match ckpt.meta.get("best_epoch") {
            None => None,
            Some(&epoch) => Some(BestSnapshot {
                epoch: epoch as usize,
                val_loss: array("best.val_loss")?[0],
                state: model
                    .state_arrays("")
                    .into_iter()
                    .map(|a| {
                        let src = ckpt
                            .array(&format!("best.{}", a.name))
                            .ok_or_else(|| Error::Config(format!("checkpoint lacks best snapshot of '{}'", a.name)))?;
                        Ok(NamedArray {
                            data: src.data.clone(),
                            ..a
                        })
                    })
                    .collect::<Result<_>>()?,
            }),
        };
        Ok(Trainer {
            model,
            adam,
            cfg,
            history,
            best,
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub last: Model,
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` for `cfg.epochs` epochs.
pub fn train(model: Model, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.train(train_set, val_set, |_, _| Ok(()))?;
    Ok(TrainedModel {
        best: t.best_model()?,
        best_epoch: t.best().map(|b| b.epoch),
        history: t.history.clone(),
        last: t.model,
    })
}

/// Voxelwise majority of exactly three masks on the same grid.
pub fn majority_vote(masks: &[Mask]) -> Result<Mask> {
    let [a, b, c] = masks else {
        return Err(Error::contract(format!("majority vote needs 3 masks, got {}", masks.len())));
    };
    if !a.same_grid(b) || !a.same_grid(c) {
        return Err(Error::contract("majority vote over masks on different grids"));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((x, y), z)| u8::from(x + y + z >= 2))
        .collect();
    Ok(Mask::new(a.dims, a.spacing, data)?.with_orientation(a.orientation.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameter;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore {
        ParamStore {
            params: vec![Parameter {
                name: "w".into(),
                value: Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
                grad: Some(Tensor::new(vec![grads.len()], grads.to_vec()).unwrap()),
            }],
            stats: Vec::new(),
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = store(&[1.0, 1.0, 1.0, 1.0], &[3.0, -0.02, 250.0, 0.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &cfg).unwrap();
        let d: Vec<f64> = p.params[0].value.data().iter().map(|w| w - 1.0).collect();
        assert!((d[0] + cfg.learning_rate).abs() < 1e-9);
        assert!((d[1] - cfg.learning_rate).abs() < 1e-9);
        assert!((d[2] + cfg.learning_rate).abs() < 1e-9);
        assert_eq!(d[3], 0.0);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = store(&[1.0, 2.0], &[0.5, f64::NAN]);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &mut s, &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains("'w'")));
        assert_eq!(p.params[0].value.data(), &[1.0, 2.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 5}"#).unwrap();
        assert_eq!(parsed, TrainConfig { epochs: 5, ..Default::default() });
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
    }

    fn m(bits: &[u8]) -> Mask {
        Mask::new([1, 1, bits.len()], [1.0; 3], bits.to_vec()).unwrap()
    }

    #[test]
    fn majority_vote_rules() {
        let v = majority_vote(&[m(&[1, 1, 0, 0]), m(&[1, 0, 1, 0]), m(&[0, 0, 1, 0])]).unwrap();
        assert_eq!(v.data(), &[1, 0, 1, 0]);
        let x = m(&[1, 0, 1]);
        assert_eq!(majority_vote(&[x.clone(), x.clone(), m(&[0, 1, 0])]).unwrap(), x);
        assert!(majority_vote(&[x.clone(), x.clone()]).is_err());
        assert!(majority_vote(&[x.clone(), x.clone(), m(&[1, 0])]).is_err());
    }
}
