//! Minibatch training with Adam and best-validation selection.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{split_by_scene, Dataset, Sample, SceneImage};
use crate::error::{Error, Result};
use crate::fusion::{combine_losses, confidence_loss, gaze_loss, loss_on_tape, LossConfig, LossTerms};
use crate::model::{
    bound_leaves, encode_scene_bound, forward_bound, forward_with_scene, same_scene, BaselineKind, Mode, Model, ModelDims,
    ModelParams, PreparedInput, Prediction,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::gradcheck::{grad_check_many, Coordinates, InputReport};
use crate::params::{bind, flatten, ParamTree};
use crate::rng::SplitMix64;
use crate::temporal::{prepare_sequence, WINDOW_LEN};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{extract_patches, SceneEncoding};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: bool,
    /// Train/val/test fractions, by scene.
    pub split: [f64; 3],
    pub loss: LossConfig,
    /// Windows of one scene placed together in a minibatch. Above 1, and
    /// with dropout off, each scene is encoded once per group.
    pub scene_group: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 10,
            seed: 0,
            dropout: true,
            split: [0.8, 0.1, 0.1],
            loss: LossConfig::default(),
            scene_group: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.scene_group == 0 || self.batch_size % self.scene_group != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "scene_group must divide batch_size, got {} and {}",
                self.scene_group, self.batch_size
            )));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(alloc::format!(
                "split fractions must be non-negative and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gaze: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running mean over the epoch's minibatches (training mode).
    pub train: LossBreakdown,
    /// Whole validation split, eval mode.
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch (lowest validation loss, or lowest
    /// training loss when there is no validation data).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Eval-mode training loss before the first update.
    pub initial_train: LossBreakdown,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub scene_id: String,
    pub input: PreparedInput,
    pub target: [f64; 2],
}

/// Extract patches once per scene and build the model inputs.
pub fn prepare_samples(
    kind: BaselineKind,
    dims: &ModelDims,
    scenes: &BTreeMap<String, SceneImage>,
    samples: &[Sample],
) -> Result<Vec<PreparedSample>> {
    let mut cache: BTreeMap<&str, Rc<Tensor>> = BTreeMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let patches = if kind.uses_scene() {
            let p = match cache.get(s.scene_id.as_str()) {
                Some(p) => p.clone(),
                None => {
                    let img = scenes.get(&s.scene_id).ok_or_else(|| Error::UnknownScene(s.scene_id.clone()))?;
                    let p = Rc::new(extract_patches(img, &dims.vit)?);
                    cache.insert(s.scene_id.as_str(), p.clone());
                    p
                }
            };
            Some(p)
        } else {
            None
        };
        out.push(PreparedSample {
            scene_id: s.scene_id.clone(),
            input: PreparedInput {
                patches,
                sequence: prepare_sequence(&s.window, WINDOW_LEN)?,
            },
            target: s.target.xy(),
        });
    }
    Ok(out)
}

/// Eval-mode predictions; consecutive windows of one scene share an encoding.
pub fn predict_all(model: &Model, samples: &[PreparedSample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for group in samples.chunk_by(|a, b| same_scene(&a.input, &b.input)) {
        let inputs: Vec<&PreparedInput> = group.iter().map(|s| &s.input).collect();
        out.extend(model.forward_shared(&inputs)?);
    }
    Ok(out)
}

/// Eval-mode loss over a sample set.
pub fn evaluate_loss(model: &Model, samples: &[PreparedSample], cfg: &LossConfig) -> Result<LossBreakdown> {
    let preds = predict_all(model, samples)?;
    let xy: Vec<[f64; 2]> = preds.iter().map(Prediction::xy).collect();
    let conf: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    let gt: Vec<[f64; 2]> = samples.iter().map(|s| s.target).collect();
    let gaze = gaze_loss(&xy, &gt)?;
    let confidence = confidence_loss(&conf, &xy, &gt, cfg)?;
    Ok(LossBreakdown {
        total: combine_losses(gaze, confidence, cfg),
        gaze,
        confidence,
    })
}

/// Shuffle each scene's windows, cut them into runs of `group`, and shuffle
/// the runs. Consecutive minibatch slots then hold windows of one scene.
fn grouped_order(samples: &[PreparedSample], group: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut by_scene: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_scene.entry(s.scene_id.as_str()).or_default().push(i);
    }
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for (_, mut idx) in by_scene {
        rng.shuffle(&mut idx);
        runs.extend(idx.chunks(group).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut runs);
    runs.concat()
}

const SHUFFLE_STREAM: u64 = 0x21;
const DROPOUT_STREAM: u64 = 0x22;

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        other => other,
    }
}

/// One optimizer step on a minibatch; returns its loss terms.
fn train_step(
    model: &mut Model,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    state: &mut AdamState,
    dropout_rng: &mut SplitMix64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = bind(&model.params, &mut tape)?;
    let mut mode = if cfg.dropout { Mode::Train(dropout_rng) } else { Mode::Eval };
    let terms = batch_loss(&mut tape, model, &bound, batch, &cfg.loss, &mut mode, !cfg.dropout)?;
    let out = LossBreakdown {
        total: tape.item(terms.total),
        gaze: tape.item(terms.gaze),
        confidence: tape.item(terms.confidence),
    };
    let leaves = bound_leaves(&bound);
    if !leaves.is_empty() {
        let grads = tape.backward(terms.total)?;
        let grads: Vec<Tensor> = leaves
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
            .collect();
        adam_step(&mut model.params, &grads, state, &cfg.adam)?;
    }
    Ok(out)
}

/// Batch loss on `tape`. With `share_scenes`, windows of one scene reuse a
/// single scene encoding, which is only equivalent when no dropout is drawn.
fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &ModelParams<Var>,
    batch: &[&PreparedSample],
    loss: &LossConfig,
    mode: &mut Mode<'_>,
    share_scenes: bool,
) -> Result<LossTerms> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut confs = Vec::with_capacity(batch.len());
    let mut shared: Vec<(&PreparedInput, Option<SceneEncoding>)> = Vec::new();
    for s in batch {
        let cached = shared.iter().find(|(i, _)| share_scenes && same_scene(i, &s.input));
        let scene = match cached {
            Some((_, enc)) => enc.clone(),
            None => {
                let enc = encode_scene_bound(tape, model.kind, &model.dims, bound, &s.input, mode)?;
                shared.push((&s.input, enc.clone()));
                enc
            }
        };
        let trace = forward_with_scene(tape, model.kind, bound, &s.input, scene)?;
        preds.push(trace.gaze);
        confs.push(trace.confidence);
    }
    let pred = tape.concat_rows(&preds)?;
    let conf = tape.concat_rows(&confs)?;
    let gt: Vec<[f64; 2]> = batch.iter().map(|s| s.target).collect();
    loss_on_tape(tape, pred, conf, &gt, loss)
}

/// Train `model` on prepared samples. `val` may be empty.
pub fn fit(mut model: Model, train: &[PreparedSample], val: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let initial_train = evaluate_loss(&model, train, &cfg.loss)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::model::ModelParams)> = None;
    let mut shuffle_rng = SplitMix64::stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = SplitMix64::stream(cfg.seed, DROPOUT_STREAM);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        if cfg.scene_group > 1 {
            order = grouped_order(train, cfg.scene_group, &mut shuffle_rng);
        } else {
            shuffle_rng.shuffle(&mut order);
        }
        let mut sum = LossBreakdown::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let terms = train_step(&mut model, &batch, cfg, &mut state, &mut dropout_rng).map_err(|e| diverged(e, epoch, step))?;
            if !terms.total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let w = batch.len() as f64;
            sum.total += w * terms.total;
            sum.gaze += w * terms.gaze;
            sum.confidence += w * terms.confidence;
        }
        let n = train.len() as f64;
        let train_loss = LossBreakdown {
            total: sum.total / n,
            gaze: sum.gaze / n,
            confidence: sum.confidence / n,
        };
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, val, &cfg.loss).map_err(|e| diverged(e, epoch, usize::MAX))?)
        };
        let score = val_loss.map_or(train_loss.total, |v| v.total);
        if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
            best = Some((score, epoch, model.params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        });
    }

    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        history,
        initial_train,
        best_epoch,
    })
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Split a dataset by scene (seeded by `cfg.seed`).
pub fn split_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<DatasetSplit> {
    let [train, val, test] = split_by_scene(&dataset.scene_ids(), cfg.split, cfg.seed)?;
    Ok(DatasetSplit { train, val, test })
}

/// Build, split and train a baseline on a dataset. The model is seeded from
/// `cfg.seed`.
pub fn train(kind: BaselineKind, dims: &ModelDims, dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainOutcome, DatasetSplit)> {
    cfg.validate()?;
    dataset.validate()?;
    let split = split_dataset(dataset, cfg)?;
    let train_samples = dataset.samples_for(&split.train)?;
    if train_samples.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let val_samples = dataset.samples_for(&split.val)?;
    let model = Model::new(kind, dims.clone(), cfg.seed)?;
    let train_set = prepare_samples(kind, dims, &dataset.scenes, &train_samples)?;
    let val_set = prepare_samples(kind, dims, &dataset.scenes, &val_samples)?;
    Ok((fit(model, &train_set, &val_set, cfg)?, split))
}

/// Finite-difference check of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub report: InputReport,
}

/// Compare tape gradients of the eval-mode batch loss against central
/// differences, sampling up to `per_group` coordinates of every array.
pub fn model_gradient_check(
    model: &Model,
    batch: &[PreparedSample],
    loss: &LossConfig,
    per_group: usize,
    seed: u64,
    eps: f64,
) -> Result<Vec<GroupCheck>> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient check batch"));
    }
    let named = flatten(&model.params);
    let inputs: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let gt: Vec<[f64; 2]> = batch.iter().map(|s| s.target).collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut k = 0;
        let bound = model.params.map_named("", &mut |_, _| {
            k += 1;
            vars[k - 1]
        });
        let mut preds = Vec::with_capacity(batch.len());
        let mut confs = Vec::with_capacity(batch.len());
        for s in batch {
            let trace = forward_bound(tape, model.kind, &model.dims, &bound, &s.input, &mut Mode::Eval)?;
            preds.push(trace.gaze);
            confs.push(trace.confidence);
        }
        let pred = tape.concat_rows(&preds)?;
        let conf = tape.concat_rows(&confs)?;
        Ok(loss_on_tape(tape, pred, conf, &gt, loss)?.total)
    };
    let reports = grad_check_many(f, &inputs, eps, Coordinates::Sample { per_input: per_group, seed })?;
    Ok(named
        .into_iter()
        .zip(reports)
        .map(|((name, _), report)| GroupCheck { name, report })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    fn tiny_dims() -> ModelDims {
        let mut d = ModelDims::desk();
        d.vit.image_h = 32;
        d.vit.image_w = 64;
        d.vit.embed_dim = 16;
        d.vit.ffn_dim = 32;
        d.vit.layers = 1;
        d.vit.heads = 2;
        d
    }

    fn tiny_data() -> Dataset {
        synthesize(&SynthConfig {
            scenes: 5,
            seed: 3,
            width: 64,
            height: 32,
            blobs: 2,
            length: 16,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn prepared(kind: BaselineKind) -> Vec<PreparedSample> {
        let ds = tiny_data();
        prepare_samples(kind, &tiny_dims(), &ds.scenes, &ds.samples().unwrap()).unwrap()
    }

    #[test]
    fn grouped_prediction_matches_one_by_one() {
        for kind in BaselineKind::ALL {
            let set = prepared(kind);
            let m = Model::new(kind, tiny_dims(), 6).unwrap();
            let single: Vec<Prediction> = set.iter().map(|s| m.forward_prepared(&s.input).unwrap()).collect();
            assert_eq!(predict_all(&m, &set).unwrap(), single, "{}", kind.name());
        }
        let set = prepared(BaselineKind::Full);
        let m = Model::new(BaselineKind::Full, tiny_dims(), 6).unwrap();
        let last = set.last().unwrap();
        assert!(m.forward_shared(&[&set[0].input, &last.input]).is_err());
    }

    #[test]
    fn shared_scene_encoding_gives_the_same_gradient() {
        let set = prepared(BaselineKind::Full);
        let batch: Vec<&PreparedSample> = set.iter().take(4).collect();
        assert!(batch.windows(2).all(|w| same_scene(&w[0].input, &w[1].input)));
        let m = Model::new(BaselineKind::Full, tiny_dims(), 8).unwrap();
        let run = |share: bool| {
            let mut tape = Tape::new();
            let bound = bind(&m.params, &mut tape).unwrap();
            let terms = batch_loss(&mut tape, &m, &bound, &batch, &LossConfig::default(), &mut Mode::Eval, share).unwrap();
            let loss = tape.item(terms.total);
            let grads = tape.backward(terms.total).unwrap();
            let g: Vec<f64> = bound_leaves(&bound).iter().flat_map(|v| grads.get(*v).unwrap().data().to_vec()).collect();
            (loss, g, tape.len())
        };
        let (l1, g1, n1) = run(true);
        let (l2, g2, n2) = run(false);
        assert_eq!(l1, l2);
        assert!(n1 < n2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn grouped_order_is_a_permutation_of_scene_runs() {
        let set = prepared(BaselineKind::Full);
        let mut rng = SplitMix64::new(1);
        let order = grouped_order(&set, 3, &mut rng);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..set.len()).collect::<Vec<_>>());
        // 5 scenes of 6 windows: every aligned run of 3 is one scene
        for run in order.chunks(3) {
            assert!(run.iter().all(|&i| set[i].scene_id == set[run[0]].scene_id));
        }
        assert_ne!(order, grouped_order(&set, 3, &mut rng));
    }

    #[test]
    fn scene_group_must_divide_batch() {
        let cfg = TrainConfig {
            batch_size: 8,
            scene_group: 3,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { scene_group: 4, ..cfg.clone() }.validate().is_ok());
        assert!(TrainConfig { scene_group: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, _) = train(BaselineKind::Full, &tiny_dims(), &tiny_data(), &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model, Model::new(BaselineKind::Full, tiny_dims(), cfg.seed).unwrap());
    }

    #[test]
    fn same_seed_same_history() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let data = tiny_data();
        let (a, _) = train(BaselineKind::Full, &tiny_dims(), &data, &cfg).unwrap();
        let (b, _) = train(BaselineKind::Full, &tiny_dims(), &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 2);
        assert!(a.best_epoch.is_some());
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let cfg = TrainConfig {
            split: [0.0, 0.0, 1.0],
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(BaselineKind::TemporalOnly, &tiny_dims(), &tiny_data(), &cfg),
            Err(Error::Empty(_))
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(BaselineKind::TemporalOnly, &tiny_dims(), &tiny_data(), &bad).is_err());
    }

    #[test]
    fn divergence_reports_context() {
        let data = tiny_data();
        let dims = tiny_dims();
        let samples = data.samples().unwrap();
        let set = prepare_samples(BaselineKind::TemporalOnly, &dims, &data.scenes, &samples).unwrap();
        let model = Model::new(BaselineKind::TemporalOnly, dims, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            adam: AdamConfig {
                lr: 1e306,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(fit(model, &set, &[], &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn center_fixed_trains_trivially() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let (out, _) = train(BaselineKind::CenterFixed, &tiny_dims(), &tiny_data(), &cfg).unwrap();
        assert_eq!(out.model.parameter_count(), 0);
        assert_eq!(out.history.len(), 1);
    }
}
