//! The two-stream SGD loop.
//!
//! One forward pass per step feeds two backward passes:
//!
//! * the video stream (student, shared classifier, projections) descends
//!   `λ_cls·ce_v + L_distill`, with gradients flowing through every
//!   dependency, composed embeddings included;
//! * the composition stream (composition heads and per-branch classifiers)
//!   descends `λ_cls·(ce_av + ce_iv)` only.
//!
//! Both updates are applied together at the end of the step as
//! `p ← p − η·(∇ + wd·p)`. Blocks whose stream has no active loss term are
//! left untouched, weight decay included.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, EmbeddingDataset, SplitKind};
use crate::eval;
use crate::losses::{ccl_on_tape, LossBreakdown, LossConfig};
use crate::model::{forward_on_tape, register_params, ModelConfig, ModelDims, ModelParams, ParamGroup};
use crate::tape::Tape;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_iter: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record train/test accuracy every this many epochs; 0 disables.
    pub eval_every: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            max_iter: None,
            batch_size: 16,
            learning_rate: 0.001,
            weight_decay: 0.0005,
            seed: 0,
            eval_every: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub iteration: usize,
    pub train_top1: f64,
    pub test_top1: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iterations: Vec<IterationRecord>,
    pub evals: Vec<EvalSnapshot>,
    /// Wall-clock seconds per epoch. Not part of equality.
    pub epoch_seconds: Vec<f64>,
}

/// Compares the recorded trajectory; wall-clock timings are ignored.
impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.iterations == other.iterations && self.evals == other.evals
    }
}

impl TrainHistory {
    /// One JSON object per iteration, newline separated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.iterations {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }
}

/// Gradients of the two update streams from one forward pass.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub loss: LossBreakdown,
    /// Video stream blocks filled in, composition blocks zero.
    pub video: ModelParams<T>,
    /// Composition stream blocks filled in, video blocks zero.
    pub composition: ModelParams<T>,
}

fn record_step<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
) -> Result<(Tape<T>, crate::model::ParamVars, crate::losses::CclNodes, LossBreakdown)> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let fv = forward_on_tape(&mut tape, &vars, batch)?;
    let nodes = ccl_on_tape(&mut tape, &fv, &batch.labels, cfg)?;
    let loss = nodes.breakdown(&tape);
    if let Some(term) = loss.first_non_finite() {
        return Err(Error::NonFinite { term: term.to_string() });
    }
    Ok((tape, vars, nodes, loss))
}

/// Loss terms without differentiating.
pub fn evaluate_loss<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let fv = forward_on_tape(&mut tape, &vars, batch)?;
    let nodes = ccl_on_tape(&mut tape, &fv, &batch.labels, cfg)?;
    Ok(nodes.breakdown(&tape))
}

/// Values of the three differentiated objectives: full total, video
/// stream and composition stream.
pub fn objective_values<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, cfg: &LossConfig) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let fv = forward_on_tape(&mut tape, &vars, batch)?;
    let nodes = ccl_on_tape(&mut tape, &fv, &batch.labels, cfg)?;
    Ok([
        tape.scalar(nodes.l_total).as_f64(),
        tape.scalar(nodes.video_objective).as_f64(),
        tape.scalar(nodes.composition_objective).as_f64(),
    ])
}

pub fn stream_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
) -> Result<StepGradients<T>> {
    let (tape, vars, nodes, loss) = record_step(params, batch, cfg)?;
    let g_video = tape.backward(nodes.video_objective)?;
    let g_comp = tape.backward(nodes.composition_objective)?;
    Ok(StepGradients {
        loss,
        video: vars.collect_gradients(params, &g_video, ParamGroup::in_video_stream),
        composition: vars.collect_gradients(params, &g_comp, |g| !g.in_video_stream()),
    })
}

/// Gradient of the full objective with respect to every parameter.
pub fn total_gradient<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, cfg: &LossConfig) -> Result<ModelParams<T>> {
    let (tape, vars, nodes, _) = record_step(params, batch, cfg)?;
    let g = tape.backward(nodes.l_total)?;
    Ok(vars.collect_gradients(params, &g, |_| true))
}

/// Whether `group` is updated at all under `cfg`.
pub fn group_trained(group: ParamGroup, cfg: &LossConfig) -> bool {
    match group {
        ParamGroup::Student | ParamGroup::Classifier => true,
        ParamGroup::AudioProjection => cfg.use_audio_branch,
        ParamGroup::ImageProjection => cfg.use_image_branch,
        ParamGroup::AudioComposition | ParamGroup::AudioClassifier => cfg.composition_trained(true),
        ParamGroup::ImageComposition | ParamGroup::ImageClassifier => cfg.composition_trained(false),
    }
}

/// One SGD step on `batch`. Returns the updated parameters and the loss
/// terms evaluated before the update.
pub fn train_step<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, LossBreakdown)> {
    if !(cfg.learning_rate >= 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
    }
    let grads = stream_gradients(params, batch, &cfg.loss)?;
    let lr = T::lit(cfg.learning_rate);
    let wd = T::lit(cfg.weight_decay);

    let video_blocks = grads.video.blocks();
    let comp_blocks = grads.composition.blocks();
    let mut next = params.clone();
    let mut i = 0;
    next.for_each_block_mut(|_, group, block| {
        let idx = i;
        i += 1;
        if !group_trained(group, &cfg.loss) {
            return;
        }
        let g = if group.in_video_stream() { video_blocks[idx].2 } else { comp_blocks[idx].2 };
        for (p, &d) in block.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *p = *p - lr * (d + wd * *p);
        }
        for (p, &d) in block.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *p = *p - lr * (d + wd * *p);
        }
    });
    if !next.is_finite() {
        return Err(Error::NonFinite {
            term: "parameters after update".into(),
        });
    }
    Ok((next, grads.loss))
}

/// Splits a permutation into steps of `batch_size`; a trailing chunk of a
/// single row is folded into the previous one.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

/// Model dimensions for `dataset` under `cfg`.
pub fn model_dims<T: Scalar>(dataset: &EmbeddingDataset<T>, cfg: &TrainConfig) -> ModelDims {
    ModelDims::new(dataset.dims(), cfg.model)
}

/// Trains from a fresh seeded initialisation.
pub fn fit<T: Scalar>(dataset: &EmbeddingDataset<T>, cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainHistory)> {
    cfg.validate()?;
    dataset.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(model_dims(dataset, cfg), &mut init_rng)?;
    fit_from(params, dataset, cfg)
}

/// Continues training from `params`.
pub fn fit_from<T: Scalar>(
    mut params: ModelParams<T>,
    dataset: &EmbeddingDataset<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainHistory)> {
    cfg.validate()?;
    let train = &dataset.train;
    if train.len() < 2 {
        return Err(Error::Config("training split needs at least 2 rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let batch_size = cfg.batch_size.min(train.len());
    let mut history = TrainHistory::default();
    let mut iteration = 0usize;
    let max_iter = cfg.max_iter.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        if iteration >= max_iter {
            break;
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in epoch_batches(&order, batch_size) {
            if iteration >= max_iter {
                history.epoch_seconds.push(started.elapsed().as_secs_f64());
                break 'epochs;
            }
            let batch = train.gather(&chunk);
            let (next, loss) = train_step(&params, &batch, cfg)?;
            params = next;
            history.iterations.push(IterationRecord {
                iteration,
                epoch,
                batch_size: chunk.len(),
                loss,
            });
            iteration += 1;
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            history.evals.push(EvalSnapshot {
                epoch,
                iteration,
                train_top1: eval::top1_accuracy(&params, dataset.split(SplitKind::Train))?,
                test_top1: if dataset.test.is_empty() {
                    None
                } else {
                    Some(eval::top1_accuracy(&params, dataset.split(SplitKind::Test))?)
                },
            });
        }
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_fold_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = epoch_batches(&order, 3);
        assert_eq!(b.len(), 3);
        let b = epoch_batches(&order[..2], 16);
        assert_eq!(b, vec![vec![0, 1]]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
    }
}
