//! Model state, training losses, meta-training, fine-tuning and prediction.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::backbone::{Backbone, BackboneConfig, BackboneVars, FeatureVars, NormMode};
use crate::episodes::{sample_episode, Dataset, Episode, EpisodeItem};
use crate::error::{Error, Result};
use crate::heads::{
    dfmn_logits, semantic_logits, ConfidenceParams, ConfidenceVars, GlobalPrototypes, SemanticHead, SemanticVars,
};
use crate::image::{self, Image};
use crate::numeric::{sgd_step, LrSchedule, Real, Tape, Tensor, Var};
use crate::seed;
use crate::transduction::{transduce, transduce_var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Trained,
    Finetuned,
}

/// All learnable parameters: backbone `θ`, confidence MLP `φ`, global
/// prototypes `ω` and semantic head `δ`.
///
/// After fine-tuning `δ` maps to the episode's classes instead of the
/// source classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub confidence: ConfidenceParams,
    pub omega: GlobalPrototypes,
    pub delta: SemanticHead,
    pub stage: Stage,
}

/// Model parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub confidence: ConfidenceVars,
    pub omega: Var,
    pub delta: SemanticVars,
}

impl ModelState {
    /// A freshly initialized model for `global_classes` source classes.
    pub fn new(config: BackboneConfig, global_classes: usize, seed: u64) -> Result<Self> {
        if global_classes < 2 {
            return Err(Error::Config(format!("need at least 2 source classes, got {global_classes}")));
        }
        let mut rng = seed::rng(seed, &[0]);
        let backbone = Backbone::new(config, &mut rng)?;
        let k = config.channels;
        Ok(ModelState {
            backbone,
            confidence: ConfidenceParams::new(k, &mut rng),
            omega: GlobalPrototypes::new(global_classes, k, &mut rng),
            delta: SemanticHead::new(k, global_classes, &mut rng),
            stage: Stage::Trained,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn feature_dim(&self) -> usize {
        self.config().channels
    }

    pub fn global_classes(&self) -> usize {
        self.omega.classes()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            backbone: self.backbone.bind(tape),
            confidence: self.confidence.bind(tape),
            omega: tape.param(&self.omega.w),
            delta: self.delta.bind(tape),
        }
    }

    /// Every stored tensor, including normalization running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        out.extend(self.confidence.named_tensors());
        out.push(("omega".into(), &self.omega.w));
        out.push(("delta.weight".into(), &self.delta.weight));
        out.push(("delta.bias".into(), &self.delta.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_tensors_mut();
        out.extend(self.confidence.named_tensors_mut());
        out.push(("omega".into(), &mut self.omega.w));
        out.push(("delta.weight".into(), &mut self.delta.weight));
        out.push(("delta.bias".into(), &mut self.delta.bias));
        out
    }

    /// Trainable tensors only.
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_params_mut();
        out.extend(self.confidence.named_tensors_mut());
        out.push(("omega".into(), &mut self.omega.w));
        out.push(("delta.weight".into(), &mut self.delta.weight));
        out.push(("delta.bias".into(), &mut self.delta.bias));
        out
    }
}

fn apply_sgd(mut params: Vec<(String, &mut Tensor)>, lr: f64) -> Result<()> {
    sgd_step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), lr as f32)
}

/// Stacks images into an NHWC batch, resizing any that differ from `hw`.
pub fn stack_images(images: &[&Image], hw: usize) -> Result<Tensor> {
    let resized: Vec<Cow<Image>> = images
        .iter()
        .map(|&img| {
            if img.height() == hw && img.width() == hw {
                Cow::Borrowed(img)
            } else {
                Cow::Owned(augment::scale(img, hw))
            }
        })
        .collect();
    let refs: Vec<&Image> = resized.iter().map(|c| c.as_ref()).collect();
    image::batch(&refs)
}

/// An episode flattened into one image batch (support first) plus labels.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub images: Tensor,
    pub ways: usize,
    pub support_local: Vec<usize>,
    pub support_global: Vec<usize>,
    pub query_local: Vec<usize>,
    pub query_global: Vec<usize>,
}

impl EpisodeBatch {
    pub fn new(episode: &Episode, hw: usize) -> Result<Self> {
        if episode.query.is_empty() {
            return Err(Error::Invalid("training episodes need a query set".into()));
        }
        let images: Vec<&Image> = episode.support_images().into_iter().chain(episode.query_images()).collect();
        Ok(EpisodeBatch {
            images: stack_images(&images, hw)?,
            ways: episode.ways(),
            support_local: episode.support_labels(),
            support_global: episode.support.iter().map(|i| i.global).collect(),
            query_local: episode.query_labels(),
            query_global: episode.query.iter().map(|i| i.global).collect(),
        })
    }

    pub fn n_support(&self) -> usize {
        self.support_local.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_local.len()
    }
}

/// Weights of the combined loss `λ·L_I + α·L_S + L_D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.2, alpha: 0.4 }
    }
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub instance: Var,
    pub dense: Var,
    pub semantic: Var,
    pub combined: Var,
}

/// Mean negative log-likelihood of `labels` under row-wise `logits`.
pub fn nll<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.select_cols(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Instance loss: query NLL under transduced meta-confidence posteriors.
pub fn instance_loss_var<T: Real>(
    tape: &mut Tape<T>,
    feats: &FeatureVars,
    confidence: &ConfidenceVars,
    batch: &EpisodeBatch,
    iterations: usize,
) -> Result<Var> {
    let ns = batch.n_support();
    let support = tape.slice_rows(feats.pooled, 0, ns)?;
    let query = tape.slice_rows(feats.pooled, ns, batch.n_query())?;
    let (_, logits) = transduce_var(tape, support, &batch.support_local, batch.ways, query, confidence, iterations)?;
    nll(tape, logits, &batch.query_local)
}

/// Dense loss: every query grid cell against the global prototypes,
/// averaged over cells and queries.
pub fn dense_loss_var<T: Real>(tape: &mut Tape<T>, feats: &FeatureVars, omega: Var, batch: &EpisodeBatch) -> Result<Var> {
    let shape = tape.shape(feats.dense).to_vec();
    let cells = shape[1] * shape[2];
    let query = tape.slice_rows(feats.dense, batch.n_support(), batch.n_query())?;
    let flat = tape.reshape(query, &[batch.n_query() * cells, shape[3]])?;
    let logits = dfmn_logits(tape, flat, omega)?;
    let labels: Vec<usize> = batch
        .query_global
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, cells))
        .collect();
    nll(tape, logits, &labels)
}

/// Semantic loss over support and query, averaged over mini-batches of
/// `chunk` instances.
pub fn semantic_loss_var<T: Real>(
    tape: &mut Tape<T>,
    feats: &FeatureVars,
    delta: &SemanticVars,
    batch: &EpisodeBatch,
    chunk: usize,
) -> Result<Var> {
    let labels: Vec<usize> = batch.support_global.iter().chain(&batch.query_global).copied().collect();
    let logits = semantic_logits(tape, feats.pooled, delta)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.select_cols(logp, &labels)?;
    let n = labels.len();
    let chunk = chunk.clamp(1, n);
    if chunk == n {
        let m = tape.mean(picked);
        return Ok(tape.neg(m));
    }
    let mut means = Vec::with_capacity(n.div_ceil(chunk));
    for start in (0..n).step_by(chunk) {
        let part = tape.slice_rows(picked, start, chunk.min(n - start))?;
        means.push(tape.mean(part));
    }
    let all = tape.concat(&means, 0)?;
    let m = tape.mean(all);
    Ok(tape.neg(m))
}

/// Records a batch-statistics forward pass and all loss terms.
pub fn episode_losses<T: Real>(
    tape: &mut Tape<T>,
    model: &ModelState,
    vars: &ModelVars,
    batch: &EpisodeBatch,
    weights: LossWeights,
    iterations: usize,
    semantic_batch: usize,
) -> Result<(LossVars, FeatureVars)> {
    let input = tape.constant(&batch.images);
    let feats = model.backbone.forward(tape, &vars.backbone, input, NormMode::Batch)?;
    let instance = instance_loss_var(tape, &feats, &vars.confidence, batch, iterations)?;
    let dense = dense_loss_var(tape, &feats, vars.omega, batch)?;
    let semantic = semantic_loss_var(tape, &feats, &vars.delta, batch, semantic_batch)?;
    let combined = combine_losses(tape, instance, dense, semantic, weights)?;
    Ok((
        LossVars {
            instance,
            dense,
            semantic,
            combined,
        },
        feats,
    ))
}

pub fn combine_losses<T: Real>(tape: &mut Tape<T>, instance: Var, dense: Var, semantic: Var, w: LossWeights) -> Result<Var> {
    let li = tape.scale(instance, w.lambda);
    let ls = tape.scale(semantic, w.alpha);
    let sum = tape.add(li, ls)?;
    tape.add(sum, dense)
}

/// Loss values of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValues {
    pub instance: f64,
    pub dense: f64,
    pub semantic: f64,
    pub combined: f64,
}

/// Evaluates every loss term on `episode` without updating anything.
pub fn episode_loss_values(
    model: &ModelState,
    episode: &Episode,
    weights: LossWeights,
    iterations: usize,
    semantic_batch: usize,
) -> Result<LossValues> {
    let batch = EpisodeBatch::new(episode, model.config().input_hw)?;
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let (l, _) = episode_losses(&mut tape, model, &vars, &batch, weights, iterations, semantic_batch)?;
    tape.check_finite()?;
    Ok(LossValues {
        instance: tape.scalar(l.instance) as f64,
        dense: tape.scalar(l.dense) as f64,
        semantic: tape.scalar(l.semantic) as f64,
        combined: tape.scalar(l.combined) as f64,
    })
}

/// Source-domain training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub lambda: f64,
    pub alpha: f64,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub schedule: LrSchedule,
    pub semantic_batch: usize,
    pub t_train: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            lambda: 0.2,
            alpha: 0.4,
            episodes: 2000,
            way: 15,
            shot: 5,
            query: 15,
            schedule: LrSchedule::full_scale(),
            semantic_batch: 4,
            t_train: 1,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.lambda >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config(format!("loss weights must be ≥ 0, got λ={} α={}", self.lambda, self.alpha)));
        }
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::Config(format!(
                "training episodes need way ≥ 2, shot ≥ 1, query ≥ 1 (got {}/{}/{})",
                self.way, self.shot, self.query
            )));
        }
        if self.semantic_batch == 0 || self.log_every == 0 {
            return Err(Error::Config("semantic_batch and log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Mean combined loss over a window of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    /// Number of episodes completed.
    pub episode: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub losses: Vec<f32>,
    pub log: Vec<TrainLogLine>,
}

/// One SGD step on `episode`; returns the combined loss before the update.
pub fn train_step(model: &mut ModelState, episode: &Episode, cfg: &TrainConfig, lr: f64) -> Result<f32> {
    let batch = EpisodeBatch::new(episode, model.config().input_hw)?;
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let (l, feats) = episode_losses(&mut tape, model, &vars, &batch, cfg.weights(), cfg.t_train, cfg.semantic_batch)?;
    let loss = tape.scalar(l.combined);
    let grads = tape.backward(l.combined)?;
    model.backbone.write_grads(&vars.backbone, &grads)?;
    model.confidence.write_grads(&vars.confidence, &grads)?;
    grads.write_into(vars.omega, &mut model.omega.w)?;
    model.delta.write_grads(&vars.delta, &grads)?;
    apply_sgd(model.trainable_mut(), lr)?;
    model.backbone.update_running_stats(&feats.batch_stats);
    Ok(loss)
}

/// Episodic multi-head training on the source dataset.
///
/// `on_log` receives the mean loss of every `log_every` episodes.
pub fn meta_train(
    mut model: ModelState,
    source: &Dataset,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLogLine),
) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    if model.global_classes() != source.num_classes() {
        return Err(Error::Config(format!(
            "model has {} global classes, source dataset has {}",
            model.global_classes(),
            source.num_classes()
        )));
    }
    let mut history = TrainHistory::default();
    for e in 0..cfg.episodes {
        let episode = sample_episode(source, cfg.way, cfg.shot, cfg.query, seed::derive(cfg.seed, &[1, e as u64]))?;
        let lr = cfg.schedule.lr_at(e);
        let loss = match train_step(&mut model, &episode, cfg, lr) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Divergence { episode: e }),
            Err(err) => return Err(err),
        };
        history.losses.push(loss);
        if (e + 1) % cfg.log_every == 0 {
            let window = &history.losses[e + 1 - cfg.log_every..];
            let line = TrainLogLine {
                episode: e + 1,
                mean_loss: window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64,
                lr,
            };
            on_log(&line);
            history.log.push(line);
        }
    }
    Ok((model, history))
}

/// Target-domain fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub use_augmentation: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            lr: 0.01,
            batch: 4,
            use_augmentation: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "fine-tuning needs batch ≥ 1 and lr > 0 (got {}, {})",
                self.batch, self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ModelState,
    /// Semantic loss of every step.
    pub losses: Vec<f32>,
}

/// Fine-tunes `θ` and a fresh `δ` for `ways` classes on labeled support sets.
///
/// `sets` holds one support set, or `n_A` augmented copies of it in the same
/// order; each step averages the loss of the same support indices over all
/// copies. Normalization uses running statistics; `φ` and `ω` are left as
/// they are. The input model is not modified.
pub fn fine_tune(
    model: &ModelState,
    sets: &[&[EpisodeItem]],
    ways: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if model.stage != Stage::Trained {
        return Err(Error::Invalid("fine-tuning needs a trained (not yet fine-tuned) model".into()));
    }
    let first = sets.first().ok_or_else(|| Error::Invalid("fine-tuning needs a support set".into()))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::Invalid("empty support set".into()));
    }
    if sets.iter().any(|s| s.len() != n || s.iter().zip(*first).any(|(a, b)| a.local != b.local)) {
        return Err(Error::Invalid("augmented support sets must match the support labels".into()));
    }
    if let Some(bad) = first.iter().find(|i| i.local >= ways) {
        return Err(Error::Invalid(format!("support label {} outside {ways} ways", bad.local)));
    }
    let hw = model.config().input_hw;
    let stacked: Vec<Tensor> = sets
        .iter()
        .map(|s| stack_images(&s.iter().map(|i| i.image.as_ref()).collect::<Vec<_>>(), hw))
        .collect::<Result<_>>()?;
    let per_image = hw * hw * image::CHANNELS;

    let mut out = model.clone();
    out.delta = SemanticHead::new(model.feature_dim(), ways, &mut seed::rng(seed, &[0]));
    out.stage = Stage::Finetuned;
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed, &[1, epoch as u64]));
        for idx in order.chunks(cfg.batch) {
            let mut data = Vec::with_capacity(sets.len() * idx.len() * per_image);
            let mut labels = Vec::with_capacity(sets.len() * idx.len());
            for set in &stacked {
                for &j in idx {
                    data.extend_from_slice(&set.data()[j * per_image..(j + 1) * per_image]);
                    labels.push(first[j].local);
                }
            }
            let input = Tensor::new(&[labels.len(), hw, hw, image::CHANNELS], data)?;
            let mut tape = Tape::<f32>::new();
            let bv = out.backbone.bind(&mut tape);
            let dv = out.delta.bind(&mut tape);
            let x = tape.constant(&input);
            let feats = out.backbone.forward(&mut tape, &bv, x, NormMode::Running)?;
            let logits = semantic_logits(&mut tape, feats.pooled, &dv)?;
            // Every copy contributes equally many rows, so the overall mean
            // equals the mean over copies of the per-copy means.
            let loss = nll(&mut tape, logits, &labels)?;
            losses.push(tape.scalar(loss));
            let grads = tape.backward(loss)?;
            out.backbone.write_grads(&bv, &grads)?;
            out.delta.write_grads(&dv, &grads)?;
            let mut params = out.backbone.named_params_mut();
            params.push(("delta.weight".into(), &mut out.delta.weight));
            params.push(("delta.bias".into(), &mut out.delta.bias));
            apply_sgd(params, cfg.lr)?;
        }
    }
    Ok(FinetuneOutcome { model: out, losses })
}

/// Query predictions of one episode: posteriors `[M, C]` row-major and
/// their argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ways: usize,
    pub posteriors: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_posteriors(ways: usize, posteriors: Vec<f32>) -> Self {
        let labels = posteriors.chunks(ways).map(argmax).collect();
        Prediction {
            ways,
            posteriors,
            labels,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.posteriors[i * self.ways..(i + 1) * self.ways]
    }

    pub fn n_correct(&self, truth: &[usize]) -> usize {
        self.labels.iter().zip(truth).filter(|(a, b)| a == b).count()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pooled embeddings `[n, K]` of `images` with running statistics.
pub fn embed_pooled(model: &ModelState, images: &[&Image]) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let vars = model.backbone.bind_frozen(&mut tape);
    let x = tape.constant(&stack_images(images, model.config().input_hw)?);
    let feats = model.backbone.forward(&mut tape, &vars, x, NormMode::Running)?;
    tape.check_finite()?;
    Ok(tape.tensor(feats.pooled))
}

/// Transductive meta-confidence prediction of the episode's queries.
pub fn predict_episode(model: &ModelState, episode: &Episode, iterations: usize) -> Result<Prediction> {
    let ways = episode.ways();
    if episode.query.is_empty() {
        return Ok(Prediction::from_posteriors(ways, Vec::new()));
    }
    let images: Vec<&Image> = episode.support_images().into_iter().chain(episode.query_images()).collect();
    let pooled = embed_pooled(model, &images)?;
    let (ns, k) = (episode.support.len(), model.feature_dim());
    let support = Tensor::new(&[ns, k], pooled.data()[..ns * k].to_vec())?;
    let query = Tensor::new(&[episode.query.len(), k], pooled.data()[ns * k..].to_vec())?;
    let out = transduce(&support, &episode.support_labels(), ways, Some(&query), &model.confidence, iterations)?;
    let post = out.posteriors.expect("query set is non-empty");
    Ok(Prediction::from_posteriors(ways, post.into_data()))
}

/// Elementwise mean of equally shaped predictions, in order.
pub fn average_predictions(branches: &[Prediction]) -> Result<Prediction> {
    let first = branches.first().ok_or_else(|| Error::Invalid("no predictions to average".into()))?;
    if branches.iter().any(|b| b.ways != first.ways || b.posteriors.len() != first.posteriors.len()) {
        return Err(Error::Invalid("cannot average predictions of different shapes".into()));
    }
    let mut sum = vec![0.0f64; first.posteriors.len()];
    for b in branches {
        for (s, &p) in sum.iter_mut().zip(&b.posteriors) {
            *s += p as f64;
        }
    }
    let n = branches.len() as f64;
    Ok(Prediction::from_posteriors(first.ways, sum.into_iter().map(|s| (s / n) as f32).collect()))
}

/// Predicts every augmented branch separately and averages the posteriors.
pub fn predict_ensemble(model: &ModelState, branches: &[Episode], iterations: usize) -> Result<Prediction> {
    let preds = branches
        .iter()
        .map(|b| predict_episode(model, b, iterations))
        .collect::<Result<Vec<_>>>()?;
    average_predictions(&preds)
}
