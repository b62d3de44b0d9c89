//! Episodic training with persistent prototypes, closed-form episodic
//! evaluation, and the radius-dynamics experiment.
//!
//! Training keeps one prototype per training class in a [`PrototypeStore`].
//! Each step samples `N` classes and `K'` queries per class, scores the queries
//! only against that episode's prototypes, and updates the encoder and the
//! prototypes with separate optimizers and learning rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderGrads};
use crate::episodes::{sample_classes, sample_episode, sample_episode_for_classes, Dataset, Episode, Item};
use crate::error::{contract, Error, Result};
use crate::numerics::{log_sum_exp_neg, mean_vector, softmax_of_negated, sq_dist, Rng};
use crate::optim::{OptState, OptimizerKind};
use crate::prototypes::{argmin_first, cone_disjointness, ConeProto, Prototype, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Centers and scales live in the store and are optimized across episodes.
    #[serde(rename = "persistent")]
    Persistent,
    /// Centers are re-estimated from a fresh support set every episode; scales
    /// stay persistent.
    #[serde(rename = "episodic-reinit")]
    EpisodicReinit,
}

fn d_n_way() -> usize {
    5
}
fn d_k_shot() -> usize {
    5
}
fn d_n_query() -> usize {
    5
}
fn d_steps() -> usize {
    1000
}
fn d_lr_encoder() -> f64 {
    1e-3
}
fn d_lr_scale() -> f64 {
    1e-1
}
fn d_variant() -> Variant {
    Variant::Hypersphere
}
fn d_mode() -> TrainMode {
    TrainMode::Persistent
}
fn d_sgd() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn d_adam() -> OptimizerKind {
    OptimizerKind::Adam
}
fn d_eval_episodes() -> usize {
    1000
}

/// Episode shape, schedule and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_n_way")]
    pub n_way: usize,
    #[serde(default = "d_k_shot")]
    pub k_shot: usize,
    /// Queries per class (K').
    #[serde(default = "d_n_query")]
    pub n_query: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr_encoder")]
    pub lr_encoder: f64,
    /// Learning rate of the prototype optimizer (centers and scales).
    #[serde(default = "d_lr_scale")]
    pub lr_scale: f64,
    #[serde(default = "d_variant")]
    pub variant: Variant,
    #[serde(default = "d_mode")]
    pub mode: TrainMode,
    #[serde(default = "d_sgd")]
    pub encoder_optimizer: OptimizerKind,
    #[serde(default = "d_adam")]
    pub scale_optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 || self.eval_episodes == 0 {
            return Err(contract("n_way, k_shot, n_query and eval_episodes must be >= 1"));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_scale", self.lr_scale)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(contract(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        Ok(())
    }
}

/// One prototype per training class plus its optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    variant: Variant,
    protos: Vec<Prototype>,
    center_opt: Vec<OptState>,
    scale_opt: Vec<OptState>,
}

impl PrototypeStore {
    /// Builds every class's prototype in closed form from `k_shot` randomly
    /// chosen items of that class.
    pub fn init(
        ds: &Dataset,
        encoder: &Encoder,
        k_shot: usize,
        variant: Variant,
        optimizer: OptimizerKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k_shot == 0 {
            return Err(contract("prototype initialization needs k_shot >= 1"));
        }
        let dim = encoder.output_dim();
        let mut protos = Vec::with_capacity(ds.num_classes());
        for class in 0..ds.num_classes() {
            let pool = ds.class_items(class);
            if pool.len() < k_shot {
                return Err(Error::Sampling(format!(
                    "class {class} has {} items, fewer than k_shot = {k_shot}",
                    pool.len()
                )));
            }
            let support = rng
                .sample_indices(pool.len(), k_shot)
                .into_iter()
                .map(|p| encoder.embed(&ds.item(pool[p]).features))
                .collect::<Result<Vec<_>>>()?;
            protos.push(Prototype::from_support(variant, &support)?);
        }
        let n = protos.len();
        Ok(Self {
            variant,
            protos,
            center_opt: vec![OptState::new(optimizer, dim); n],
            scale_opt: vec![OptState::new(optimizer, 1); n],
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn protos(&self) -> &[Prototype] {
        &self.protos
    }

    pub fn get(&self, class: usize) -> &Prototype {
        &self.protos[class]
    }

    /// Overwrites one class's scalar parameter without touching optimizer state.
    pub fn set_scale(&mut self, class: usize, value: f64) {
        self.protos[class].set_scale(value);
    }

    /// Overwrites one class's center without touching optimizer state.
    pub fn set_center(&mut self, class: usize, center: Vec<f64>) -> Result<()> {
        crate::error::ensure_same_dim(self.protos[class].center().len(), center.len(), "stored center")?;
        *self.protos[class].center_mut() = center;
        Ok(())
    }

    /// The scalar parameter of every class, in class order.
    pub fn scales(&self) -> Vec<f64> {
        self.protos.iter().map(Prototype::scale).collect()
    }

    fn update_center(&mut self, class: usize, grad: &[f64], lr: f64) -> Result<()> {
        self.center_opt[class].step(self.protos[class].center_mut(), grad, lr)
    }

    fn update_scale(&mut self, class: usize, grad: f64, lr: f64) -> Result<()> {
        if !self.variant.learns_scale() {
            return Ok(());
        }
        let mut s = [self.protos[class].scale()];
        self.scale_opt[class].step(&mut s, &[grad], lr)?;
        self.protos[class].set_scale(s[0]);
        Ok(())
    }
}

fn check_variant(protos: &[Prototype], variant: Variant) -> Result<()> {
    let ok = protos.iter().all(|p| {
        matches!(
            (variant, p),
            (Variant::Hypersphere | Variant::Vanilla, Prototype::Hypersphere(_))
                | (Variant::Cone, Prototype::Cone(_))
                | (Variant::Gaussian, Prototype::Gaussian(_))
        )
    });
    if ok {
        Ok(())
    } else {
        Err(contract(format!("prototype kinds do not match variant {variant}")))
    }
}

/// Loss of one episode and its gradients.
#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    /// `cls + dis`.
    pub value: f64,
    pub cls: f64,
    /// Cone overlap penalty; zero for the other variants.
    pub dis: f64,
    pub encoder_grads: EncoderGrads,
    pub center_grads: Vec<Vec<f64>>,
    pub scale_grads: Vec<f64>,
}

/// Mean over queries of `M_target + log Σₙ exp(−Mₙ)`, plus the disjointness
/// penalty for cones.
///
/// `query` labels are episode-local: an index into `protos`.
pub fn episode_loss(encoder: &Encoder, protos: &[Prototype], query: &[Item], variant: Variant) -> Result<EpisodeLoss> {
    if protos.is_empty() || query.is_empty() {
        return Err(contract("episode loss needs prototypes and queries"));
    }
    check_variant(protos, variant)?;
    let n = protos.len();
    let dim = encoder.output_dim();
    let inv_q = 1.0 / query.len() as f64;
    let mut encoder_grads = encoder.zero_grads();
    let mut center_grads = vec![vec![0.0; dim]; n];
    let mut scale_grads = vec![0.0; n];
    let mut cls = 0.0;
    for item in query {
        let target = item.label;
        if target >= n {
            return Err(contract(format!(
                "query label {target} is outside the episode's {n} classes"
            )));
        }
        let (emb, tape) = encoder.forward(&item.features)?;
        let measures = protos.iter().map(|p| p.measure(&emb)).collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = measures.iter().map(|m| m.value).collect();
        cls += (values[target] + log_sum_exp_neg(&values)?) * inv_q;
        let probs = softmax_of_negated(&values)?;
        let mut grad_emb = vec![0.0; dim];
        for (k, (m, p)) in measures.iter().zip(&probs).enumerate() {
            // dL/dM_k = [k == target] − p_k
            let w = (if k == target { 1.0 } else { 0.0 } - p) * inv_q;
            grad_emb
                .iter_mut()
                .zip(&m.grad_embedding)
                .for_each(|(g, d)| *g += w * d);
            center_grads[k]
                .iter_mut()
                .zip(&m.grad_center)
                .for_each(|(g, d)| *g += w * d);
            scale_grads[k] += w * m.grad_scale;
        }
        encoder_grads.add_assign(&encoder.backward(&tape, &grad_emb)?)?;
    }
    let mut dis = 0.0;
    if variant == Variant::Cone && n >= 2 {
        let cones: Vec<ConeProto> = protos.iter().filter_map(|p| p.as_cone().cloned()).collect();
        let d = cone_disjointness(&cones)?;
        dis = d.value;
        for k in 0..n {
            scale_grads[k] += d.grad_angles[k];
            center_grads[k]
                .iter_mut()
                .zip(&d.grad_centers[k])
                .for_each(|(g, x)| *g += x);
        }
    }
    Ok(EpisodeLoss {
        value: cls + dis,
        cls,
        dis,
        encoder_grads,
        center_grads,
        scale_grads,
    })
}

/// Class probabilities `pₙ ∝ exp(−Mₙ)` of one input against episode prototypes.
pub fn class_probabilities(encoder: &Encoder, protos: &[Prototype], x: &[f64]) -> Result<Vec<f64>> {
    let emb = encoder.embed(x)?;
    let values = protos
        .iter()
        .map(|p| p.measure(&emb).map(|m| m.value))
        .collect::<Result<Vec<_>>>()?;
    softmax_of_negated(&values)
}

/// Episode-local index of the prototype with the smallest measurement
/// (lowest index on ties).
pub fn predict(encoder: &Encoder, protos: &[Prototype], x: &[f64]) -> Result<usize> {
    let emb = encoder.embed(x)?;
    let values = protos
        .iter()
        .map(|p| p.measure(&emb).map(|m| m.value))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin_first(&values))
}

/// Queries (and, in re-init mode, a support set) for one training step.
/// Labels are dataset class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub classes: Vec<usize>,
    pub support: Vec<Item>,
    pub query: Vec<Item>,
}

impl TrainBatch {
    fn from_episode(ep: Episode) -> Self {
        Self {
            classes: ep.classes,
            support: ep.support,
            query: ep.query,
        }
    }

    fn local_query(&self) -> Vec<Item> {
        self.query
            .iter()
            .map(|it| Item {
                features: it.features.clone(),
                label: self
                    .classes
                    .binary_search(&it.label)
                    .expect("query class is in the batch"),
            })
            .collect()
    }
}

/// Encoder, prototype store and optimizer state; serializes as a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub store: PrototypeStore,
    pub encoder_opt: OptState,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    pub classes: Vec<usize>,
}

impl Trainer {
    /// Runs the initialization phase over every training class.
    pub fn new(config: TrainConfig, encoder: Encoder, train: &Dataset, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if encoder.input_dim() != train.dim() {
            return Err(contract(format!(
                "encoder expects {} features but the dataset has {}",
                encoder.input_dim(),
                train.dim()
            )));
        }
        let store = PrototypeStore::init(
            train,
            &encoder,
            config.k_shot,
            config.variant,
            config.scale_optimizer,
            rng,
        )?;
        let encoder_opt = OptState::new(config.encoder_optimizer, encoder.param_count());
        Ok(Self {
            config,
            encoder,
            store,
            encoder_opt,
            step: 0,
        })
    }

    pub fn sample_batch(&self, ds: &Dataset, rng: &mut Rng) -> Result<TrainBatch> {
        let classes = sample_classes(ds, self.config.n_way, rng)?;
        self.sample_batch_for(ds, &classes, rng)
    }

    pub fn sample_batch_for(&self, ds: &Dataset, classes: &[usize], rng: &mut Rng) -> Result<TrainBatch> {
        let k = match self.config.mode {
            TrainMode::Persistent => 0,
            TrainMode::EpisodicReinit => self.config.k_shot,
        };
        sample_episode_for_classes(ds, classes, k, self.config.n_query, rng).map(TrainBatch::from_episode)
    }

    /// Prototypes of the batch's classes, re-estimating centers from the
    /// support in re-init mode. Also returns the support tapes grouped by class.
    fn batch_protos(&self, batch: &TrainBatch) -> Result<(Vec<Prototype>, Vec<Vec<crate::encoder::ForwardTape>>)> {
        let stored: Vec<Prototype> = batch.classes.iter().map(|&c| self.store.get(c).clone()).collect();
        if self.config.mode == TrainMode::Persistent {
            return Ok((stored, Vec::new()));
        }
        let mut tapes = vec![Vec::new(); batch.classes.len()];
        let mut embeddings = vec![Vec::new(); batch.classes.len()];
        for it in &batch.support {
            let pos = batch
                .classes
                .binary_search(&it.label)
                .expect("support class is in the batch");
            let (e, t) = self.encoder.forward(&it.features)?;
            embeddings[pos].push(e);
            tapes[pos].push(t);
        }
        let mut protos = stored;
        for (p, emb) in protos.iter_mut().zip(&embeddings) {
            *p.center_mut() = mean_vector(emb)?;
        }
        Ok((protos, tapes))
    }

    /// Loss of a batch under the current parameters.
    pub fn batch_loss(&self, batch: &TrainBatch) -> Result<f64> {
        let (protos, _) = self.batch_protos(batch)?;
        episode_loss(&self.encoder, &protos, &batch.local_query(), self.config.variant).map(|l| l.value)
    }

    /// Loss of `batch` and its gradients with respect to the encoder and the
    /// batch prototypes. In re-init mode the center gradients are also routed
    /// back through the support embeddings into `encoder_grads`.
    pub fn batch_gradients(&self, batch: &TrainBatch) -> Result<EpisodeLoss> {
        let (protos, support_tapes) = self.batch_protos(batch)?;
        let mut loss = episode_loss(&self.encoder, &protos, &batch.local_query(), self.config.variant)?;
        for (tapes, cg) in support_tapes.iter().zip(&loss.center_grads) {
            let share: Vec<f64> = cg.iter().map(|g| g / tapes.len() as f64).collect();
            for tape in tapes {
                loss.encoder_grads.add_assign(&self.encoder.backward(tape, &share)?)?;
            }
        }
        Ok(loss)
    }

    /// One gradient update on `batch`; returns the pre-update loss.
    pub fn apply_batch(&mut self, batch: &TrainBatch) -> Result<f64> {
        let loss = self.batch_gradients(batch)?;

        let mut params = self.encoder.flat_params();
        self.encoder_opt
            .step(&mut params, &loss.encoder_grads.flat_params(), self.config.lr_encoder)?;
        self.encoder.set_flat_params(&params)?;

        let lr = self.config.lr_scale;
        for (k, &class) in batch.classes.iter().enumerate() {
            if self.config.mode == TrainMode::Persistent {
                self.store.update_center(class, &loss.center_grads[k], lr)?;
            }
            self.store.update_scale(class, loss.scale_grads[k], lr)?;
        }
        self.step += 1;
        Ok(loss.value)
    }

    pub fn train_step(&mut self, ds: &Dataset, rng: &mut Rng) -> Result<StepReport> {
        let batch = self.sample_batch(ds, rng)?;
        let loss = self.apply_batch(&batch)?;
        Ok(StepReport {
            loss,
            classes: batch.classes,
        })
    }

    /// Runs `config.steps` training steps; returns the per-step losses.
    pub fn fit(&mut self, ds: &Dataset, rng: &mut Rng) -> Result<Vec<f64>> {
        (0..self.config.steps)
            .map(|_| self.train_step(ds, rng).map(|r| r.loss))
            .collect()
    }
}

/// Predictions and confusion counts of one evaluation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub classes: Vec<usize>,
    /// Episode-local predicted index per query.
    pub predictions: Vec<usize>,
    /// `confusion[true][predicted]`, episode-local indices.
    pub confusion: Vec<Vec<usize>>,
    pub correct: usize,
    pub total: usize,
}

impl EpisodeOutcome {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// (precision, recall, f1) for episode-local class `k`; 0 where undefined.
    pub fn class_prf(&self, k: usize) -> (f64, f64, f64) {
        let tp = self.confusion[k][k];
        let predicted: usize = self.confusion.iter().map(|row| row[k]).sum();
        let actual: usize = self.confusion[k].iter().sum();
        prf(tp, predicted, actual)
    }

    fn macro_prf(&self) -> (f64, f64, f64) {
        let n = self.classes.len() as f64;
        let (p, r, f) = (0..self.classes.len())
            .map(|k| self.class_prf(k))
            .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        (p / n, r / n, f / n)
    }
}

fn prf(tp: usize, predicted: usize, actual: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Builds the episode's prototypes in closed form from its support set and
/// classifies every query by the smallest measurement.
pub fn evaluate_episode(encoder: &Encoder, episode: &Episode, variant: Variant) -> Result<EpisodeOutcome> {
    let protos = episode
        .support_by_class()
        .iter()
        .map(|group| {
            let emb = group.iter().map(|x| encoder.embed(x)).collect::<Result<Vec<_>>>()?;
            Prototype::from_support(variant, &emb)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = episode.n_way();
    let mut confusion = vec![vec![0; n]; n];
    let mut predictions = Vec::with_capacity(episode.query.len());
    let mut correct = 0;
    for it in &episode.query {
        let truth = episode
            .position(it.label)
            .ok_or_else(|| contract(format!("query label {} is not in the episode", it.label)))?;
        let pred = predict(encoder, &protos, &it.features)?;
        confusion[truth][pred] += 1;
        correct += usize::from(truth == pred);
        predictions.push(pred);
    }
    Ok(EpisodeOutcome {
        classes: episode.classes.clone(),
        predictions,
        confusion,
        correct,
        total: episode.query.len(),
    })
}

/// Mean and 95% half-width `1.96·s/√n` (sample std; 0 when n = 1).
pub fn mean_and_halfwidth(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of evaluated queries of this class.
    pub support: usize,
}

/// Aggregated evaluation results. `precision`, `recall` and `f1` are
/// per-episode macro averages; `per_class` pools counts over all episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub accuracy_ci95: f64,
    pub precision: f64,
    pub precision_ci95: f64,
    pub recall: f64,
    pub recall_ci95: f64,
    pub f1: f64,
    pub f1_ci95: f64,
    pub n_episodes: usize,
    pub per_class: Vec<ClassMetrics>,
}

impl Metrics {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome], num_classes: usize) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(contract("metrics need at least one episode"));
        }
        let acc: Vec<f64> = outcomes.iter().map(EpisodeOutcome::accuracy).collect();
        let macros: Vec<(f64, f64, f64)> = outcomes.iter().map(EpisodeOutcome::macro_prf).collect();
        let (accuracy, accuracy_ci95) = mean_and_halfwidth(&acc);
        let (precision, precision_ci95) = mean_and_halfwidth(&macros.iter().map(|m| m.0).collect::<Vec<_>>());
        let (recall, recall_ci95) = mean_and_halfwidth(&macros.iter().map(|m| m.1).collect::<Vec<_>>());
        let (f1, f1_ci95) = mean_and_halfwidth(&macros.iter().map(|m| m.2).collect::<Vec<_>>());

        let mut tp = vec![0; num_classes];
        let mut predicted = vec![0; num_classes];
        let mut actual = vec![0; num_classes];
        for o in outcomes {
            for (k, &class) in o.classes.iter().enumerate() {
                if class >= num_classes {
                    return Err(contract(format!("class {class} outside 0..{num_classes}")));
                }
                tp[class] += o.confusion[k][k];
                predicted[class] += o.confusion.iter().map(|row| row[k]).sum::<usize>();
                actual[class] += o.confusion[k].iter().sum::<usize>();
            }
        }
        let per_class = (0..num_classes)
            .filter(|&c| actual[c] > 0 || predicted[c] > 0)
            .map(|c| {
                let (precision, recall, f1) = prf(tp[c], predicted[c], actual[c]);
                ClassMetrics {
                    class: c,
                    precision,
                    recall,
                    f1,
                    support: actual[c],
                }
            })
            .collect();
        Ok(Self {
            accuracy,
            accuracy_ci95,
            precision,
            precision_ci95,
            recall,
            recall_ci95,
            f1,
            f1_ci95,
            n_episodes: outcomes.len(),
            per_class,
        })
    }
}

/// Runs `config.eval_episodes` independent test episodes (episode `i` draws
/// from `rng.fork(i)`) on up to `jobs` threads.
pub fn evaluate(
    encoder: &Encoder,
    test: &Dataset,
    config: &TrainConfig,
    variant: Variant,
    rng: &Rng,
    jobs: usize,
) -> Result<Metrics> {
    config.validate()?;
    let run = |i: usize| -> Result<EpisodeOutcome> {
        let mut erng = rng.fork(i as u64);
        let ep = sample_episode(test, config.n_way, config.k_shot, config.n_query, &mut erng)?;
        evaluate_episode(encoder, &ep, variant)
    };
    let outcomes = if jobs <= 1 {
        (0..config.eval_episodes).map(run).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| contract(format!("cannot start evaluation threads: {e}")))?;
        pool.install(|| {
            (0..config.eval_episodes)
                .into_par_iter()
                .map(run)
                .collect::<Result<Vec<_>>>()
        })?
    };
    Metrics::from_outcomes(&outcomes, test.num_classes())
}

fn d_warmup() -> usize {
    500
}
fn d_total() -> usize {
    2000
}
fn d_log_every() -> usize {
    50
}
fn d_retries() -> usize {
    200
}

/// Settings of the radius-dynamics experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusDynamicsConfig {
    #[serde(default)]
    pub anchor: usize,
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    #[serde(default = "d_total")]
    pub total: usize,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    #[serde(default = "d_retries")]
    pub max_retries: usize,
}

impl Default for RadiusDynamicsConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusPoint {
    pub step: usize,
    /// Mean squared distance of anchor queries to the anchor center over the
    /// steps since the previous log.
    pub mean_distance: f64,
    /// Anchor radius after this step.
    pub radius: f64,
    /// Mean anchor-query training accuracy over the same steps.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RadiusTrace {
    pub points: Vec<RadiusPoint>,
}

impl RadiusTrace {
    pub fn radii(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.radius).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_distance).collect()
    }
}

/// Accuracy of the anchor queries of `batch` and their mean squared distance
/// to the stored anchor center.
fn anchor_stats(trainer: &Trainer, batch: &TrainBatch, anchor: usize) -> Result<(f64, f64)> {
    let protos: Vec<Prototype> = batch.classes.iter().map(|&c| trainer.store.get(c).clone()).collect();
    let anchor_pos = batch.classes.binary_search(&anchor).expect("anchor is in every batch");
    let center = trainer.store.get(anchor).center();
    let (mut correct, mut dist, mut n) = (0usize, 0.0, 0usize);
    for it in batch.query.iter().filter(|it| it.label == anchor) {
        let emb = trainer.encoder.embed(&it.features)?;
        let values = protos
            .iter()
            .map(|p| p.measure(&emb).map(|m| m.value))
            .collect::<Result<Vec<_>>>()?;
        correct += usize::from(argmin_first(&values) == anchor_pos);
        dist += sq_dist(&emb, center);
        n += 1;
    }
    Ok((correct as f64 / n as f64, dist / n as f64))
}

fn anchor_batch(trainer: &Trainer, ds: &Dataset, anchor: usize, rng: &mut Rng) -> Result<TrainBatch> {
    let others: Vec<usize> = (0..ds.num_classes()).filter(|&c| c != anchor).collect();
    let picks = rng.sample_indices(others.len(), trainer.config.n_way - 1);
    let mut classes: Vec<usize> = picks.into_iter().map(|i| others[i]).collect();
    classes.push(anchor);
    trainer.sample_batch_for(ds, &classes, rng)
}

/// Trains with one anchor class in every episode and records how its radius
/// follows the spread of its sampled queries.
///
/// After `warmup` steps, windows of `log_every` steps alternate between "good"
/// episodes (anchor accuracy above the last logged accuracy) and "bad" ones
/// (below it), found by rejection sampling with at most `max_retries` draws;
/// the last draw is used when none qualifies. One point is logged at the end
/// of each post-warmup window.
pub fn radius_dynamics_run(
    trainer: &mut Trainer,
    ds: &Dataset,
    cfg: &RadiusDynamicsConfig,
    rng: &mut Rng,
) -> Result<RadiusTrace> {
    if trainer.config.mode != TrainMode::Persistent || trainer.config.variant != Variant::Hypersphere {
        return Err(contract("radius dynamics needs persistent hypersphere training"));
    }
    if cfg.anchor >= ds.num_classes() {
        return Err(contract(format!(
            "anchor class {} is not among the {} training classes",
            cfg.anchor,
            ds.num_classes()
        )));
    }
    if cfg.log_every == 0 || cfg.warmup > cfg.total || cfg.max_retries == 0 {
        return Err(contract(
            "radius dynamics needs log_every >= 1, warmup <= total, max_retries >= 1",
        ));
    }
    let is_log = |s: usize| {
        if s <= cfg.warmup {
            s.is_multiple_of(cfg.log_every)
        } else {
            (s - cfg.warmup).is_multiple_of(cfg.log_every)
        }
    };
    let mut trace = RadiusTrace::default();
    let mut last_logged: Option<f64> = None;
    let (mut win_acc, mut win_dist, mut win_n) = (0.0, 0.0, 0usize);
    for s in 1..=cfg.total {
        let mut batch = anchor_batch(trainer, ds, cfg.anchor, rng)?;
        let mut stats = anchor_stats(trainer, &batch, cfg.anchor)?;
        if s > cfg.warmup {
            if let Some(reference) = last_logged {
                let want_good = ((s - cfg.warmup - 1) / cfg.log_every).is_multiple_of(2);
                let accept = |acc: f64| if want_good { acc > reference } else { acc < reference };
                let mut tries = 1;
                while !accept(stats.0) && tries < cfg.max_retries {
                    batch = anchor_batch(trainer, ds, cfg.anchor, rng)?;
                    stats = anchor_stats(trainer, &batch, cfg.anchor)?;
                    tries += 1;
                }
            }
        }
        win_acc += stats.0;
        win_dist += stats.1;
        win_n += 1;
        trainer.apply_batch(&batch)?;
        if is_log(s) {
            let accuracy = win_acc / win_n as f64;
            if s > cfg.warmup {
                trace.points.push(RadiusPoint {
                    step: s,
                    mean_distance: win_dist / win_n as f64,
                    radius: trainer.store.get(cfg.anchor).scale(),
                    accuracy,
                });
            }
            last_logged = Some(accuracy);
            (win_acc, win_dist, win_n) = (0.0, 0.0, 0);
        }
    }
    Ok(trace)
}
