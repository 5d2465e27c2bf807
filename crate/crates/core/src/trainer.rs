//! Per-task training of prompt pools and gate banks, and the inference
//! pipeline that routes, weights, gates and classifies.
//!
//! Training follows a single-task protocol: each task owns a fresh pool and
//! gate bank, optimised by SGD on a cross-entropy over cosine logits, and is
//! never touched again once its state is returned.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::{
    fit_task_confidence, ConfidenceMode, TaskConfidenceModel, ThresholdPolicy,
};
use crate::encoder::{EncoderConfig, FrozenBackbone, Injection, PromptPool, Scale, Side};
use crate::error::{Error, Result};
use crate::gating::{batch_condition, gate_on_tape, gumbel_pair, GateBank, Relaxation};
use crate::numerics::{argmax, cosine, lit, mean_vector, to_f64, Embedding, Mat, Rng, Scalar};
use crate::routing::{
    DiagonalGaussian, RoutingStrategy, TaskRouter, TextPrototypeBook, VisualGaussianBook,
    VisualMeanBook,
};
use crate::tape::{max_relative_error, numerical_gradient, NodeId, Tape};
use crate::{ClassId, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gumbel_temperature: f64,
    /// Cosine logits are divided by this before the cross-entropy.
    pub logit_temperature: f64,
    pub prompt_init_std: f64,
    /// K-means clusters per class.
    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            epochs: 10,
            batch_size: 32,
            gumbel_temperature: crate::gating::DEFAULT_TEMPERATURE,
            logit_temperature: 0.07,
            prompt_init_std: 0.1,
            clusters: crate::confidence::DEFAULT_CLUSTERS,
            kmeans_restarts: 10,
            top_k: crate::confidence::DEFAULT_TOP_K,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.gumbel_temperature > 0.0) || !(self.logit_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.prompt_init_std >= 0.0) {
            return bad("prompt_init_std must be non-negative");
        }
        if self.clusters == 0 || self.kmeans_restarts == 0 || self.top_k == 0 {
            return bad("clusters, kmeans_restarts and top_k must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Gates on both towers; text gates conditioned on the batch mean image feature.
    Symmetric,
    /// Image gates only; text prompts are applied at every layer at full strength.
    ImageOnly,
    /// No gates; image prompts scaled by the prompting weight alone.
    Disabled,
}

/// Component switches shared by training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Switches {
    pub routing: RoutingStrategy,
    pub confidence: ConfidenceMode,
    pub thresholds: ThresholdPolicy,
    pub gating: GatingMode,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            routing: RoutingStrategy::TextPrototype,
            confidence: ConfidenceMode::Joint,
            thresholds: ThresholdPolicy::Calibrated,
            gating: GatingMode::Symmetric,
        }
    }
}

/// A class and the token sequence of its name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: ClassId,
    pub tokens: Vec<u32>,
}

/// Everything a trained task contributes. Never mutated after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskState<T> {
    pub task: TaskId,
    pub classes: Vec<ClassSpec>,
    /// Unit-normalized frozen text embeddings, aligned with `classes`.
    pub class_text: Vec<Embedding<T>>,
    pub pool: PromptPool<T>,
    pub gates: GateBank<T>,
    pub confidence: TaskConfidenceModel<T>,
    pub visual_mean: Embedding<T>,
    pub gaussian: DiagonalGaussian<T>,
    pub text_prototype: Embedding<T>,
}

impl<T: Scalar + Serialize> TaskState<T> {
    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("task state serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

impl<T: Scalar> TaskState<T> {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.pool.parameter_count()
            + self.gates.parameter_count(Side::Image)
            + self.gates.parameter_count(Side::Text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Tape ids of every trainable matrix, in [`param_order`] order.
struct Params {
    ids: Vec<NodeId>,
    li: usize,
    lt: usize,
}

impl Params {
    fn bind<T: Scalar>(tape: &mut Tape<T>, pool: &PromptPool<T>, gates: &GateBank<T>) -> Self {
        let ids = param_order(pool, gates)
            .into_iter()
            .map(|m| tape.var(m.clone()))
            .collect();
        Params {
            ids,
            li: pool.image.layers(),
            lt: pool.text.layers(),
        }
    }

    fn img_k(&self, l: usize) -> NodeId {
        self.ids[l]
    }
    fn img_v(&self, l: usize) -> NodeId {
        self.ids[self.li + l]
    }
    fn txt_k(&self, l: usize) -> NodeId {
        self.ids[2 * self.li + l]
    }
    fn txt_v(&self, l: usize) -> NodeId {
        self.ids[2 * self.li + self.lt + l]
    }
    fn gate_img(&self, l: usize) -> NodeId {
        self.ids[2 * self.li + 2 * self.lt + l]
    }
    fn gate_txt(&self, l: usize) -> NodeId {
        self.ids[3 * self.li + 2 * self.lt + l]
    }
}

fn param_order<'a, T>(pool: &'a PromptPool<T>, gates: &'a GateBank<T>) -> Vec<&'a Mat<T>> {
    pool.image
        .keys
        .iter()
        .chain(&pool.image.values)
        .chain(&pool.text.keys)
        .chain(&pool.text.values)
        .chain(&gates.image)
        .chain(&gates.text)
        .collect()
}

fn param_order_mut<'a, T>(
    pool: &'a mut PromptPool<T>,
    gates: &'a mut GateBank<T>,
) -> Vec<&'a mut Mat<T>> {
    pool.image
        .keys
        .iter_mut()
        .chain(pool.image.values.iter_mut())
        .chain(pool.text.keys.iter_mut())
        .chain(pool.text.values.iter_mut())
        .chain(gates.image.iter_mut())
        .chain(gates.text.iter_mut())
        .collect()
}

struct Batch<'a, T> {
    xs: Vec<&'a Mat<T>>,
    vs: Vec<&'a [T]>,
    labels: Vec<usize>,
}

struct LossSettings<T> {
    gating: GatingMode,
    tau: T,
    inv_temp: T,
    relax: Relaxation,
}

/// Builds the batch loss on `tape`. Gate noise is drawn from `noise` in a
/// fixed order: text layers first, then every image in batch order.
fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    backbone: &FrozenBackbone<T>,
    p: &Params,
    class_tokens: &[&[u32]],
    batch: &Batch<'_, T>,
    s: &LossSettings<T>,
    noise: &mut dyn FnMut() -> [T; 2],
) -> Result<NodeId> {
    let image = backbone.image();
    let text = backbone.text();
    let bi = image.bind(tape);
    let bt = text.bind(tape);

    let text_scales: Vec<Scale<T>> = match s.gating {
        GatingMode::Symmetric => {
            let vbar = batch_condition(&batch.vs)?;
            let c = tape.constant(Mat::row_vector(vbar.0));
            (0..p.lt)
                .map(|l| {
                    gate_on_tape(tape, p.gate_txt(l), c, s.tau, noise(), s.relax)
                        .map(|(g, _)| Scale::Node(g))
                })
                .collect::<Result<_>>()?
        }
        GatingMode::ImageOnly | GatingMode::Disabled => vec![Scale::Const(T::one()); p.lt],
    };
    let mut rows = Vec::with_capacity(class_tokens.len());
    for toks in class_tokens {
        let h0 = text.embed_tokens(tape, &bt, toks)?;
        let inj: Vec<_> = (0..p.lt)
            .map(|l| {
                Some(Injection {
                    key: p.txt_k(l),
                    value: p.txt_v(l),
                    scale: text_scales[l],
                })
            })
            .collect();
        let out = text.forward(tape, &bt, h0, &inj)?;
        rows.push(tape.l2_normalize_rows(out));
    }
    let e = tape.concat_rows(&rows);

    let mut irows = Vec::with_capacity(batch.xs.len());
    for (x, v) in batch.xs.iter().zip(&batch.vs) {
        let scales: Vec<Scale<T>> = match s.gating {
            GatingMode::Disabled => vec![Scale::Const(T::one()); p.li],
            GatingMode::Symmetric | GatingMode::ImageOnly => {
                let c = tape.constant(Mat::row_vector(v.to_vec()));
                (0..p.li)
                    .map(|l| {
                        gate_on_tape(tape, p.gate_img(l), c, s.tau, noise(), s.relax)
                            .map(|(g, _)| Scale::Node(g))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let xin = tape.constant((*x).clone());
        let h0 = image.embed_patches(tape, &bi, xin)?;
        let inj: Vec<_> = (0..p.li)
            .map(|l| {
                Some(Injection {
                    key: p.img_k(l),
                    value: p.img_v(l),
                    scale: scales[l],
                })
            })
            .collect();
        let out = image.forward(tape, &bi, h0, &inj)?;
        irows.push(tape.l2_normalize_rows(out));
    }
    let vm = tape.concat_rows(&irows);
    let logits = tape.matmul_nt(vm, e);
    let logits = tape.scale(logits, s.inv_temp);
    Ok(tape.cross_entropy(logits, &batch.labels))
}

fn check_task_data<T: Scalar>(
    task: TaskId,
    classes: &[ClassSpec],
    inputs: &[Mat<T>],
    labels: &[ClassId],
) -> Result<BTreeMap<ClassId, usize>> {
    if classes.is_empty() {
        return Err(Error::TaskDefinition(format!("{task} has no classes")));
    }
    let mut index = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        if index.insert(c.id, i).is_some() {
            return Err(Error::TaskDefinition(format!(
                "{} listed twice in {task}",
                c.id
            )));
        }
    }
    if inputs.len() != labels.len() {
        return Err(Error::shape("training labels", inputs.len(), labels.len()));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(l) = labels.iter().find(|l| !index.contains_key(l)) {
        return Err(Error::LabelOutsideTask {
            label: l.0,
            task: task.0,
        });
    }
    Ok(index)
}

/// Frozen image features of every input, computed in parallel.
pub fn frozen_features<T: Scalar>(
    backbone: &FrozenBackbone<T>,
    inputs: &[Mat<T>],
) -> Result<Vec<Embedding<T>>> {
    inputs
        .par_iter()
        .map(|x| backbone.frozen_image(x))
        .collect()
}

/// Unit-normalized frozen text embedding of each class.
pub fn frozen_class_text<T: Scalar>(
    backbone: &FrozenBackbone<T>,
    classes: &[ClassSpec],
) -> Result<Vec<Embedding<T>>> {
    classes
        .iter()
        .map(|c| backbone.frozen_text(&c.tokens)?.normalized())
        .collect()
}

/// Trains one task from scratch and returns its frozen state.
pub fn train_task<T: Scalar>(
    backbone: &FrozenBackbone<T>,
    task: TaskId,
    classes: &[ClassSpec],
    inputs: &[Mat<T>],
    labels: &[ClassId],
    cfg: &TrainConfig,
    switches: &Switches,
) -> Result<(TaskState<T>, TrainReport)> {
    cfg.validate()?;
    let index = check_task_data(task, classes, inputs, labels)?;
    let enc = backbone.config();
    let frozen = frozen_features(backbone, inputs)?;
    let local: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let tokens: Vec<&[u32]> = classes.iter().map(|c| c.tokens.as_slice()).collect();

    let mut rng = Rng::derive(cfg.seed, 0x7a5c_0000 + task.0 as u64);
    let mut pool = PromptPool::random(task, enc, cfg.prompt_init_std, &mut rng);
    let mut gates = GateBank::zeros(task, enc, lit(cfg.gumbel_temperature));
    let settings = LossSettings {
        gating: switches.gating,
        tau: lit(cfg.gumbel_temperature),
        inv_temp: lit(1.0 / cfg.logit_temperature),
        relax: Relaxation::StraightThrough,
    };
    let lr: T = lit(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch {
                xs: chunk.iter().map(|&i| &inputs[i]).collect(),
                vs: chunk.iter().map(|&i| frozen[i].as_slice()).collect(),
                labels: chunk.iter().map(|&i| local[i]).collect(),
            };
            let mut tape = Tape::new();
            let params = Params::bind(&mut tape, &pool, &gates);
            let mut noise = || gumbel_pair::<T>(&mut rng);
            let loss = batch_loss(
                &mut tape, backbone, &params, &tokens, &batch, &settings, &mut noise,
            )?;
            let lv = tape.value(loss).get(0, 0);
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: task.0,
                    epoch,
                    step,
                    detail: format!("loss {lv} on a batch of {}", chunk.len()),
                });
            }
            let grads = tape.backward(loss);
            for (m, id) in param_order_mut(&mut pool, &mut gates)
                .into_iter()
                .zip(&params.ids)
            {
                if let Some(g) = grads.get(*id) {
                    m.axpy(-lr, g);
                }
            }
            let lf = to_f64(lv);
            if epoch == 0 {
                report.step_losses.push(lf);
            }
            total += lf;
            steps += 1;
        }
        report.epoch_losses.push(total / steps as f64);
    }

    let class_text = frozen_class_text(backbone, classes)?;
    let mut krng = Rng::derive(cfg.seed, 0x6b6d_0000 + task.0 as u64);
    let pairs: Vec<(ClassId, Embedding<T>)> = classes
        .iter()
        .map(|c| c.id)
        .zip(class_text.iter().cloned())
        .collect();
    let confidence = fit_task_confidence(
        task,
        &pairs,
        &frozen,
        labels,
        cfg.clusters,
        cfg.kmeans_restarts,
        cfg.top_k,
        switches.confidence,
        &mut krng,
    )?;
    let visual_mean = Embedding(mean_vector(&frozen)?);
    let gaussian = DiagonalGaussian::fit(&frozen)?;
    let text_prototype = Embedding(mean_vector(&class_text)?);
    let state = TaskState {
        task,
        classes: classes.to_vec(),
        class_text,
        pool,
        gates,
        confidence,
        visual_mean,
        gaussian,
        text_prototype,
    };
    Ok((state, report))
}

/// Frozen text embeddings and token sequences of every class in a benchmark,
/// with each task's class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTable<T> {
    pub entries: BTreeMap<ClassId, (Vec<u32>, Embedding<T>)>,
    pub tasks: BTreeMap<TaskId, Vec<ClassId>>,
}

impl<T: Scalar> ClassTable<T> {
    pub fn build(backbone: &FrozenBackbone<T>, tasks: &[(TaskId, Vec<ClassSpec>)]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut task_map = BTreeMap::new();
        for (task, classes) in tasks {
            let text = frozen_class_text(backbone, classes)?;
            for (c, e) in classes.iter().zip(text) {
                if entries.insert(c.id, (c.tokens.clone(), e)).is_some() {
                    return Err(Error::TaskDefinition(format!(
                        "{} appears in more than one task",
                        c.id
                    )));
                }
            }
            if task_map
                .insert(*task, classes.iter().map(|c| c.id).collect())
                .is_some()
            {
                return Err(Error::TaskDefinition(format!("{task} defined twice")));
            }
        }
        Ok(ClassTable {
            entries,
            tasks: task_map,
        })
    }

    /// Mean frozen class-name embedding of every task.
    pub fn text_book(&self) -> Result<TextPrototypeBook<T>> {
        let embs: BTreeMap<ClassId, Embedding<T>> = self
            .entries
            .iter()
            .map(|(k, (_, e))| (*k, e.clone()))
            .collect();
        TextPrototypeBook::build(&embs, &self.tasks)
    }

    pub fn classes(&self, task: TaskId) -> Result<&[ClassId]> {
        self.tasks
            .get(&task)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownTask(task.0))
    }

    fn entry(&self, c: ClassId) -> Result<&(Vec<u32>, Embedding<T>)> {
        self.entries
            .get(&c)
            .ok_or_else(|| Error::TaskDefinition(format!("{c} is not in the class table")))
    }
}

/// Candidate classes for a prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelSpace {
    /// Classes of the routed task.
    Routed,
    Fixed(Vec<ClassId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// Routed task, if any router entry exists.
    pub task: Option<TaskId>,
    /// Task confidence, when the routed task has been trained.
    pub confidence: Option<T>,
    pub weight: T,
    pub class: ClassId,
}

/// Image prompt scales `w · g_l` for one input.
pub fn image_scales<T: Scalar>(
    state: &TaskState<T>,
    v: &[T],
    weight: T,
    gating: GatingMode,
) -> Result<Vec<T>> {
    let gates = match gating {
        GatingMode::Disabled => vec![T::one(); state.pool.image.layers()],
        GatingMode::Symmetric | GatingMode::ImageOnly => state.gates.eval_gates(Side::Image, v)?,
    };
    Ok(gates.into_iter().map(|g| weight * g).collect())
}

/// Text prompt scales for one input given the batch mean feature.
pub fn text_scales<T: Scalar>(
    state: &TaskState<T>,
    vbar: &[T],
    weight: T,
    gating: GatingMode,
) -> Result<Vec<T>> {
    match gating {
        GatingMode::Symmetric => Ok(state
            .gates
            .eval_gates(Side::Text, vbar)?
            .into_iter()
            .map(|g| weight * g)
            .collect()),
        GatingMode::ImageOnly | GatingMode::Disabled => {
            Ok(vec![T::one(); state.pool.text.layers()])
        }
    }
}

enum Router<T> {
    Text(TextPrototypeBook<T>),
    Gaussian(VisualGaussianBook<T>),
    Mean(VisualMeanBook<T>),
}

struct Plan<T> {
    task: Option<TaskId>,
    confidence: Option<T>,
    weight: T,
    image: Embedding<T>,
    text_task: Option<TaskId>,
    text_scales: Vec<T>,
    classes: Vec<ClassId>,
}

type TextKey = (Option<TaskId>, Vec<u64>, ClassId);

/// The unified inference path over a set of trained tasks.
pub struct Pipeline<'a, T: Scalar> {
    backbone: &'a FrozenBackbone<T>,
    classes: &'a ClassTable<T>,
    states: BTreeMap<TaskId, &'a TaskState<T>>,
    switches: Switches,
    batch_size: usize,
    router: Router<T>,
    force: Option<(TaskId, T)>,
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    /// Text routing ranks every task in the class table, trained or not; the
    /// visual routers only know trained tasks.
    pub fn new(
        backbone: &'a FrozenBackbone<T>,
        classes: &'a ClassTable<T>,
        states: impl IntoIterator<Item = &'a TaskState<T>>,
        switches: Switches,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Parameter(
                "evaluation batch size must be positive".into(),
            ));
        }
        let mut map = BTreeMap::new();
        for s in states {
            if map.insert(s.task, s).is_some() {
                return Err(Error::TaskDefinition(format!("{} given twice", s.task)));
            }
        }
        let router = match switches.routing {
            RoutingStrategy::TextPrototype => Router::Text(classes.text_book()?),
            RoutingStrategy::VisualGaussian => {
                let mut book = VisualGaussianBook::new();
                for s in map.values() {
                    book.insert(s.task, s.gaussian.clone());
                }
                Router::Gaussian(book)
            }
            RoutingStrategy::VisualMean => Router::Mean(VisualMeanBook::from_means(
                map.values().map(|s| (s.task, s.visual_mean.clone())),
            )),
        };
        Ok(Pipeline {
            backbone,
            classes,
            states: map,
            switches,
            batch_size,
            router,
            force: None,
        })
    }

    /// Bypasses routing and confidence: every input uses `task` at weight `w`.
    pub fn forced(mut self, task: TaskId, weight: T) -> Self {
        self.force = Some((task, weight));
        self
    }

    pub fn route(&self, v: &[T]) -> Result<Option<TaskId>> {
        let (empty, r) = match &self.router {
            Router::Text(b) => (b.is_empty(), b as &dyn TaskRouter<T>),
            Router::Gaussian(b) => (b.is_empty(), b as &dyn TaskRouter<T>),
            Router::Mean(b) => (b.is_empty(), b as &dyn TaskRouter<T>),
        };
        if empty {
            return Ok(None);
        }
        r.route(v).map(Some)
    }

    fn plan(
        &self,
        x: &Mat<T>,
        v: &Embedding<T>,
        vbar: &[T],
        labels: &LabelSpace,
    ) -> Result<Plan<T>> {
        let (task, confidence, weight) = match self.force {
            Some((t, w)) => (Some(t), None, w),
            None => {
                let t = self.route(v.as_slice())?;
                match t.and_then(|t| self.states.get(&t)) {
                    Some(s) => {
                        let (c, w) = s.confidence.weight(
                            v.as_slice(),
                            self.switches.confidence,
                            self.switches.thresholds,
                        )?;
                        (t, Some(c), w)
                    }
                    None => (t, None, T::zero()),
                }
            }
        };
        let state = task.and_then(|t| self.states.get(&t)).copied();
        let image = match state {
            Some(s) if weight != T::zero() => {
                let scales = image_scales(s, v.as_slice(), weight, self.switches.gating)?;
                self.backbone.encode_image(x, Some(&s.pool), &scales)?
            }
            _ => v.clone(),
        };
        let scales = match state {
            Some(s) => text_scales(s, vbar, weight, self.switches.gating)?,
            None => Vec::new(),
        };
        let (text_task, text_scales) = if scales.iter().all(|&g| g == T::zero()) {
            (None, Vec::new())
        } else {
            (task, scales)
        };
        let classes = match labels {
            LabelSpace::Fixed(c) => c.clone(),
            LabelSpace::Routed => {
                let t = task.ok_or(Error::Empty("routing with no tasks"))?;
                self.classes.classes(t)?.to_vec()
            }
        };
        if classes.is_empty() {
            return Err(Error::Empty("label space"));
        }
        Ok(Plan {
            task,
            confidence,
            weight,
            image,
            text_task,
            text_scales,
            classes,
        })
    }

    fn text_embedding(
        &self,
        task: Option<TaskId>,
        scales: &[T],
        class: ClassId,
    ) -> Result<Embedding<T>> {
        let (tokens, frozen) = self.classes.entry(class)?;
        match task.and_then(|t| self.states.get(&t)) {
            Some(s) if !scales.is_empty() => {
                self.backbone.encode_text(tokens, Some(&s.pool), scales)
            }
            _ => Ok(frozen.clone()),
        }
    }

    /// Predicts inputs in evaluation batches of the configured size; `frozen`
    /// may supply precomputed frozen features.
    pub fn predict(
        &self,
        inputs: &[Mat<T>],
        frozen: Option<&[Embedding<T>]>,
        labels: &LabelSpace,
    ) -> Result<Vec<Prediction<T>>> {
        let owned;
        let vs = match frozen {
            Some(f) => {
                if f.len() != inputs.len() {
                    return Err(Error::shape("frozen features", inputs.len(), f.len()));
                }
                f
            }
            None => {
                owned = frozen_features(self.backbone, inputs)?;
                &owned[..]
            }
        };
        let mut out = Vec::with_capacity(inputs.len());
        for start in (0..inputs.len()).step_by(self.batch_size) {
            let end = (start + self.batch_size).min(inputs.len());
            let vbar = batch_condition(&vs[start..end])?;
            let plans: Vec<Plan<T>> = (start..end)
                .into_par_iter()
                .map(|i| self.plan(&inputs[i], &vs[i], vbar.as_slice(), labels))
                .collect::<Result<_>>()?;
            let mut keys: BTreeMap<TextKey, (Option<TaskId>, Vec<T>)> = BTreeMap::new();
            for p in &plans {
                let bits: Vec<u64> = p.text_scales.iter().map(|g| g.bits()).collect();
                for &c in &p.classes {
                    keys.entry((p.text_task, bits.clone(), c))
                        .or_insert_with(|| (p.text_task, p.text_scales.clone()));
                }
            }
            let texts: HashMap<TextKey, Embedding<T>> = keys
                .into_par_iter()
                .map(|(k, (t, s))| {
                    let c = k.2;
                    self.text_embedding(t, &s, c).map(|e| (k, e))
                })
                .collect::<Result<_>>()?;
            for p in plans {
                let bits: Vec<u64> = p.text_scales.iter().map(|g| g.bits()).collect();
                let sims = p
                    .classes
                    .iter()
                    .map(|&c| {
                        cosine(
                            p.image.as_slice(),
                            texts[&(p.text_task, bits.clone(), c)].as_slice(),
                        )
                    })
                    .collect::<Result<Vec<T>>>()?;
                let best = argmax(&sims).ok_or(Error::Empty("label space"))?;
                out.push(Prediction {
                    task: p.task,
                    confidence: p.confidence,
                    weight: p.weight,
                    class: p.classes[best],
                });
            }
        }
        Ok(out)
    }

    pub fn accuracy(
        &self,
        inputs: &[Mat<T>],
        frozen: Option<&[Embedding<T>]>,
        labels: &[ClassId],
        space: &LabelSpace,
    ) -> Result<f64> {
        if labels.len() != inputs.len() {
            return Err(Error::shape(
                "evaluation labels",
                inputs.len(),
                labels.len(),
            ));
        }
        if inputs.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict(inputs, frozen, space)?;
        let hits = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| p.class == **l)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Zero-shot predictions: frozen image feature against frozen class texts.
pub fn zero_shot_predict<T: Scalar>(
    backbone: &FrozenBackbone<T>,
    classes: &[ClassSpec],
    inputs: &[Mat<T>],
) -> Result<Vec<ClassId>> {
    let text = frozen_class_text(backbone, classes)?;
    inputs
        .par_iter()
        .map(|x| {
            let v = backbone.frozen_image(x)?;
            let sims = text
                .iter()
                .map(|e| cosine(v.as_slice(), e.as_slice()))
                .collect::<Result<Vec<T>>>()?;
            Ok(classes[argmax(&sims).ok_or(Error::Empty("class list"))?].id)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    /// Max relative error over prompt keys and values.
    pub prompt_error: f64,
    /// Max relative error over gate projections.
    pub gate_error: f64,
    pub max_error: f64,
    /// Same comparison with straight-through gates; large by construction.
    pub straight_through_error: f64,
}

/// Encoder shape used by [`gradcheck`] by default.
pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        image_width: 8,
        text_width: 8,
        image_layers: 1,
        text_layers: 1,
        prompt_len: 2,
        heads: 2,
        image_tokens: 3,
        patch_dim: 8,
        text_tokens: 3,
        vocab_size: 16,
        mlp_ratio: 2,
        seed: 11,
    }
}

/// Central finite differences of the training loss against the tape's
/// gradients, with frozen Gumbel noise and the soft relaxation.
pub fn gradcheck(cfg: &EncoderConfig, eps: f64, seed: u64) -> Result<GradcheckReport> {
    if cfg.embed_dim > 8 || cfg.image_width > 8 || cfg.text_width > 8 || cfg.prompt_len > 2 {
        return Err(Error::Parameter(
            "gradcheck needs d <= 8 and prompt_len <= 2".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(
            "finite-difference step must be positive".into(),
        ));
    }
    let backbone = FrozenBackbone::<f64>::new(cfg)?;
    let mut rng = Rng::seed(seed);
    let pool = PromptPool::random(TaskId(0), cfg, 0.5, &mut rng);
    let mut gates = GateBank::zeros(TaskId(0), cfg, 3.0);
    for m in gates.image.iter_mut().chain(gates.text.iter_mut()) {
        *m = Mat::random_normal(2, cfg.embed_dim, 0.5, &mut rng);
    }
    let xs: Vec<Mat<f64>> = (0..3)
        .map(|_| Mat::random_normal(cfg.image_tokens, cfg.patch_dim, 1.0, &mut rng))
        .collect();
    let vs = frozen_features(&backbone, &xs)?;
    let class_tokens: Vec<Vec<u32>> = (0..2)
        .map(|_| {
            (0..cfg.text_tokens)
                .map(|_| rng.below(cfg.vocab_size) as u32)
                .collect()
        })
        .collect();
    let tokens: Vec<&[u32]> = class_tokens.iter().map(|t| t.as_slice()).collect();
    let batch = Batch {
        xs: xs.iter().collect(),
        vs: vs.iter().map(|v| v.as_slice()).collect(),
        labels: vec![0, 1, 0],
    };
    let draws = cfg.text_layers + xs.len() * cfg.image_layers;
    let noise: Vec<[f64; 2]> = (0..draws).map(|_| gumbel_pair(&mut rng)).collect();

    let eval = |pool: &PromptPool<f64>, gates: &GateBank<f64>, relax: Relaxation, grads: bool| {
        let settings = LossSettings {
            gating: GatingMode::Symmetric,
            tau: 3.0,
            inv_temp: 1.0 / 0.07,
            relax,
        };
        let mut tape = Tape::new();
        let p = Params::bind(&mut tape, pool, gates);
        let mut k = 0;
        let mut next = || {
            let n = noise[k % noise.len()];
            k += 1;
            n
        };
        let loss = batch_loss(
            &mut tape, &backbone, &p, &tokens, &batch, &settings, &mut next,
        )?;
        let value = tape.value(loss).get(0, 0);
        let g = if grads {
            let all = tape.backward(loss);
            p.ids
                .iter()
                .map(|id| all.get(*id).cloned().unwrap_or_else(|| Mat::zeros(1, 1)))
                .collect()
        } else {
            Vec::new()
        };
        Ok::<_, Error>((value, g))
    };

    let compare = |relax: Relaxation| -> Result<(f64, f64, usize)> {
        let (_, analytic) = eval(&pool, &gates, relax, true)?;
        let n_prompt = param_order(&pool, &gates).len() - gates.image.len() - gates.text.len();
        let mut prompt_err: f64 = 0.0;
        let mut gate_err: f64 = 0.0;
        let mut count = 0;
        for (k, a) in analytic.iter().enumerate() {
            let mut failed = None;
            let numeric = {
                let target: Mat<f64> = param_order(&pool, &gates)[k].clone();
                numerical_gradient(&target, eps, |probe| {
                    let mut p2 = pool.clone();
                    let mut g2 = gates.clone();
                    *param_order_mut(&mut p2, &mut g2)[k] = probe.clone();
                    match eval(&p2, &g2, Relaxation::Soft, false) {
                        Ok((v, _)) => v,
                        Err(e) => {
                            failed = Some(e);
                            f64::NAN
                        }
                    }
                })
            };
            if let Some(e) = failed {
                return Err(e);
            }
            count += numeric.data().len();
            let err = max_relative_error(a, &numeric, 1e-8);
            if k < n_prompt {
                prompt_err = prompt_err.max(err);
            } else {
                gate_err = gate_err.max(err);
            }
        }
        Ok((prompt_err, gate_err, count))
    };
    let (prompt_error, gate_error, parameters) = compare(Relaxation::Soft)?;
    let (sp, sg, _) = compare(Relaxation::StraightThrough)?;
    Ok(GradcheckReport {
        parameters,
        prompt_error,
        gate_error,
        max_error: prompt_error.max(gate_error),
        straight_through_error: sp.max(sg),
    })
}

/// Every class id in `states`, for duplicate checks.
pub fn class_union<T>(states: &[TaskState<T>]) -> BTreeSet<ClassId> {
    states
        .iter()
        .flat_map(|s| s.classes.iter().map(|c| c.id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            image_width: 8,
            text_width: 8,
            image_layers: 2,
            text_layers: 1,
            prompt_len: 2,
            heads: 2,
            image_tokens: 3,
            patch_dim: 8,
            text_tokens: 3,
            vocab_size: 32,
            mlp_ratio: 2,
            seed: 3,
        }
    }

    fn toy_task(
        backbone: &FrozenBackbone<f64>,
        n: usize,
    ) -> (Vec<ClassSpec>, Vec<Mat<f64>>, Vec<ClassId>) {
        let cfg = backbone.config();
        let classes = vec![
            ClassSpec {
                id: ClassId(0),
                tokens: vec![1, 2, 3],
            },
            ClassSpec {
                id: ClassId(1),
                tokens: vec![4, 5, 6],
            },
        ];
        let mut rng = Rng::seed(9);
        let centers: Vec<Mat<f64>> = (0..2)
            .map(|_| Mat::random_normal(cfg.image_tokens, cfg.patch_dim, 2.0, &mut rng))
            .collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let mut x = centers[c].clone();
            x.axpy(
                0.2,
                &Mat::random_normal(cfg.image_tokens, cfg.patch_dim, 1.0, &mut rng),
            );
            xs.push(x);
            ys.push(ClassId(c as u32));
        }
        (classes, xs, ys)
    }

    #[test]
    fn label_outside_task_is_rejected() {
        let b = FrozenBackbone::<f64>::new(&tiny()).unwrap();
        let (classes, xs, mut ys) = toy_task(&b, 6);
        ys[2] = ClassId(7);
        let err = train_task(
            &b,
            TaskId(0),
            &classes,
            &xs,
            &ys,
            &TrainConfig::default(),
            &Switches::default(),
        );
        assert!(matches!(
            err,
            Err(Error::LabelOutsideTask { label: 7, task: 0 })
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let b = FrozenBackbone::<f64>::new(&tiny()).unwrap();
        let (classes, xs, ys) = toy_task(&b, 12);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (state, _) = train_task(
            &b,
            TaskId(0),
            &classes,
            &xs,
            &ys,
            &cfg,
            &Switches::default(),
        )
        .unwrap();
        let mut rng = Rng::derive(cfg.seed, 0x7a5c_0000);
        let init = PromptPool::random(TaskId(0), b.config(), cfg.prompt_init_std, &mut rng);
        assert_eq!(state.pool, init);
        assert!(state
            .gates
            .image
            .iter()
            .chain(&state.gates.text)
            .all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let b = FrozenBackbone::<f64>::new(&tiny()).unwrap();
        let (classes, mut xs, ys) = toy_task(&b, 4);
        xs[0].set(0, 0, f64::NAN);
        let ungated = Switches {
            gating: GatingMode::Disabled,
            ..Switches::default()
        };
        let err = train_task(
            &b,
            TaskId(0),
            &classes,
            &xs,
            &ys,
            &TrainConfig::default(),
            &ungated,
        );
        assert!(
            matches!(
                err,
                Err(Error::NonFiniteLoss {
                    task: 0,
                    epoch: 0,
                    ..
                })
            ),
            "{err:?}"
        );
        // with gates the NaN feature is caught earlier, still as an error
        let err = train_task(
            &b,
            TaskId(0),
            &classes,
            &xs,
            &ys,
            &TrainConfig::default(),
            &Switches::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn gradcheck_soft_path_agrees() {
        let r = gradcheck(&gradcheck_config(), 1e-4, 0).unwrap();
        assert!(r.max_error < 1e-4, "{r:?}");
        assert!(r.parameters > 0);
    }

    #[test]
    fn gradcheck_rejects_large_models() {
        assert!(gradcheck(&EncoderConfig::default(), 1e-4, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            logit_temperature: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
