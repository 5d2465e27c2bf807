//! Task routing: pick which task's prompts an unlabeled input should use.
//!
//! [`TextPrototypeBook`] routes by cosine similarity to the mean frozen text
//! embedding of each task's class names. The two visual books are the
//! baselines it is compared against; both need training images.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, lit, mean_vector, Embedding, Scalar};
use crate::{ClassId, TaskId};

/// Floor on fitted per-coordinate variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingStrategy {
    TextPrototype,
    /// Diagonal-covariance Gaussian per task.
    VisualGaussian,
    VisualMean,
}

impl RoutingStrategy {
    pub fn label(self) -> &'static str {
        match self {
            RoutingStrategy::TextPrototype => "Text prototype",
            RoutingStrategy::VisualGaussian => "Visual Gaussian (diagonal)",
            RoutingStrategy::VisualMean => "Visual mean prototype",
        }
    }
}

pub trait TaskRouter<T: Scalar> {
    fn route(&self, v: &[T]) -> Result<TaskId>;
    fn tasks(&self) -> Vec<TaskId>;
}

/// Argmax over `(task, score)` pairs in ascending task order; ties keep the lower id.
fn argmax_task<T: Scalar>(scores: impl Iterator<Item = Result<(TaskId, T)>>) -> Result<TaskId> {
    let mut best: Option<(TaskId, T)> = None;
    for s in scores {
        let (t, v) = s?;
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((t, v)),
        }
    }
    best.map(|(t, _)| t)
        .ok_or(Error::Empty("routing over an empty book"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPrototype<T> {
    pub classes: Vec<ClassId>,
    pub prototype: Embedding<T>,
}

/// Per-task mean of frozen class-name embeddings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextPrototypeBook<T> {
    entries: BTreeMap<TaskId, TextPrototype<T>>,
}

impl<T: Scalar> TextPrototypeBook<T> {
    pub fn new() -> Self {
        TextPrototypeBook {
            entries: BTreeMap::new(),
        }
    }

    pub fn build(
        class_embeddings: &BTreeMap<ClassId, Embedding<T>>,
        tasks: &BTreeMap<TaskId, Vec<ClassId>>,
    ) -> Result<Self> {
        let mut book = Self::new();
        for (&task, classes) in tasks {
            book.register(task, classes, class_embeddings)?;
        }
        Ok(book)
    }

    /// Adds one task. Prototypes are write-once.
    pub fn register(
        &mut self,
        task: TaskId,
        classes: &[ClassId],
        class_embeddings: &BTreeMap<ClassId, Embedding<T>>,
    ) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::TaskDefinition(format!("{task} has no classes")));
        }
        if self.entries.contains_key(&task) {
            return Err(Error::TaskDefinition(format!(
                "{task} is already registered"
            )));
        }
        let mut seen = BTreeSet::new();
        for c in classes {
            if !seen.insert(*c) {
                return Err(Error::TaskDefinition(format!("{c} listed twice in {task}")));
            }
        }
        for (other, e) in &self.entries {
            if let Some(c) = e.classes.iter().find(|c| seen.contains(c)) {
                return Err(Error::TaskDefinition(format!(
                    "{c} appears in both {other} and {task}"
                )));
            }
        }
        let embs = classes
            .iter()
            .map(|c| {
                class_embeddings
                    .get(c)
                    .map(|e| e.as_slice())
                    .ok_or_else(|| Error::TaskDefinition(format!("no embedding for {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let prototype = Embedding(mean_vector(&embs)?);
        self.entries.insert(
            task,
            TextPrototype {
                classes: classes.to_vec(),
                prototype,
            },
        );
        Ok(())
    }

    pub fn get(&self, task: TaskId) -> Option<&TextPrototype<T>> {
        self.entries.get(&task)
    }

    pub fn prototype(&self, task: TaskId) -> Option<&Embedding<T>> {
        self.entries.get(&task).map(|e| &e.prototype)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskId, &TextPrototype<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cosine similarity of `v` to every prototype, in task order.
    pub fn similarities(&self, v: &[T]) -> Result<Vec<(TaskId, T)>> {
        self.entries
            .iter()
            .map(|(&t, e)| cosine(v, e.prototype.as_slice()).map(|s| (t, s)))
            .collect()
    }
}

impl<T: Scalar> TaskRouter<T> for TextPrototypeBook<T> {
    fn route(&self, v: &[T]) -> Result<TaskId> {
        argmax_task(
            self.entries
                .iter()
                .map(|(&t, e)| cosine(v, e.prototype.as_slice()).map(|s| (t, s))),
        )
    }

    fn tasks(&self) -> Vec<TaskId> {
        self.entries.keys().copied().collect()
    }
}

/// Per-task mean of frozen training image features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualMeanBook<T> {
    means: BTreeMap<TaskId, Embedding<T>>,
}

impl<T: Scalar> VisualMeanBook<T> {
    pub fn new() -> Self {
        VisualMeanBook {
            means: BTreeMap::new(),
        }
    }

    pub fn from_means(means: impl IntoIterator<Item = (TaskId, Embedding<T>)>) -> Self {
        VisualMeanBook {
            means: means.into_iter().collect(),
        }
    }

    pub fn fit<V: AsRef<[T]>>(&mut self, task: TaskId, features: &[V]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::Empty("visual mean fit without features"));
        }
        self.means.insert(task, Embedding(mean_vector(features)?));
        Ok(())
    }

    pub fn mean(&self, task: TaskId) -> Option<&Embedding<T>> {
        self.means.get(&task)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

impl<T: Scalar> TaskRouter<T> for VisualMeanBook<T> {
    fn route(&self, v: &[T]) -> Result<TaskId> {
        argmax_task(
            self.means
                .iter()
                .map(|(&t, m)| cosine(v, m.as_slice()).map(|s| (t, s))),
        )
    }

    fn tasks(&self) -> Vec<TaskId> {
        self.means.keys().copied().collect()
    }
}

/// Axis-aligned Gaussian over image features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> DiagonalGaussian<T> {
    /// Maximum-likelihood fit with variances floored at [`VARIANCE_FLOOR`].
    pub fn fit<V: AsRef<[T]>>(features: &[V]) -> Result<Self> {
        let mean = mean_vector(features)?;
        let n = lit::<T>(features.len() as f64);
        let mut var = vec![T::zero(); mean.len()];
        for f in features {
            for ((s, &x), &m) in var.iter_mut().zip(f.as_ref()).zip(&mean) {
                *s = *s + (x - m) * (x - m);
            }
        }
        let floor = lit::<T>(VARIANCE_FLOOR);
        let var = var.into_iter().map(|s| (s / n).max(floor)).collect();
        Ok(DiagonalGaussian { mean, var })
    }

    /// `Σ_j −(v_j − μ_j)² / (2σ_j²) − ½ log(2πσ_j²)`
    pub fn log_density(&self, v: &[T]) -> Result<T> {
        if v.len() != self.mean.len() {
            return Err(Error::shape(
                "gaussian log-density",
                self.mean.len(),
                v.len(),
            ));
        }
        let two_pi = lit::<T>(2.0 * std::f64::consts::PI);
        let half = lit::<T>(0.5);
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .fold(T::zero(), |acc, ((&x, &m), &s)| {
                acc - (x - m) * (x - m) / (s + s) - half * (two_pi * s).ln()
            }))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualGaussianBook<T> {
    entries: BTreeMap<TaskId, DiagonalGaussian<T>>,
}

impl<T: Scalar> VisualGaussianBook<T> {
    pub fn new() -> Self {
        VisualGaussianBook {
            entries: BTreeMap::new(),
        }
    }

    pub fn fit<V: AsRef<[T]>>(&mut self, task: TaskId, features: &[V]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::Empty("gaussian fit without features"));
        }
        self.entries.insert(task, DiagonalGaussian::fit(features)?);
        Ok(())
    }

    pub fn insert(&mut self, task: TaskId, g: DiagonalGaussian<T>) {
        self.entries.insert(task, g);
    }

    pub fn get(&self, task: TaskId) -> Option<&DiagonalGaussian<T>> {
        self.entries.get(&task)
    }

    pub fn log_density(&self, task: TaskId, v: &[T]) -> Result<T> {
        self.entries
            .get(&task)
            .ok_or(Error::UnknownTask(task.0))?
            .log_density(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> TaskRouter<T> for VisualGaussianBook<T> {
    fn route(&self, v: &[T]) -> Result<TaskId> {
        argmax_task(
            self.entries
                .iter()
                .map(|(&t, g)| g.log_density(v).map(|s| (t, s))),
        )
    }

    fn tasks(&self) -> Vec<TaskId> {
        self.entries.keys().copied().collect()
    }
}
