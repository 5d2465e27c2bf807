//! Multi-prototype visual-textual confidence.
//!
//! Every class keeps up to `K` K-means centroids of its (unit-normalized)
//! frozen training features. A test feature scores each class by the best
//! centroid cosine and by its cosine to the class text embedding; the
//! per-task confidence is the mean of the top-`k` class scores, mapped to a
//! prompting weight through thresholds calibrated on the task's own
//! training confidences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, lit, percentile_nearest_rank, Embedding, Rng, Scalar};
use crate::{ClassId, TaskId};

pub const DEFAULT_CLUSTERS: usize = 3;
pub const DEFAULT_TOP_K: usize = 5;
pub const UPPER_PERCENTILE: f64 = 80.0;
pub const LOWER_PERCENTILE: f64 = 20.0;
/// Global thresholds used when calibration is switched off.
pub const FIXED_UPPER: f64 = 0.8;
pub const FIXED_LOWER: f64 = 0.2;

const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    Joint,
    VisualOnly,
    TextualOnly,
}

impl ConfidenceMode {
    pub fn label(self) -> &'static str {
        match self {
            ConfidenceMode::Joint => "Equal weight",
            ConfidenceMode::VisualOnly => "Visual only",
            ConfidenceMode::TextualOnly => "Textual only",
        }
    }
}

/// Result of one K-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit<T> {
    pub centroids: Vec<Vec<T>>,
    pub assignments: Vec<usize>,
    pub wcss: T,
    /// WCSS after the seeding assignment and after every Lloyd iteration.
    pub history: Vec<T>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
}

fn nearest<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, sq_dist(p, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Within-cluster sum of squared Euclidean distances.
pub fn wcss<T: Scalar, V: AsRef<[T]>>(
    points: &[V],
    centroids: &[Vec<T>],
    assignments: &[usize],
) -> T {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p.as_ref(), &centroids[a]))
        .sum()
}

fn plus_plus_seeds<T: Scalar, V: AsRef<[T]>>(points: &[V], k: usize, rng: &mut Rng) -> Vec<Vec<T>> {
    let n = points.len();
    let mut centroids = vec![points[rng.below(n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| crate::numerics::to_f64(sq_dist(p.as_ref(), &centroids[0])))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.below(n)
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(crate::numerics::to_f64(sq_dist(p.as_ref(), &c)));
        }
        centroids.push(c);
    }
    centroids
}

/// K-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing (or 100 iterations). With fewer points than `k`, each point is
/// its own centroid.
pub fn fit_kmeans<T: Scalar, V: AsRef<[T]>>(
    points: &[V],
    k: usize,
    rng: &mut Rng,
) -> Result<KMeansFit<T>> {
    if k < 1 {
        return Err(Error::Parameter("K-means needs K >= 1".into()));
    }
    if points.is_empty() {
        return Err(Error::Empty("K-means over no points"));
    }
    let d = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::shape("K-means point", d, p.as_ref().len()));
    }
    let n = points.len();
    if n < k {
        let centroids: Vec<Vec<T>> = points.iter().map(|p| p.as_ref().to_vec()).collect();
        return Ok(KMeansFit {
            centroids,
            assignments: (0..n).collect(),
            wcss: T::zero(),
            history: vec![T::zero()],
        });
    }
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut assignments: Vec<usize> = points
        .iter()
        .map(|p| nearest(p.as_ref(), &centroids).0)
        .collect();
    let mut history = vec![wcss(points, &centroids, &assignments)];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p.as_ref()) {
                *s = *s + x;
            }
        }
        for j in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[j] > 0 {
                let c = lit::<T>(counts[j] as f64);
                centroids[j] = sums[j].iter().map(|&s| s / c).collect();
            }
        }
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest(p.as_ref(), &centroids).0)
            .collect();
        history.push(wcss(points, &centroids, &next));
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }
    let w = *history.last().expect("history is non-empty");
    Ok(KMeansFit {
        centroids,
        assignments,
        wcss: w,
        history,
    })
}

/// Best of `restarts` independent runs by WCSS.
pub fn fit_kmeans_restarts<T: Scalar, V: AsRef<[T]>>(
    points: &[V],
    k: usize,
    restarts: usize,
    rng: &mut Rng,
) -> Result<KMeansFit<T>> {
    let mut best = fit_kmeans(points, k, rng)?;
    for _ in 1..restarts.max(1) {
        let fit = fit_kmeans(points, k, rng)?;
        if fit.wcss < best.wcss {
            best = fit;
        }
    }
    Ok(best)
}

/// Visual centroids of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes<T> {
    pub class: ClassId,
    pub centroids: Vec<Embedding<T>>,
}

impl<T: Scalar> ClassPrototypes<T> {
    /// Clusters unit-normalized features so centroid distance tracks cosine.
    pub fn fit<V: AsRef<[T]>>(
        class: ClassId,
        features: &[V],
        k: usize,
        restarts: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let normalized = features
            .iter()
            .map(|f| Embedding(f.as_ref().to_vec()).normalized().map(|e| e.0))
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_kmeans_restarts(&normalized, k, restarts, rng)?;
        Ok(ClassPrototypes {
            class,
            centroids: fit.centroids.into_iter().map(Embedding).collect(),
        })
    }
}

/// `max_k cos(v, p_k)`
pub fn visual_confidence<T: Scalar>(v: &[T], protos: &ClassPrototypes<T>) -> Result<T> {
    if protos.centroids.is_empty() {
        return Err(Error::Empty("class without centroids"));
    }
    let mut best = T::neg_infinity();
    for c in &protos.centroids {
        best = best.max(cosine(v, c.as_slice())?);
    }
    Ok(best)
}

/// `cos(v, e_c)`
pub fn textual_confidence<T: Scalar>(v: &[T], text: &[T]) -> Result<T> {
    cosine(v, text)
}

pub fn joint_confidence<T: Scalar>(vis: T, txt: T, mode: ConfidenceMode) -> T {
    match mode {
        ConfidenceMode::Joint => lit::<T>(0.5) * vis + lit::<T>(0.5) * txt,
        ConfidenceMode::VisualOnly => vis,
        ConfidenceMode::TextualOnly => txt,
    }
}

/// Mean of the `min(k, n)` largest class scores.
pub fn task_confidence<T: Scalar>(scores: &[T], k: usize) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::Empty("task confidence over no classes"));
    }
    if k == 0 {
        return Err(Error::Parameter("top-k must be at least 1".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let m = k.min(sorted.len());
    Ok(sorted[..m].iter().copied().sum::<T>() / lit(m as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskThresholds<T> {
    pub task: TaskId,
    pub upper: T,
    pub lower: T,
}

/// 80th / 20th nearest-rank percentiles of the training confidences.
pub fn calibrate_thresholds<T: Scalar>(
    task: TaskId,
    train_confidences: &[T],
) -> Result<TaskThresholds<T>> {
    let upper = percentile_nearest_rank(train_confidences, UPPER_PERCENTILE)?;
    let lower = percentile_nearest_rank(train_confidences, LOWER_PERCENTILE)?;
    Ok(TaskThresholds { task, upper, lower })
}

/// `1` above the upper threshold, `0` below the lower one, otherwise the
/// confidence itself clamped to `[0, 1]`. Equality falls in the middle branch.
pub fn prompting_weight<T: Scalar>(c: T, th: &TaskThresholds<T>) -> T {
    if c > th.upper {
        T::one()
    } else if c < th.lower {
        T::zero()
    } else {
        c.max(T::zero()).min(T::one())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdPolicy {
    /// Per-task percentiles fitted on training confidences.
    Calibrated,
    Fixed {
        upper: f64,
        lower: f64,
    },
}

impl ThresholdPolicy {
    pub fn fixed_default() -> Self {
        ThresholdPolicy::Fixed {
            upper: FIXED_UPPER,
            lower: FIXED_LOWER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScorer<T> {
    pub prototypes: ClassPrototypes<T>,
    /// Frozen text embedding of the class name.
    pub text: Embedding<T>,
}

/// Everything needed to score one task's confidence for a feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfidenceModel<T> {
    pub task: TaskId,
    pub classes: Vec<ClassScorer<T>>,
    pub top_k: usize,
    pub thresholds: TaskThresholds<T>,
}

impl<T: Scalar> TaskConfidenceModel<T> {
    pub fn class_scores(&self, v: &[T], mode: ConfidenceMode) -> Result<Vec<T>> {
        self.classes
            .iter()
            .map(|c| {
                let vis = match mode {
                    ConfidenceMode::TextualOnly => T::zero(),
                    _ => visual_confidence(v, &c.prototypes)?,
                };
                let txt = match mode {
                    ConfidenceMode::VisualOnly => T::zero(),
                    _ => textual_confidence(v, c.text.as_slice())?,
                };
                Ok(joint_confidence(vis, txt, mode))
            })
            .collect()
    }

    pub fn task_confidence(&self, v: &[T], mode: ConfidenceMode) -> Result<T> {
        task_confidence(&self.class_scores(v, mode)?, self.top_k)
    }

    pub fn thresholds_for(&self, policy: ThresholdPolicy) -> TaskThresholds<T> {
        match policy {
            ThresholdPolicy::Calibrated => self.thresholds,
            ThresholdPolicy::Fixed { upper, lower } => TaskThresholds {
                task: self.task,
                upper: lit(upper),
                lower: lit(lower),
            },
        }
    }

    pub fn weight(&self, v: &[T], mode: ConfidenceMode, policy: ThresholdPolicy) -> Result<(T, T)> {
        let c = self.task_confidence(v, mode)?;
        Ok((c, prompting_weight(c, &self.thresholds_for(policy))))
    }
}

/// Per-class prototypes, training confidences, and calibrated thresholds
/// for one task, computed from frozen features only.
pub fn fit_task_confidence<T: Scalar, V: AsRef<[T]>>(
    task: TaskId,
    classes: &[(ClassId, Embedding<T>)],
    features: &[V],
    labels: &[ClassId],
    k: usize,
    restarts: usize,
    top_k: usize,
    mode: ConfidenceMode,
    rng: &mut Rng,
) -> Result<TaskConfidenceModel<T>> {
    if features.len() != labels.len() {
        return Err(Error::shape(
            "confidence fit labels",
            features.len(),
            labels.len(),
        ));
    }
    let mut scorers = Vec::with_capacity(classes.len());
    for (class, text) in classes {
        let own: Vec<&[T]> = features
            .iter()
            .zip(labels)
            .filter(|(_, l)| *l == class)
            .map(|(f, _)| f.as_ref())
            .collect();
        if own.is_empty() {
            return Err(Error::TaskDefinition(format!(
                "{class} of {task} has no training samples"
            )));
        }
        scorers.push(ClassScorer {
            prototypes: ClassPrototypes::fit(*class, &own, k, restarts, rng)?,
            text: text.clone(),
        });
    }
    let mut model = TaskConfidenceModel {
        task,
        classes: scorers,
        top_k,
        thresholds: TaskThresholds {
            task,
            upper: T::one(),
            lower: T::zero(),
        },
    };
    let confs = features
        .iter()
        .map(|f| model.task_confidence(f.as_ref(), mode))
        .collect::<Result<Vec<_>>>()?;
    model.thresholds = calibrate_thresholds(task, &confs)?;
    Ok(model)
}
