//! Synthetic multi-domain benchmark, task orderings, few-shot subsampling,
//! and the Transfer / Average / Last summaries of an accuracy matrix.
//!
//! Samples live in the image tower's input space. Each class gets an anchor
//! patch matrix, found by gradient ascent on the frozen tower, whose feature
//! points at a target built from the class-name text embedding: blended toward
//! a sibling class of the same domain (`confusion`) and pushed along one shared
//! direction orthogonal to every class text (`modality_gap`). Samples add
//! per-class mode offsets, a per-domain shift, and isotropic noise, all scaled
//! to the anchor's RMS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::FrozenBackbone;
use crate::error::{Error, Result};
use crate::numerics::{lit, to_f64, Mat, Rng, Scalar};
use crate::tape::Tape;
use crate::trainer::ClassSpec;
use crate::{ClassId, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub classes: usize,
    /// Visual modes per class (1 to 3 in the default benchmark).
    pub modes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub domains: Vec<DomainSpec>,
    /// Per-domain input shift, relative to the anchor RMS.
    pub shift: f64,
    /// Distance of each visual mode from the class anchor.
    pub mode_spread: f64,
    pub noise: f64,
    /// Blend of each anchor target toward the next class of its domain.
    pub confusion: f64,
    /// Weight of the shared image-only direction in every anchor target.
    pub modality_gap: f64,
    /// Leading tokens of every class name shared within a domain.
    pub domain_tokens: usize,
    pub inversion_steps: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            domains: vec![
                DomainSpec {
                    classes: 5,
                    modes: 3,
                    train_per_class: 64,
                    test_per_class: 25,
                };
                4
            ],
            shift: 0.5,
            mode_spread: 0.5,
            noise: 0.3,
            confusion: 0.4,
            modality_gap: 0.5,
            domain_tokens: 2,
            inversion_steps: 200,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self, text_tokens: usize, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(Error::DegenerateInput(m));
        if self.domains.len() < 2 {
            return bad(format!(
                "need at least 2 domains, got {}",
                self.domains.len()
            ));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.classes < 2 {
                return bad(format!(
                    "domain {i} has {} classes, need at least 2",
                    d.classes
                ));
            }
            if d.modes == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
                return bad(format!("domain {i} needs positive modes and sample counts"));
            }
        }
        if !(self.shift >= 0.0
            && self.mode_spread >= 0.0
            && self.noise >= 0.0
            && self.modality_gap >= 0.0)
        {
            return bad("shift, mode_spread, noise and modality_gap must be non-negative".into());
        }
        if !(0.0..0.5).contains(&self.confusion) {
            return bad(format!("confusion {} outside [0, 0.5)", self.confusion));
        }
        if self.domain_tokens >= text_tokens {
            return bad(format!(
                "{} domain tokens leave no room for class tokens in a {text_tokens}-token name",
                self.domain_tokens
            ));
        }
        let classes: usize = self.domains.iter().map(|d| d.classes).sum();
        let needed =
            self.domains.len() * self.domain_tokens + classes * (text_tokens - self.domain_tokens);
        if needed > vocab {
            return bad(format!(
                "names need {needed} distinct tokens, vocabulary has {vocab}"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split<T> {
    /// Benchmark-unique sample ids.
    pub ids: Vec<u64>,
    pub inputs: Vec<Mat<T>>,
    pub labels: Vec<ClassId>,
}

impl<T> Split<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData<T> {
    pub task: TaskId,
    pub domain: usize,
    pub classes: Vec<ClassSpec>,
    pub train: Split<T>,
    pub test: Split<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark<T> {
    pub seed: u64,
    /// Tasks in training order.
    pub tasks: Vec<TaskData<T>>,
}

impl<T> Benchmark<T> {
    pub fn task_classes(&self) -> Vec<(TaskId, Vec<ClassSpec>)> {
        self.tasks
            .iter()
            .map(|t| (t.task, t.classes.clone()))
            .collect()
    }
}

fn rms<T: Scalar>(m: &Mat<T>) -> f64 {
    to_f64(m.frobenius()) / (m.data().len() as f64).sqrt()
}

/// Patch matrix whose frozen image feature has maximal cosine with `target`.
pub fn invert_anchor<T: Scalar>(
    backbone: &FrozenBackbone<T>,
    target: &[T],
    steps: usize,
    rng: &mut Rng,
) -> Result<Mat<T>> {
    let cfg = backbone.config();
    if target.len() != cfg.embed_dim {
        return Err(Error::shape("anchor target", cfg.embed_dim, target.len()));
    }
    let tower = backbone.image();
    let goal = crate::numerics::Embedding(target.to_vec()).normalized()?;
    let mut x: Mat<T> = Mat::random_normal(cfg.image_tokens, cfg.patch_dim, 1.0, rng);
    let n = x.data().len();
    let (b1, b2, lr, eps) = (0.9, 0.999, 0.05, 1e-8);
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for step in 1..=steps {
        let mut tape = Tape::new();
        let bound = tower.bind(&mut tape);
        let xi = tape.var(x.clone());
        let h0 = tower.embed_patches(&mut tape, &bound, xi)?;
        let f = tower.forward(&mut tape, &bound, h0, &[])?;
        let f = tape.l2_normalize_rows(f);
        let g = tape.constant(Mat::row_vector(goal.0.clone()));
        let c = tape.matmul_nt(f, g);
        let grads = tape.backward(c);
        let Some(gx) = grads.get(xi) else { break };
        // ascent on the cosine
        for k in 0..n {
            let gk = to_f64(gx.data()[k]);
            m1[k] = b1 * m1[k] + (1.0 - b1) * gk;
            m2[k] = b2 * m2[k] + (1.0 - b2) * gk * gk;
            let mh = m1[k] / (1.0 - f64::powi(b1, step as i32));
            let vh = m2[k] / (1.0 - f64::powi(b2, step as i32));
            let v = to_f64(x.data()[k]) + lr * mh / (vh.sqrt() + eps);
            x.data_mut()[k] = lit(v);
        }
    }
    Ok(x)
}

/// Random unit vector with the span of `texts` projected out. Falls back to the
/// raw draw when the texts span the whole space.
fn gap_direction<T: Scalar>(
    texts: &[crate::numerics::Embedding<T>],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let d = texts
        .first()
        .map(|e| e.0.len())
        .ok_or_else(|| Error::DegenerateInput("no classes".into()))?;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for e in texts {
        let mut b: Vec<f64> = e.0.iter().map(|&x| to_f64(x)).collect();
        for q in &basis {
            let p: f64 = b.iter().zip(q).map(|(x, y)| x * y).sum();
            b.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(b.into_iter().map(|x| x / n).collect());
        }
    }
    let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut u = raw.clone();
    for q in &basis {
        let p: f64 = u.iter().zip(q).map(|(x, y)| x * y).sum();
        u.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
    }
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (u, n) = if n > 1e-6 {
        (u, n)
    } else {
        (raw.clone(), raw.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    Ok(u.into_iter().map(|x| x / n).collect())
}

/// Deterministic synthetic benchmark; one task per domain, in domain order.
pub fn generate_benchmark<T: Scalar>(
    spec: &BenchmarkSpec,
    backbone: &FrozenBackbone<T>,
    seed: u64,
) -> Result<Benchmark<T>> {
    let cfg = backbone.config();
    spec.validate(cfg.text_tokens, cfg.vocab_size)?;
    let mut rng = Rng::derive(seed, 0xda7a);
    let mut vocab: Vec<u32> = (0..cfg.vocab_size as u32).collect();
    rng.shuffle(&mut vocab);
    let mut next_token = vocab.into_iter();
    let mut take = |k: usize| -> Vec<u32> { (&mut next_token).take(k).collect() };

    struct ClassPlan {
        domain: usize,
        spec: ClassSpec,
        modes: usize,
    }
    let mut plans = Vec::new();
    let mut shifts = Vec::new();
    let mut class_id = 0u32;
    for (d, dom) in spec.domains.iter().enumerate() {
        let prefix = take(spec.domain_tokens);
        shifts.push(Mat::<T>::random_normal(
            cfg.image_tokens,
            cfg.patch_dim,
            1.0,
            &mut rng,
        ));
        for _ in 0..dom.classes {
            let mut tokens = prefix.clone();
            tokens.extend(take(cfg.text_tokens - spec.domain_tokens));
            plans.push(ClassPlan {
                domain: d,
                spec: ClassSpec {
                    id: ClassId(class_id),
                    tokens,
                },
                modes: dom.modes,
            });
            class_id += 1;
        }
    }

    let texts = plans
        .iter()
        .map(|p| backbone.frozen_text(&p.spec.tokens)?.normalized())
        .collect::<Result<Vec<_>>>()?;
    let gap = gap_direction(&texts, &mut rng)?;
    let targets: Vec<Vec<T>> = plans
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // sibling: next class of the same domain, cyclically
            let first = plans.iter().position(|q| q.domain == p.domain).unwrap_or(i);
            let count = spec.domains[p.domain].classes;
            let sib = first + (i - first + 1) % count;
            (0..cfg.embed_dim)
                .map(|k| {
                    let e = (1.0 - spec.confusion) * to_f64(texts[i].0[k])
                        + spec.confusion * to_f64(texts[sib].0[k]);
                    lit(e + spec.modality_gap * gap[k])
                })
                .collect()
        })
        .collect();

    // per-class anchors and mode offsets, each from its own stream
    let generators = plans
        .par_iter()
        .zip(targets.par_iter())
        .map(|(p, target)| {
            let mut crng = Rng::derive(seed, 0x00c1_0000 + p.spec.id.0 as u64);
            let anchor = invert_anchor(backbone, target, spec.inversion_steps, &mut crng)?;
            let modes: Vec<Mat<T>> = if p.modes == 1 {
                vec![Mat::zeros(cfg.image_tokens, cfg.patch_dim)]
            } else {
                (0..p.modes)
                    .map(|_| Mat::random_normal(cfg.image_tokens, cfg.patch_dim, 1.0, &mut crng))
                    .collect()
            };
            Ok((anchor, modes, crng))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tasks: Vec<TaskData<T>> = spec
        .domains
        .iter()
        .enumerate()
        .map(|(d, _)| TaskData {
            task: TaskId(d as u32),
            domain: d,
            classes: Vec::new(),
            train: Split {
                ids: Vec::new(),
                inputs: Vec::new(),
                labels: Vec::new(),
            },
            test: Split {
                ids: Vec::new(),
                inputs: Vec::new(),
                labels: Vec::new(),
            },
        })
        .collect();

    let mut next_id = 0u64;
    for (p, (anchor, modes, mut crng)) in plans.iter().zip(generators) {
        let dom = &spec.domains[p.domain];
        let scale = rms(&anchor);
        let shift = &shifts[p.domain];
        let task = &mut tasks[p.domain];
        task.classes.push(p.spec.clone());
        for (count, split) in [(dom.train_per_class, 0), (dom.test_per_class, 1)] {
            for _ in 0..count {
                let m = crng.below(modes.len());
                let mut x = anchor.clone();
                x.axpy(lit(spec.mode_spread * scale), &modes[m]);
                x.axpy(lit(spec.shift * scale), shift);
                let noise = Mat::random_normal(cfg.image_tokens, cfg.patch_dim, 1.0, &mut crng);
                x.axpy(lit(spec.noise * scale), &noise);
                let s = if split == 0 {
                    &mut task.train
                } else {
                    &mut task.test
                };
                s.ids.push(next_id);
                s.inputs.push(x);
                s.labels.push(p.spec.id);
                next_id += 1;
            }
        }
    }
    Ok(Benchmark { seed, tasks })
}

/// Task sequence permutation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Identity,
    Reverse,
    Permutation(Vec<usize>),
}

impl Ordering {
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        match self {
            Ordering::Identity => (0..n).collect(),
            Ordering::Reverse => (0..n).rev().collect(),
            Ordering::Permutation(p) => p.clone(),
        }
    }
}

/// Reorders the task sequence; the tasks themselves are untouched.
/// Position `k` of the result is task `perm[k]` of the input.
pub fn apply_order<T: Clone>(bench: &Benchmark<T>, perm: &[usize]) -> Result<Benchmark<T>> {
    let n = bench.tasks.len();
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Parameter(format!(
            "permutation of length {} for {n} tasks",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Parameter(format!(
                "{perm:?} is not a permutation of 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(Benchmark {
        seed: bench.seed,
        tasks: perm.iter().map(|&p| bench.tasks[p].clone()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotSpec {
    Full,
    PerClass(usize),
}

/// Keeps `min(k, n_c)` training samples per class, chosen per seed; the
/// kept samples retain their original order. The test split is untouched.
pub fn subsample_shots<T: Clone>(
    task: &TaskData<T>,
    shots: ShotSpec,
    seed: u64,
) -> Result<TaskData<T>> {
    let k = match shots {
        ShotSpec::Full => return Ok(task.clone()),
        ShotSpec::PerClass(0) => {
            return Err(Error::Parameter("shots per class must be positive".into()))
        }
        ShotSpec::PerClass(k) => k,
    };
    let mut keep = Vec::new();
    for c in &task.classes {
        let mut idx: Vec<usize> = (0..task.train.len())
            .filter(|&i| task.train.labels[i] == c.id)
            .collect();
        if idx.is_empty() {
            return Err(Error::DegenerateInput(format!(
                "{} has no training samples",
                c.id
            )));
        }
        let mut rng = Rng::derive(seed, 0x5407_0000 + c.id.0 as u64);
        rng.shuffle(&mut idx);
        idx.truncate(k);
        keep.extend(idx);
    }
    keep.sort_unstable();
    let mut out = task.clone();
    out.train = Split {
        ids: keep.iter().map(|&i| task.train.ids[i]).collect(),
        inputs: keep.iter().map(|&i| task.train.inputs[i].clone()).collect(),
        labels: keep.iter().map(|&i| task.train.labels[i]).collect(),
    };
    Ok(out)
}

/// `A[i][j]`: accuracy on the `j`-th task of the sequence after training
/// `i` tasks; row 0 is the untrained model. Columns are 0-based here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            cells: vec![None; (tasks + 1) * tasks],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.len() != t + 1 {
            return Err(Error::shape("accuracy matrix rows", t + 1, rows.len()));
        }
        let mut m = Self::new(t);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != t {
                return Err(Error::shape("accuracy matrix row", t, r.len()));
            }
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if i > self.tasks || j >= self.tasks {
            return Err(Error::Parameter(format!(
                "cell ({i}, {j}) outside a {}-task matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Parameter(format!("accuracy {acc} outside [0, 1]")));
        }
        self.cells[i * self.tasks + j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i > self.tasks || j >= self.tasks {
            return None;
        }
        self.cells[i * self.tasks + j]
    }

    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.cells
            .chunks(self.tasks.max(1))
            .map(|r| r.to_vec())
            .take(self.tasks + 1)
            .collect()
    }

    pub fn missing(&self) -> Vec<(usize, usize)> {
        (0..=self.tasks)
            .flat_map(|i| (0..self.tasks).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j).is_none())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub transfer: f64,
    pub average: f64,
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub transfer: f64,
    pub average: f64,
    pub last: f64,
    pub per_task: Vec<TaskMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Per task `j` (1-based): Transfer over rows `0..j`, Average over rows
/// `1..=T`, Last from row `T`. Headline Transfer averages tasks `j >= 2`
/// (task 1 alone for a single-task matrix).
pub fn compute_metrics(a: &AccuracyMatrix) -> Result<Metrics> {
    let t = a.tasks();
    if t == 0 {
        return Err(Error::Empty("accuracy matrix with no tasks"));
    }
    let missing = a.missing();
    if !missing.is_empty() {
        return Err(Error::MissingEntries(format!(
            "{} cells, first {:?}",
            missing.len(),
            missing[0]
        )));
    }
    let cell = |i: usize, j: usize| a.get(i, j).expect("checked complete");
    let per_task: Vec<TaskMetrics> = (1..=t)
        .map(|j| TaskMetrics {
            transfer: mean((0..j).map(|i| cell(i, j - 1))),
            average: mean((1..=t).map(|i| cell(i, j - 1))),
            last: cell(t, j - 1),
        })
        .collect();
    let transfer = if t >= 2 {
        mean(per_task[1..].iter().map(|m| m.transfer))
    } else {
        per_task[0].transfer
    };
    Ok(Metrics {
        transfer,
        average: mean(per_task.iter().map(|m| m.average)),
        last: mean(per_task.iter().map(|m| m.last)),
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_example() {
        let a =
            AccuracyMatrix::from_rows(&[vec![0.3, 0.2], vec![0.5, 0.2], vec![0.4, 0.6]]).unwrap();
        let m = compute_metrics(&a).unwrap();
        assert!((m.transfer - 0.2).abs() < 1e-15);
        assert!((m.last - 0.5).abs() < 1e-15);
        assert!((m.average - 0.425).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix() {
        let a = AccuracyMatrix::from_rows(&vec![vec![0.375; 4]; 5]).unwrap();
        let m = compute_metrics(&a).unwrap();
        assert_eq!((m.transfer, m.average, m.last), (0.375, 0.375, 0.375));
    }

    #[test]
    fn excluded_cells_do_not_matter() {
        let mut rng = Rng::seed(4);
        let t = 4;
        let rows: Vec<Vec<f64>> = (0..=t)
            .map(|_| (0..t).map(|_| rng.uniform()).collect())
            .collect();
        let base = compute_metrics(&AccuracyMatrix::from_rows(&rows).unwrap()).unwrap();
        // Transfer ignores i >= j; Last ignores rows below T
        let mut poisoned = rows.clone();
        for (i, row) in poisoned.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i > j {
                    *v = 0.987;
                }
            }
        }
        let m = compute_metrics(&AccuracyMatrix::from_rows(&poisoned).unwrap()).unwrap();
        assert_eq!(m.transfer, base.transfer);
        let mut poisoned = rows.clone();
        for row in poisoned.iter_mut().take(t) {
            row.iter_mut().for_each(|v| *v = 0.123);
        }
        let m = compute_metrics(&AccuracyMatrix::from_rows(&poisoned).unwrap()).unwrap();
        assert_eq!(m.last, base.last);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut a = AccuracyMatrix::new(2);
        a.set(0, 0, 0.5).unwrap();
        assert!(matches!(compute_metrics(&a), Err(Error::MissingEntries(_))));
        assert!(a.set(3, 0, 0.5).is_err());
        assert!(a.set(0, 0, 1.5).is_err());
    }

    #[test]
    fn ordering_permutations() {
        assert_eq!(Ordering::Reverse.permutation(3), vec![2, 1, 0]);
        assert_eq!(Ordering::Identity.permutation(2), vec![0, 1]);
    }
}
