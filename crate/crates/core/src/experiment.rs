//! End-to-end runs over the synthetic benchmark and the ablation suites.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{
    apply_order, compute_metrics, generate_benchmark, subsample_shots, AccuracyMatrix,
    BenchmarkSpec, Metrics, Ordering, ShotSpec,
};
use crate::confidence::{ConfidenceMode, ThresholdPolicy};
use crate::encoder::{EncoderConfig, FrozenBackbone, Side};
use crate::error::{Error, Result};
use crate::gating::count_text_gate_params;
use crate::io;
use crate::numerics::Embedding;
use crate::routing::RoutingStrategy;
use crate::trainer::{
    frozen_features, train_task, ClassTable, GatingMode, LabelSpace, Pipeline, Switches, TaskState,
    TrainConfig,
};
use crate::TaskId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub benchmark: BenchmarkSpec,
    pub routing: RoutingStrategy,
    pub confidence: ConfidenceMode,
    pub thresholds: ThresholdPolicy,
    pub gating: GatingMode,
    pub ordering: Ordering,
    pub shots: ShotSpec,
    pub seeds: Vec<u64>,
    pub eval_batch_size: usize,
    /// Not part of the config hash.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            benchmark: BenchmarkSpec::default(),
            routing: RoutingStrategy::TextPrototype,
            confidence: ConfidenceMode::Joint,
            thresholds: ThresholdPolicy::Calibrated,
            gating: GatingMode::Symmetric,
            ordering: Ordering::Identity,
            shots: ShotSpec::Full,
            seeds: vec![0, 1, 2, 3, 4],
            eval_batch_size: 32,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.benchmark
            .validate(self.encoder.text_tokens, self.encoder.vocab_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if self.shots == ShotSpec::PerClass(0) {
            return Err(Error::Config("shots per class must be positive".into()));
        }
        let n = self.benchmark.domains.len();
        let mut perm = self.ordering.permutation(n);
        perm.sort_unstable();
        if perm != (0..n).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "ordering is not a permutation of {n} tasks"
            )));
        }
        if let ThresholdPolicy::Fixed { upper, lower } = self.thresholds {
            if !(lower <= upper) {
                return Err(Error::Config("fixed thresholds need lower <= upper".into()));
            }
        }
        Ok(())
    }

    pub fn switches(&self) -> Switches {
        Switches {
            routing: self.routing,
            confidence: self.confidence,
            thresholds: self.thresholds,
            gating: self.gating,
        }
    }

    /// SHA-256 of the JSON serialization with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub prompts_per_task: usize,
    pub image_gates_per_task: usize,
    pub text_gates_per_task: usize,
    pub tasks: usize,
    pub total_trainable: usize,
    pub frozen: usize,
}

/// Trainable-parameter budget of an encoder shape over `tasks` tasks.
pub fn parameter_counts(enc: &EncoderConfig, tasks: usize, gating: GatingMode) -> ParameterCounts {
    let prompts = enc.prompt_params_per_task();
    let image = match gating {
        GatingMode::Disabled => 0,
        _ => enc.image_layers * 2 * enc.embed_dim,
    };
    let text = match gating {
        GatingMode::Symmetric => count_text_gate_params(1, enc.text_layers, enc.embed_dim),
        _ => 0,
    };
    ParameterCounts {
        prompts_per_task: prompts,
        image_gates_per_task: image,
        text_gates_per_task: text,
        tasks,
        total_trainable: tasks * (prompts + image + text),
        frozen: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub task_order: Vec<TaskId>,
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    /// Mean loss per epoch, per task.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Digest of every trained state after each training stage.
    pub stage_digests: Vec<Vec<String>>,
    pub backbone_digests: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub transfer: f64,
    pub average: f64,
    pub last: f64,
}

impl From<&Metrics> for Headline {
    fn from(m: &Metrics) -> Self {
        Headline {
            transfer: m.transfer,
            average: m.average,
            last: m.last,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub backbone_digest: String,
    pub seeds: Vec<SeedRecord>,
    pub mean: Headline,
    pub parameters: ParameterCounts,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }
}

fn mean_headline(seeds: &[SeedRecord]) -> Headline {
    let n = seeds.len() as f64;
    Headline {
        transfer: seeds.iter().map(|s| s.metrics.transfer).sum::<f64>() / n,
        average: seeds.iter().map(|s| s.metrics.average).sum::<f64>() / n,
        last: seeds.iter().map(|s| s.metrics.last).sum::<f64>() / n,
    }
}

/// Trains the sequence for one seed and fills the accuracy matrix.
pub fn run_seed(
    cfg: &ExperimentConfig,
    backbone: &FrozenBackbone<f64>,
    seed: u64,
) -> Result<(SeedRecord, Vec<TaskState<f64>>)> {
    let raw = generate_benchmark(&cfg.benchmark, backbone, seed)?;
    let mut bench = apply_order(&raw, &cfg.ordering.permutation(raw.tasks.len()))?;
    for t in bench.tasks.iter_mut() {
        *t = subsample_shots(t, cfg.shots, seed)?;
    }
    let table = ClassTable::build(backbone, &bench.task_classes())?;
    let frozen_test: Vec<Vec<Embedding<f64>>> = bench
        .tasks
        .iter()
        .map(|t| frozen_features(backbone, &t.test.inputs))
        .collect::<Result<_>>()?;
    let switches = cfg.switches();
    let n = bench.tasks.len();
    let mut matrix = AccuracyMatrix::new(n);
    let mut states: Vec<TaskState<f64>> = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut stage_digests = Vec::new();
    let mut backbone_digests = vec![backbone.parameter_digest()];
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    for i in 0..=n {
        if i > 0 {
            let t = &bench.tasks[i - 1];
            let (state, report) = train_task(
                backbone,
                t.task,
                &t.classes,
                &t.train.inputs,
                &t.train.labels,
                &train_cfg,
                &switches,
            )?;
            states.push(state);
            epoch_losses.push(report.epoch_losses);
            stage_digests.push(states.iter().map(|s| s.digest()).collect());
            backbone_digests.push(backbone.parameter_digest());
        }
        let pipeline = Pipeline::new(
            backbone,
            &table,
            states.iter(),
            switches,
            cfg.eval_batch_size,
        )?;
        for (j, t) in bench.tasks.iter().enumerate() {
            let space = LabelSpace::Fixed(t.classes.iter().map(|c| c.id).collect());
            let acc = pipeline.accuracy(
                &t.test.inputs,
                Some(&frozen_test[j]),
                &t.test.labels,
                &space,
            )?;
            matrix.set(i, j, acc)?;
        }
    }
    let metrics = compute_metrics(&matrix)?;
    Ok((
        SeedRecord {
            seed,
            task_order: bench.tasks.iter().map(|t| t.task).collect(),
            matrix,
            metrics,
            epoch_losses,
            stage_digests,
            backbone_digests,
        },
        states,
    ))
}

/// Runs every seed (in parallel) and persists results when `output_dir` is set.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let backbone = FrozenBackbone::<f64>::new(&cfg.encoder)?;
    let hash = cfg.hash();
    let outcomes: Vec<(SeedRecord, Vec<TaskState<f64>>)> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, &backbone, s))
        .collect::<Result<_>>()?;
    let gating = cfg.gating;
    let mut parameters = parameter_counts(&cfg.encoder, cfg.benchmark.domains.len(), gating);
    parameters.frozen = backbone.frozen_weight_count();
    let seeds: Vec<SeedRecord> = outcomes.iter().map(|o| o.0.clone()).collect();
    let record = RunRecord {
        config_hash: hash.clone(),
        config: cfg.clone(),
        backbone_digest: backbone.parameter_digest(),
        mean: mean_headline(&seeds),
        seeds,
        parameters,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &cfg.output_dir {
        persist(dir, &record, &outcomes, &backbone)?;
    }
    Ok(record)
}

fn persist(
    dir: &Path,
    record: &RunRecord,
    outcomes: &[(SeedRecord, Vec<TaskState<f64>>)],
    backbone: &FrozenBackbone<f64>,
) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_json(&dir.join("record.json"), record)?;
    io::write_json(&dir.join("config.json"), &record.config)?;
    for (seed, states) in outcomes {
        let sd = io::ensure_dir(&dir.join(format!("seed_{}", seed.seed)))?;
        std::fs::write(
            sd.join("matrix.csv"),
            io::matrix_to_csv(&seed.matrix, &record.config_hash),
        )?;
        std::fs::write(
            sd.join("table.txt"),
            format!(
                "config {}\n{}",
                record.config_hash,
                io::format_table(&seed.matrix, Some(&seed.metrics))
            ),
        )?;
        for s in states {
            io::write_checkpoint(
                &sd.join("checkpoints").join(s.task.to_string()),
                s,
                &record.config_hash,
            )?;
        }
        let classes: Vec<_> = states.iter().map(|s| (s.task, s.classes.clone())).collect();
        if !classes.is_empty() {
            let book = ClassTable::build(backbone, &classes)?.text_book()?;
            io::write_prototype_book(&sd.join("prototypes"), &book, &record.config_hash)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

fn variant(name: &str, base: &ExperimentConfig, f: impl FnOnce(&mut ExperimentConfig)) -> Variant {
    let mut c = base.clone();
    f(&mut c);
    if let Some(d) = &base.output_dir {
        c.output_dir = Some(d.join(slug(name)));
    }
    Variant {
        name: name.to_string(),
        config: c,
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Full model and one single-removal variant per component.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<Variant> {
    vec![
        variant("Full model", base, |_| {}),
        variant("w/o text routing", base, |c| {
            c.routing = RoutingStrategy::VisualGaussian
        }),
        variant("w/o MPVTC", base, |c| {
            c.train.clusters = 1;
            c.confidence = ConfidenceMode::VisualOnly;
            c.thresholds = ThresholdPolicy::fixed_default();
        }),
        variant("w/o sym. gating", base, |c| {
            c.gating = GatingMode::ImageOnly
        }),
    ]
}

pub fn routing_variants(base: &ExperimentConfig) -> Vec<Variant> {
    [
        RoutingStrategy::VisualGaussian,
        RoutingStrategy::VisualMean,
        RoutingStrategy::TextPrototype,
    ]
    .into_iter()
    .map(|r| variant(r.label(), base, |c| c.routing = r))
    .collect()
}

pub fn confidence_variants(base: &ExperimentConfig) -> Vec<Variant> {
    [
        ConfidenceMode::VisualOnly,
        ConfidenceMode::TextualOnly,
        ConfidenceMode::Joint,
    ]
    .into_iter()
    .map(|m| variant(m.label(), base, |c| c.confidence = m))
    .collect()
}

/// Text versus Gaussian routing at full data and at `shots` per class.
pub fn shot_variants(base: &ExperimentConfig, shots: usize) -> Vec<Variant> {
    let mut out = Vec::new();
    for (tag, s) in [("full", ShotSpec::Full), ("few", ShotSpec::PerClass(shots))] {
        for r in [
            RoutingStrategy::TextPrototype,
            RoutingStrategy::VisualGaussian,
        ] {
            let name = match s {
                ShotSpec::Full => format!("{} ({tag})", r.label()),
                ShotSpec::PerClass(k) => format!("{} ({k}-shot)", r.label()),
            };
            out.push(variant(&name, base, |c| {
                c.routing = r;
                c.shots = s;
            }));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub config_hash: String,
    pub per_seed: Vec<(u64, Headline)>,
    pub mean: Headline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<SuiteRow>,
    pub records: Vec<RunRecord>,
}

impl SuiteReport {
    pub fn row(&self, name: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn run_suite(suite: &str, variants: &[Variant]) -> Result<SuiteReport> {
    for v in variants {
        v.config.validate()?;
    }
    let records: Vec<RunRecord> = variants
        .par_iter()
        .map(|v| run(&v.config))
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .zip(&records)
        .map(|(v, r)| SuiteRow {
            name: v.name.clone(),
            config_hash: r.config_hash.clone(),
            per_seed: r
                .seeds
                .iter()
                .map(|s| (s.seed, Headline::from(&s.metrics)))
                .collect(),
            mean: r.mean,
        })
        .collect();
    Ok(SuiteReport {
        suite: suite.to_string(),
        rows,
        records,
    })
}

/// Rows of variants with Transfer / Average / Last in percent, mean over
/// seeds followed by each seed.
pub fn format_suite(report: &SuiteReport) -> String {
    let mut s = String::new();
    let width = report
        .rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let _ = writeln!(s, "{}", report.suite);
    let _ = writeln!(
        s,
        "{:<width$}  {:>8} {:>8} {:>8}",
        "", "Transfer", "Average", "Last"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.1} {:>8.1} {:>8.1}",
            r.name,
            100.0 * r.mean.transfer,
            100.0 * r.mean.average,
            100.0 * r.mean.last
        );
        for (seed, h) in &r.per_seed {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.1} {:>8.1} {:>8.1}",
                format!("  seed {seed}"),
                100.0 * h.transfer,
                100.0 * h.average,
                100.0 * h.last
            );
        }
    }
    s
}

/// Trainable-parameter report for the full model at a given shape.
pub fn parameter_report(enc: &EncoderConfig, tasks: usize) -> ParameterCounts {
    let mut p = parameter_counts(enc, tasks, GatingMode::Symmetric);
    let gate_bank = crate::gating::GateBank::<f64>::zeros(TaskId(0), enc, 3.0);
    debug_assert_eq!(gate_bank.parameter_count(Side::Text), p.text_gates_per_task);
    p.frozen = 0;
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_fail_validation() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig {
            ordering: Ordering::Permutation(vec![0, 0, 1, 2]),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.benchmark.domains.truncate(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_scale_parameter_budget() {
        let p = parameter_report(&EncoderConfig::full_scale(), 11);
        assert_eq!(p.text_gates_per_task * 11, 90_112);
        let total = p.total_trainable as f64;
        assert!((total - 2.5e6).abs() / 2.5e6 <= 0.05, "{total}");
    }

    #[test]
    fn suite_variants_map_switches() {
        let base = ExperimentConfig::default();
        let a = ablation_variants(&base);
        assert_eq!(a.len(), 4);
        assert_eq!(a[1].config.routing, RoutingStrategy::VisualGaussian);
        assert_eq!(a[2].config.train.clusters, 1);
        assert_eq!(a[3].config.gating, GatingMode::ImageOnly);
        let r = routing_variants(&base);
        assert_eq!(
            r.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(),
            [
                "Visual Gaussian (diagonal)",
                "Visual mean prototype",
                "Text prototype"
            ]
        );
        assert_eq!(slug("w/o sym. gating"), "w_o_sym_gating");
    }
}
