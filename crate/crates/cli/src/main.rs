use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use xmodal_core::benchmark::{compute_metrics, generate_benchmark, Ordering, ShotSpec};
use xmodal_core::confidence::ThresholdPolicy;
use xmodal_core::encoder::FrozenBackbone;
use xmodal_core::experiment::{
    ablation_variants, confidence_variants, format_suite, routing_variants, run, run_suite,
    shot_variants, ExperimentConfig,
};
use xmodal_core::trainer::{gradcheck, gradcheck_config, ClassTable};
use xmodal_core::{io, Error};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal adaptive prompting experiments on a synthetic multi-domain benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the task sequence and report the accuracy matrix.
    Run(RunArgs),
    /// Run an ablation suite and print the comparison table.
    Ablate {
        #[arg(long, default_value = "component", value_parser = ["component", "routing", "confidence", "shots"])]
        suite: String,
        /// Shots per class for the `shots` suite.
        #[arg(long, default_value_t = 16)]
        few_shots: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute Transfer / Average / Last from a stored matrix CSV.
    Metrics {
        matrix: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the frozen text prototypes of the configured benchmark.
    ExportProtos {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// text_prototype | visual_gaussian | visual_mean
    #[arg(long)]
    routing: Option<String>,
    /// joint | visual_only | textual_only
    #[arg(long)]
    confidence: Option<String>,
    /// symmetric | image_only | disabled
    #[arg(long)]
    gating: Option<String>,
    /// calibrated | fixed
    #[arg(long)]
    thresholds: Option<String>,
    /// identity | reverse | comma-separated permutation
    #[arg(long)]
    ordering: Option<String>,
    /// full | shots per class
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gumbel_tau: Option<f64>,
    #[arg(long)]
    logit_temperature: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    mode_spread: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    confusion: Option<f64>,
    #[arg(long)]
    modality_gap: Option<f64>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print the full record as JSON instead of tables.
    #[arg(long)]
    json: bool,
}

fn named<T: DeserializeOwned>(field: &str, value: &str) -> Result<T, Error> {
    serde_json::from_value(json!(value))
        .map_err(|_| Error::Config(format!("unknown {field} {value:?}")))
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut c: ExperimentConfig = match &self.config {
            Some(p) => io::read_json(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(v) = &self.routing {
            c.routing = named("routing", v)?;
        }
        if let Some(v) = &self.confidence {
            c.confidence = named("confidence", v)?;
        }
        if let Some(v) = &self.gating {
            c.gating = named("gating", v)?;
        }
        if let Some(v) = &self.thresholds {
            c.thresholds = match v.as_str() {
                "calibrated" => ThresholdPolicy::Calibrated,
                "fixed" => ThresholdPolicy::fixed_default(),
                _ => return Err(Error::Config(format!("unknown thresholds {v:?}"))),
            };
        }
        if let Some(v) = &self.ordering {
            c.ordering = match v.as_str() {
                "identity" => Ordering::Identity,
                "reverse" => Ordering::Reverse,
                p => Ordering::Permutation(
                    p.split(',')
                        .map(|x| x.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| Error::Config(format!("bad ordering {v:?}")))?,
                ),
            };
        }
        if let Some(v) = &self.shots {
            c.shots = match v.as_str() {
                "full" => ShotSpec::Full,
                k => ShotSpec::PerClass(
                    k.parse()
                        .map_err(|_| Error::Config(format!("bad shots {v:?}")))?,
                ),
            };
        }
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.gumbel_temperature, self.gumbel_tau);
        set(&mut t.logit_temperature, self.logit_temperature);
        set(&mut t.clusters, self.clusters);
        set(&mut t.top_k, self.top_k);
        let b = &mut c.benchmark;
        if let Some(n) = self.domains {
            let proto = b
                .domains
                .first()
                .cloned()
                .ok_or_else(|| Error::Config("no domains".into()))?;
            b.domains = vec![proto; n];
        }
        for d in b.domains.iter_mut() {
            set(&mut d.classes, self.classes);
            set(&mut d.modes, self.modes);
            set(&mut d.train_per_class, self.train_per_class);
            set(&mut d.test_per_class, self.test_per_class);
        }
        set(&mut b.shift, self.shift);
        set(&mut b.mode_spread, self.mode_spread);
        set(&mut b.noise, self.noise);
        set(&mut b.confusion, self.confusion);
        set(&mut b.modality_gap, self.modality_gap);
        set(&mut c.eval_batch_size, self.eval_batch_size);
        if let Some(o) = &self.output {
            c.output_dir = Some(o.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let record = run(&cfg)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&record)?);
            } else {
                println!("config {}", record.config_hash);
                for s in &record.seeds {
                    println!("seed {}", s.seed);
                    print!("{}", io::format_table(&s.matrix, Some(&s.metrics)));
                }
                println!(
                    "mean over {} seeds: Transfer {:.1}  Average {:.1}  Last {:.1}  ({:.1}s)",
                    record.seeds.len(),
                    100.0 * record.mean.transfer,
                    100.0 * record.mean.average,
                    100.0 * record.mean.last,
                    record.wall_clock_secs
                );
            }
        }
        Command::Ablate {
            suite,
            few_shots,
            run,
        } => {
            let cfg = run.config()?;
            let (title, variants) = match suite.as_str() {
                "component" => ("Component ablation", ablation_variants(&cfg)),
                "routing" => ("Routing strategy", routing_variants(&cfg)),
                "confidence" => ("Confidence combination", confidence_variants(&cfg)),
                _ => ("Routing under scarcity", shot_variants(&cfg, few_shots)),
            };
            let report = run_suite(title, &variants)?;
            if let Some(dir) = &cfg.output_dir {
                io::ensure_dir(dir)?;
                io::write_json(&dir.join("suite.json"), &report)?;
                std::fs::write(dir.join("suite.txt"), format_suite(&report))?;
            }
            if run.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", format_suite(&report));
            }
        }
        Command::Gradcheck { eps, seed } => {
            let r = gradcheck(&gradcheck_config(), eps, seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if r.max_error >= 1e-4 {
                anyhow::bail!(Error::Calibration(format!(
                    "max relative error {:.3e}",
                    r.max_error
                )));
            }
        }
        Command::Metrics { matrix, json } => {
            let text = std::fs::read_to_string(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            let (hash, m) = io::matrix_from_csv(&text)?;
            let metrics = compute_metrics(&m)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(
                        &json!({ "config_hash": hash, "metrics": metrics })
                    )?
                );
            } else {
                println!("config {hash}");
                print!("{}", io::format_table(&m, Some(&metrics)));
            }
        }
        Command::ExportProtos { out, seed, run } => {
            let cfg = run.config()?;
            let backbone = FrozenBackbone::<f64>::new(&cfg.encoder)?;
            let bench = generate_benchmark(&cfg.benchmark, &backbone, seed)?;
            let book = ClassTable::build(&backbone, &bench.task_classes())?.text_book()?;
            io::write_prototype_book(&out, &book, &cfg.hash())?;
            println!("wrote {} prototypes to {}", book.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ("config", 2),
                Some(err) => (err.kind(), 1),
                None => ("io", 1),
            };
            let record = json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
