//! On-disk formats.
//!
//! Matrices use the `EMB1` binary layout: the 4 magic bytes, `u32` rows and
//! `u32` cols (little-endian), then row-major little-endian `f32` values.
//! Indexes and manifests are JSON; accuracy matrices also emit as CSV
//! records and a plain-text table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::{AccuracyMatrix, Metrics};
use crate::confidence::{ClassPrototypes, ClassScorer, TaskConfidenceModel, TaskThresholds};
use crate::encoder::{PromptPool, PromptSide};
use crate::error::{Error, Result};
use crate::gating::GateBank;
use crate::numerics::{lit, to_f64, Embedding, Mat, Scalar};
use crate::routing::{DiagonalGaussian, TextPrototypeBook};
use crate::trainer::{ClassSpec, TaskState};
use crate::{ClassId, TaskId};

pub const MAGIC: &[u8; 4] = b"EMB1";

pub fn encode_matrix<T: Scalar>(m: &Mat<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix<T: Scalar>(bytes: &[u8]) -> Result<Mat<T>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing EMB1 header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format(format!("header {rows}x{cols} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{rows}x{cols} matrix needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| lit::<T>(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Mat::from_vec(rows, cols, data)
}

pub fn write_matrix<T: Scalar>(path: &Path, m: &Mat<T>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Mat<T>> {
    decode_matrix(&fs::read(path)?)
}

/// Rows of an `EMB1` file as embeddings, e.g. features exported from a real model.
pub fn read_embeddings<T: Scalar>(path: &Path) -> Result<Vec<Embedding<T>>> {
    let m: Mat<T> = read_matrix(path)?;
    Ok((0..m.rows())
        .map(|r| Embedding(m.row(r).to_vec()))
        .collect())
}

pub fn write_embeddings<T: Scalar>(path: &Path, rows: &[Embedding<T>]) -> Result<()> {
    let m = Mat::from_rows(&rows.iter().map(|e| e.0.clone()).collect::<Vec<_>>())?;
    write_matrix(path, &m)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BookEntry {
    pub task: TaskId,
    pub classes: Vec<ClassId>,
    /// Row of the prototype in `prototypes.emb`.
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BookIndex {
    pub config_hash: String,
    pub tasks: Vec<BookEntry>,
}

/// Writes `prototypes.emb` and `index.json` into `dir`.
pub fn write_prototype_book<T: Scalar>(
    dir: &Path,
    book: &TextPrototypeBook<T>,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut tasks = Vec::new();
    for (row, (task, e)) in book.iter().enumerate() {
        rows.push(e.prototype.clone());
        tasks.push(BookEntry {
            task: *task,
            classes: e.classes.clone(),
            row,
        });
    }
    write_embeddings(&dir.join("prototypes.emb"), &rows)?;
    write_json(
        &dir.join("index.json"),
        &BookIndex {
            config_hash: config_hash.to_string(),
            tasks,
        },
    )
}

pub fn read_prototype_book<T: Scalar>(dir: &Path) -> Result<(BookIndex, Vec<Embedding<T>>)> {
    let index: BookIndex = read_json(&dir.join("index.json"))?;
    let rows = read_embeddings(&dir.join("prototypes.emb"))?;
    if let Some(e) = index.tasks.iter().find(|e| e.row >= rows.len()) {
        return Err(Error::Format(format!(
            "{} points at missing row {}",
            e.task, e.row
        )));
    }
    Ok((index, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub task: TaskId,
    pub classes: Vec<ClassSpec>,
    pub image_layers: usize,
    pub text_layers: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub upper: f64,
    pub lower: f64,
    pub files: Vec<String>,
}

/// One task's state as `EMB1` matrices plus `manifest.json`. Values are
/// stored at `f32` precision.
pub fn write_checkpoint<T: Scalar>(
    dir: &Path,
    state: &TaskState<T>,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: String, m: &Mat<T>| -> Result<()> {
        write_matrix(&dir.join(&name), m)?;
        files.push(name);
        Ok(())
    };
    for (side, p) in [("image", &state.pool.image), ("text", &state.pool.text)] {
        for l in 0..p.layers() {
            put(format!("prompt_{side}_key_{l}.emb"), &p.keys[l])?;
            put(format!("prompt_{side}_value_{l}.emb"), &p.values[l])?;
        }
    }
    for (side, g) in [("image", &state.gates.image), ("text", &state.gates.text)] {
        for (l, m) in g.iter().enumerate() {
            put(format!("gate_{side}_{l}.emb"), m)?;
        }
    }
    let rows =
        |es: &[&Embedding<T>]| Mat::from_rows(&es.iter().map(|e| e.0.clone()).collect::<Vec<_>>());
    for (c, scorer) in state.confidence.classes.iter().enumerate() {
        let cs: Vec<&Embedding<T>> = scorer.prototypes.centroids.iter().collect();
        put(format!("centroids_{c}.emb"), &rows(&cs)?)?;
    }
    let texts: Vec<&Embedding<T>> = state.class_text.iter().collect();
    put("class_text.emb".into(), &rows(&texts)?)?;
    let book = [
        &state.text_prototype,
        &state.visual_mean,
        &Embedding(state.gaussian.mean.clone()),
        &Embedding(state.gaussian.var.clone()),
    ];
    put("routing.emb".into(), &rows(&book)?)?;
    let manifest = CheckpointManifest {
        config_hash: config_hash.to_string(),
        task: state.task,
        classes: state.classes.clone(),
        image_layers: state.pool.image.layers(),
        text_layers: state.pool.text.layers(),
        temperature: to_f64(state.gates.temperature),
        top_k: state.confidence.top_k,
        upper: to_f64(state.confidence.thresholds.upper),
        lower: to_f64(state.confidence.thresholds.lower),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_checkpoint<T: Scalar>(dir: &Path) -> Result<(CheckpointManifest, TaskState<T>)> {
    let man: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let get = |name: String| read_matrix::<T>(&dir.join(name));
    let side = |s: &str, layers: usize| -> Result<PromptSide<T>> {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for l in 0..layers {
            keys.push(get(format!("prompt_{s}_key_{l}.emb"))?);
            values.push(get(format!("prompt_{s}_value_{l}.emb"))?);
        }
        Ok(PromptSide { keys, values })
    };
    let pool = PromptPool {
        task: man.task,
        image: side("image", man.image_layers)?,
        text: side("text", man.text_layers)?,
        trainable: true,
    };
    let gates = GateBank {
        task: man.task,
        image: (0..man.image_layers)
            .map(|l| get(format!("gate_image_{l}.emb")))
            .collect::<Result<_>>()?,
        text: (0..man.text_layers)
            .map(|l| get(format!("gate_text_{l}.emb")))
            .collect::<Result<_>>()?,
        temperature: lit(man.temperature),
    };
    let to_rows = |m: Mat<T>| -> Vec<Embedding<T>> {
        (0..m.rows())
            .map(|r| Embedding(m.row(r).to_vec()))
            .collect()
    };
    let class_text = to_rows(get("class_text.emb".into())?);
    if class_text.len() != man.classes.len() {
        return Err(Error::Format(
            "class_text.emb does not match the class list".into(),
        ));
    }
    let mut scorers = Vec::new();
    for (c, (spec, text)) in man.classes.iter().zip(&class_text).enumerate() {
        scorers.push(ClassScorer {
            prototypes: ClassPrototypes {
                class: spec.id,
                centroids: to_rows(get(format!("centroids_{c}.emb"))?),
            },
            text: text.clone(),
        });
    }
    let routing = to_rows(get("routing.emb".into())?);
    if routing.len() != 4 {
        return Err(Error::Format("routing.emb must have 4 rows".into()));
    }
    let state = TaskState {
        task: man.task,
        classes: man.classes.clone(),
        class_text,
        pool,
        gates,
        confidence: TaskConfidenceModel {
            task: man.task,
            classes: scorers,
            top_k: man.top_k,
            thresholds: TaskThresholds {
                task: man.task,
                upper: lit(man.upper),
                lower: lit(man.lower),
            },
        },
        text_prototype: routing[0].clone(),
        visual_mean: routing[1].clone(),
        gaussian: DiagonalGaussian {
            mean: routing[2].0.clone(),
            var: routing[3].0.clone(),
        },
    };
    Ok((man, state))
}

/// One line per cell: `config_hash,i,j,accuracy` with a header row.
pub fn matrix_to_csv(m: &AccuracyMatrix, config_hash: &str) -> String {
    let mut s = String::from("config_hash,i,j,accuracy\n");
    for (i, row) in m.rows().iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(s, "{config_hash},{i},{j},{v}");
            }
        }
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<(String, AccuracyMatrix)> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("config_hash,i,j,accuracy") {
        return Err(Error::Format("missing CSV header".into()));
    }
    let mut cells = Vec::new();
    let mut hash = None;
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("line {}: {line:?}", n + 2));
        if f.len() != 4 {
            return Err(bad());
        }
        match &hash {
            None => hash = Some(f[0].to_string()),
            Some(h) if h != f[0] => return Err(Error::Format("mixed config hashes".into())),
            _ => {}
        }
        let i: usize = f[1].parse().map_err(|_| bad())?;
        let j: usize = f[2].parse().map_err(|_| bad())?;
        let v: f64 = f[3].parse().map_err(|_| bad())?;
        cells.push((i, j, v));
    }
    let t = cells
        .iter()
        .map(|c| c.1 + 1)
        .max()
        .ok_or(Error::Empty("CSV without cells"))?;
    let mut m = AccuracyMatrix::new(t);
    for (i, j, v) in cells {
        m.set(i, j, v)?;
    }
    Ok((hash.unwrap_or_default(), m))
}

/// Human-readable matrix with per-task and headline metrics, in percent.
pub fn format_table(m: &AccuracyMatrix, metrics: Option<&Metrics>) -> String {
    let t = m.tasks();
    let mut s = String::new();
    let _ = write!(s, "{:<10}", "after");
    for j in 1..=t {
        let _ = write!(s, "{:>8}", format!("T{j}"));
    }
    s.push('\n');
    for (i, row) in m.rows().iter().enumerate() {
        let label = if i == 0 {
            "zero-shot".to_string()
        } else {
            format!("T{i}")
        };
        let _ = write!(s, "{label:<10}");
        for v in row {
            match v {
                Some(v) => {
                    let _ = write!(s, "{:>8.1}", 100.0 * v);
                }
                None => {
                    let _ = write!(s, "{:>8}", "-");
                }
            }
        }
        s.push('\n');
    }
    if let Some(mt) = metrics {
        for (name, f) in [
            (
                "Transfer",
                (|x: &crate::benchmark::TaskMetrics| x.transfer) as fn(&_) -> f64,
            ),
            ("Average", |x| x.average),
            ("Last", |x| x.last),
        ] {
            let _ = write!(s, "{name:<10}");
            for tm in &mt.per_task {
                let _ = write!(s, "{:>8.1}", 100.0 * f(tm));
            }
            let headline = match name {
                "Transfer" => mt.transfer,
                "Average" => mt.average,
                _ => mt.last,
            };
            let _ = writeln!(s, "   | {:.1}", 100.0 * headline);
        }
    }
    s
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
