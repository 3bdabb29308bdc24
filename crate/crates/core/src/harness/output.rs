//! Run directories and line-delimited metric files with CSV mirrors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::flow::VelocityModel;
use crate::grpo::MetricRecord;
use crate::nn::save_checkpoint;

use super::config::ExperimentConfig;

pub const CONFIG_SNAPSHOT: &str = "config.resolved";
pub const SEED_FILE: &str = "seed";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Output directory of one CLI run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `root` and writes the resolved config and seed into it.
    pub fn create(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let dir = Self { root: root.to_path_buf() };
        dir.write_text(CONFIG_SNAPSHOT, &config.to_text())?;
        dir.write_text(SEED_FILE, &format!("{}\n", config.seed))?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<RunDir> {
        let root = self.path(name);
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Writes `checkpoints/<name>` and returns its path.
    pub fn save_model(&self, name: &str, model: &VelocityModel) -> Result<PathBuf> {
        let dir = self.path(CHECKPOINT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(name);
        save_checkpoint(&path, &model.spec, &model.params)?;
        Ok(path)
    }

    pub fn table(&self, stem: &str, columns: Vec<String>) -> Result<TableWriter> {
        TableWriter::create(&self.root, stem, columns)
    }
}

/// Writes `<stem>.jsonl` and `<stem>.csv` side by side, one row at a time.
pub struct TableWriter {
    columns: Vec<String>,
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_field(v: &Value) -> String {
    match v {
        Value::String(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

impl TableWriter {
    pub fn create(dir: &Path, stem: &str, columns: Vec<String>) -> Result<Self> {
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        let csv_path = dir.join(format!("{stem}.csv"));
        let jsonl = create_file(&jsonl_path)?;
        let mut csv = create_file(&csv_path)?;
        writeln!(csv, "{}", columns.join(",")).map_err(|e| Error::io(&csv_path, e))?;
        Ok(Self {
            columns,
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    /// `values` must follow the column order. The JSONL line may carry extra
    /// structured fields that have no CSV column.
    pub fn row(&mut self, values: Vec<Value>, extra: Option<(&str, Value)>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Shape {
                context: "table row",
                expected: self.columns.len(),
                actual: values.len(),
            });
        }
        let line = values.iter().map(csv_field).collect::<Vec<_>>().join(",");
        writeln!(self.csv, "{line}").map_err(|e| Error::io(&self.csv_path, e))?;
        let mut obj: Map<String, Value> = self.columns.iter().cloned().zip(values).collect();
        if let Some((k, v)) = extra {
            obj.insert(k.to_string(), v);
        }
        writeln!(self.jsonl, "{}", Value::Object(obj)).map_err(|e| Error::io(&self.jsonl_path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl.flush().map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

/// Training log: `metrics.jsonl` holds each [`MetricRecord`] verbatim, and
/// `metrics.csv` spreads `mean_reward` into one column per reward.
pub struct MetricSink {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

impl MetricSink {
    pub fn create(dir: &RunDir, reward_names: &[&str]) -> Result<Self> {
        let jsonl_path = dir.path("metrics.jsonl");
        let csv_path = dir.path("metrics.csv");
        let jsonl = create_file(&jsonl_path)?;
        let mut csv = create_file(&csv_path)?;
        let mut header = vec!["iteration".to_string()];
        header.extend(reward_names.iter().map(|n| format!("mean_reward_{n}")));
        header.extend(
            [
                "objective",
                "grad_norm",
                "clip_fraction",
                "mean_abs_ratio_minus_one",
                "leaf_diversity",
                "velocity_evals",
                "wall_clock_seconds",
            ]
            .map(String::from),
        );
        writeln!(csv, "{}", header.join(",")).map_err(|e| Error::io(&csv_path, e))?;
        Ok(Self {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        let json = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.jsonl, "{json}").map_err(|e| Error::io(&self.jsonl_path, e))?;
        let mut fields = vec![r.iteration.to_string()];
        fields.extend(r.mean_reward.iter().map(f64::to_string));
        fields.extend([
            r.objective.to_string(),
            r.grad_norm.to_string(),
            r.clip_fraction.to_string(),
            r.mean_abs_ratio_minus_one.to_string(),
            r.leaf_diversity.to_string(),
            r.velocity_evals.to_string(),
            r.wall_clock_seconds.to_string(),
        ]);
        writeln!(self.csv, "{}", fields.join(",")).map_err(|e| Error::io(&self.csv_path, e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl.flush().map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

/// Reads back a `metrics.jsonl` file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
