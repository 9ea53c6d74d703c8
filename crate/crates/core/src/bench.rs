//! Poison × method comparison grid.
//!
//! Every generator in `bench.generators` poisons the training split once;
//! every method in `bench.methods` is then trained on each poisoned set
//! (and on the clean set when `bench.include_clean`) and scored on the
//! clean test split. The table has one row per poison, one column per
//! method, and two summary rows: the minimum and the mean over the poison
//! rows of each column.
//!
//! With an output directory the run is resumable: crafted poisons and
//! finished cells are cached on disk under a hash of the configuration
//! that produced them and reused on the next run.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{analysis_report, AnalysisReport};
use crate::config::{ConfigSource, RunConfig};
use crate::data::container::{read_meta, write_atomic};
use crate::data::{load_dataset, save_dataset_with_meta, DatasetFile, ImageBatch, PoisonedDataset};
use crate::error::{Error, Result};
use crate::poisoncraft::{craft, Generator};
use crate::trainer::{fit, Method, TrainData};

/// Row label of the unpoisoned baseline.
pub const CLEAN_ROW: &str = "clean";

/// Outcome of training one method on one training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// Generator name, or `clean`.
    pub row: String,
    pub method: Method,
    /// Clean-test accuracy; `None` when the cell failed.
    pub accuracy: Option<f64>,
    /// Final-epoch accuracy on the (poisoned) training images.
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
    pub analysis: Option<AnalysisReport>,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

impl CellResult {
    pub fn value(&self) -> f64 {
        self.accuracy.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<String>,
    pub methods: Vec<Method>,
    /// `cells[row][method]`, NaN for failed cells.
    #[serde(with = "nan_grid")]
    pub cells: Vec<Vec<f64>>,
    /// Minimum over poison rows, per method; NaN if any poison cell failed.
    #[serde(with = "nan_row")]
    pub psn_min: Vec<f64>,
    #[serde(with = "nan_row")]
    pub psn_avg: Vec<f64>,
}

impl BenchTable {
    pub fn from_cells(rows: &[String], methods: &[Method], cells: &[CellResult]) -> Self {
        let grid: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                methods
                    .iter()
                    .map(|m| {
                        cells
                            .iter()
                            .find(|c| &c.row == r && c.method == *m)
                            .map_or(f64::NAN, CellResult::value)
                    })
                    .collect()
            })
            .collect();
        let poison_rows: Vec<usize> = (0..rows.len()).filter(|&i| rows[i] != CLEAN_ROW).collect();
        let column = |j: usize| -> Vec<f64> { poison_rows.iter().map(|&i| grid[i][j]).collect() };
        let psn_min = (0..methods.len())
            .map(|j| {
                if poison_rows.is_empty() || column(j).iter().any(|v| v.is_nan()) {
                    f64::NAN
                } else {
                    column(j).into_iter().fold(f64::INFINITY, f64::min)
                }
            })
            .collect();
        let psn_avg = (0..methods.len())
            .map(|j| column(j).iter().sum::<f64>() / poison_rows.len() as f64)
            .collect();
        Self {
            rows: rows.to_vec(),
            methods: methods.to_vec(),
            cells: grid,
            psn_min,
            psn_avg,
        }
    }

    pub fn get(&self, row: &str, method: Method) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.methods.iter().position(|m| *m == method)?;
        Some(self.cells[i][j])
    }

    pub fn psn_min(&self, method: Method) -> Option<f64> {
        Some(self.psn_min[self.methods.iter().position(|m| *m == method)?])
    }

    pub fn psn_avg(&self, method: Method) -> Option<f64> {
        Some(self.psn_avg[self.methods.iter().position(|m| *m == method)?])
    }

    /// `poison,<method>...` header, one line per row, then `psn_min` and
    /// `psn_avg`. Accuracies have six decimals; failures print `NaN`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("poison");
        for m in &self.methods {
            s.push(',');
            s.push_str(m.name());
        }
        s.push('\n');
        let mut line = |label: &str, vals: &[f64]| {
            s.push_str(label);
            for v in vals {
                if v.is_nan() {
                    s.push_str(",NaN");
                } else {
                    s.push_str(&format!(",{v:.6}"));
                }
            }
            s.push('\n');
        };
        for (r, vals) in self.rows.iter().zip(&self.cells) {
            line(r, vals);
        }
        line("psn_min", &self.psn_min);
        line("psn_avg", &self.psn_avg);
        s
    }
}

mod nan_row {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| if x.is_nan() { None } else { Some(*x) })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::NAN))
            .collect())
    }
}

mod nan_grid {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|r| r.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Ok(Vec::<Vec<Option<f64>>>::deserialize(d)?
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: String,
    pub config: Value,
    pub table: BenchTable,
    pub cells: Vec<CellResult>,
    /// Per generator: crafting failure, if any.
    pub craft_errors: Map<String, Value>,
}

pub struct BenchOptions<'a> {
    /// Cache and output directory; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    /// Worker threads.
    pub jobs: usize,
    /// Called as each cell finishes (`reused` is true for cached cells).
    pub progress: Option<&'a (dyn Fn(&CellResult, bool) + Sync)>,
}

impl Default for BenchOptions<'_> {
    fn default() -> Self {
        Self {
            out: None,
            jobs: 1,
            progress: None,
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key of a crafted poison: everything that feeds the generator.
fn poison_key(cfg: &RunConfig) -> String {
    let doc = cfg.to_document();
    let key = json!({
        "version": crate::ARTIFACT_VERSION,
        "seed": cfg.seed,
        "data": doc["data"],
        "craft": doc["craft"],
    });
    sha_hex(key.to_string().as_bytes())
}

/// Runs `f` over `0..n` on up to `jobs` threads.
fn parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let v = f(i);
                *slots[i].lock().expect("slot lock") = Some(v);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every index ran"))
        .collect()
}

fn artifact_meta(cfg: &RunConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("run_config".into(), cfg.to_document());
    m.insert("config_hash".into(), Value::from(cfg.hash_hex()));
    m
}

fn load_or_craft(
    source: &ConfigSource,
    g: Generator,
    train: &ImageBatch,
    out: Option<&Path>,
) -> Result<PoisonedDataset> {
    let cfg = RunConfig::for_generator(source, g)?;
    let key = poison_key(&cfg);
    let path = out.map(|o| o.join("poisons").join(format!("{}.bin", g.name())));
    if let Some(p) = &path {
        if p.exists() {
            let cached = read_meta(p)
                .ok()
                .and_then(|m| m.get("poison_key").cloned())
                .is_some_and(|k| k == Value::from(key.clone()));
            if cached {
                return load_dataset(p)?.into_poisoned();
            }
        }
    }
    let ds = craft(train, &cfg.craft)?;
    if let Some(p) = &path {
        let mut meta = artifact_meta(&cfg);
        meta.insert("poison_key".into(), Value::from(key));
        save_dataset_with_meta(&DatasetFile::Poisoned(ds.clone()), p, meta)?;
    }
    Ok(ds)
}

fn cell_path(out: &Path, row: &str, m: Method) -> PathBuf {
    out.join("cells").join(format!("{row}__{}.json", m.name()))
}

fn run_cell(cfg: &RunConfig, row: &str, data: TrainData<'_>, test: &ImageBatch) -> CellResult {
    let start = Instant::now();
    let mut cell = CellResult {
        row: row.to_string(),
        method: cfg.train.method,
        accuracy: None,
        train_accuracy: None,
        error: None,
        analysis: None,
        config_hash: cfg.hash_hex(),
        wall_clock_secs: 0.0,
    };
    let outcome = fit(&cfg.train, &cfg.probe, data, Some(test)).and_then(|out| {
        let analysis = match data {
            TrainData::Poisoned(p) if cfg.bench.analysis => Some(analysis_report(&out.bundle, p, &cfg.analysis)?),
            _ => None,
        };
        Ok((out, analysis))
    });
    match outcome {
        Ok((out, analysis)) => {
            cell.accuracy = out.test.map(|t| t.accuracy);
            let last = out.probe_record.as_ref().unwrap_or(&out.record).epochs.last();
            cell.train_accuracy = last.and_then(|e| e.train_acc);
            cell.analysis = analysis;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell.wall_clock_secs = start.elapsed().as_secs_f64();
    cell
}

/// Runs the whole grid. Cell failures are recorded, not returned; only
/// configuration, data loading and output I/O errors abort the run.
pub fn run_bench(source: &ConfigSource, opts: &BenchOptions<'_>) -> Result<BenchReport> {
    let base = source.resolve()?;
    let (train, test) = base.data.load(base.data_seed())?;
    let out = opts.out.as_deref();
    let generators = base.bench.generators.clone();
    let methods = base.bench.methods.clone();

    let crafted = parallel(generators.len(), opts.jobs, |i| {
        load_or_craft(source, generators[i], &train, out)
    });
    let mut craft_errors = Map::new();
    let mut rows: Vec<(String, Option<&PoisonedDataset>, Option<String>)> = Vec::new();
    if base.bench.include_clean {
        rows.push((CLEAN_ROW.to_string(), None, None));
    }
    for (g, r) in generators.iter().zip(&crafted) {
        match r {
            Ok(p) => rows.push((g.name().to_string(), Some(p), None)),
            Err(e) => {
                craft_errors.insert(g.name().to_string(), Value::from(e.to_string()));
                rows.push((g.name().to_string(), None, Some(e.to_string())));
            }
        }
    }

    let tasks: Vec<(usize, Method)> = (0..rows.len())
        .flat_map(|r| methods.iter().map(move |&m| (r, m)))
        .collect();
    let cells = parallel(tasks.len(), opts.jobs, |t| -> Result<CellResult> {
        let (r, m) = tasks[t];
        let (row, poisoned, craft_error) = &rows[r];
        let mut s = source.clone();
        if let Some(g) = generators.iter().find(|g| g.name() == row) {
            s.set("craft.generator", Value::from(g.name()))?;
        }
        let cfg = RunConfig::for_method(&s, m)?;
        let hash = cfg.hash_hex();
        if let Some(o) = out {
            let p = cell_path(o, row, m);
            if let Ok(text) = std::fs::read_to_string(&p) {
                if let Ok(prev) = serde_json::from_str::<Value>(&text) {
                    let cell: Option<CellResult> = serde_json::from_value(prev["cell"].clone()).ok();
                    if let Some(c) = cell.filter(|c| c.config_hash == hash && c.error.is_none()) {
                        if let Some(cb) = opts.progress {
                            cb(&c, true);
                        }
                        return Ok(c);
                    }
                }
            }
        }
        let cell = match (poisoned, craft_error) {
            (_, Some(e)) => CellResult {
                row: row.clone(),
                method: m,
                accuracy: None,
                train_accuracy: None,
                error: Some(format!("crafting failed: {e}")),
                analysis: None,
                config_hash: hash,
                wall_clock_secs: 0.0,
            },
            (Some(p), None) => run_cell(&cfg, row, TrainData::Poisoned(p), &test),
            (None, None) => run_cell(&cfg, row, TrainData::Clean(&train), &test),
        };
        if let Some(o) = out {
            let doc = json!({
                "version": crate::ARTIFACT_VERSION,
                "config": cfg.to_document(),
                "cell": cell,
            });
            write_atomic(&cell_path(o, row, m), serde_json::to_string_pretty(&doc)?.as_bytes())?;
        }
        if let Some(cb) = opts.progress {
            cb(&cell, false);
        }
        Ok(cell)
    });
    let cells: Vec<CellResult> = cells.into_iter().collect::<Result<_>>()?;

    let row_names: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let table = BenchTable::from_cells(&row_names, &methods, &cells);
    let report = BenchReport {
        version: crate::ARTIFACT_VERSION.to_string(),
        config: base.to_document(),
        table,
        cells,
        craft_errors,
    };
    if let Some(o) = out {
        write_atomic(&o.join("bench.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
        let header = format!(
            "# artifact_version: {}\n# run_config: {}\n",
            crate::ARTIFACT_VERSION,
            serde_json::to_string(&report.config)?
        );
        write_atomic(&o.join("table.csv"), (header + &report.table.to_csv()).as_bytes())?;
    }
    Ok(report)
}

/// Reads the CSV written by [`run_bench`], skipping `#` header lines.
pub fn parse_table_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::format("table", "empty"))?;
    let width = header.split(',').count();
    lines
        .map(|l| {
            let mut parts = l.split(',');
            let label = parts.next().unwrap_or("").to_string();
            let vals = parts
                .map(|v| v.parse::<f64>().map_err(|e| Error::format("table", format!("{l}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() + 1 != width {
                return Err(Error::format("table", format!("ragged row: {l}")));
            }
            Ok((label, vals))
        })
        .collect()
}
