//! `poisonforge` command-line driver.
//!
//! Every command resolves one run configuration (defaults, `--config`
//! file, `POISONFORGE_*` environment, flags) and embeds it in what it
//! writes. Failures print a single JSON line on stderr; configuration
//! errors exit with status 2, everything else with 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poisonforge::analysis::{analysis_report, export_embeddings, RepresentationMatrix};
use poisonforge::bench::{run_bench, BenchOptions, CellResult};
use poisonforge::config::{parse_value, ConfigSource, RunConfig};
use poisonforge::data::container::write_atomic;
use poisonforge::data::{load_dataset, save_dataset_with_meta, DatasetFile, ImageBatch};
use poisonforge::model::{load_checkpoint, save_checkpoint};
use poisonforge::poisoncraft::{craft, verify_budget};
use poisonforge::trainer::{evaluate, fit, initial_bundle, linear_probe, psn_cln_curves, TrainData};
use poisonforge::{Error, Result, ARTIFACT_VERSION};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "poisonforge", version, about = "Availability poisons, defenses and representation metrics")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every module seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one key, e.g. `--set at.steps=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the toy train split (and optionally the test split).
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Poison a clean dataset.
    Craft {
        #[arg(long)]
        generator: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes run.json and model.ckpt into the output directory.
    Train {
        #[arg(long)]
        method: String,
        /// Clean batch or poisoned dataset.
        #[arg(long)]
        data: PathBuf,
        /// Clean test batch, evaluated every epoch.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Record poison/clean accuracy and similarity every epoch.
        #[arg(long)]
        curves: bool,
    },
    /// Representation metrics of a trained model on a poisoned dataset.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write poisoned-sample representations to this container.
        #[arg(long)]
        export_reps: Option<PathBuf>,
    },
    /// Poison × method grid; writes table.csv, bench.json and caches.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the resolved configuration as JSON.
    Config {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        generator: Option<String>,
    },
}

fn source(common: &Common, flags: &[(&str, Value)]) -> Result<ConfigSource> {
    let mut s = match &common.config {
        Some(p) => ConfigSource::from_file(p)?,
        None => ConfigSource::new(),
    };
    s.apply_env(std::env::vars())?;
    for kv in &common.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            module: "cli".into(),
            key: kv.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        s.set(k.trim(), parse_value(v.trim()))?;
    }
    if let Some(seed) = common.seed {
        s.set("seed", Value::from(seed))?;
    }
    for (k, v) in flags {
        s.set(k, v.clone())?;
    }
    Ok(s)
}

fn meta(cfg: &RunConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("run_config".into(), cfg.to_document());
    m.insert("config_hash".into(), Value::from(cfg.hash_hex()));
    m
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())
}

fn side(b: &ImageBatch) -> Value {
    Value::from(b.image_shape()[1] as u64)
}

fn cmd_toy(common: &Common, out: &Path, test_out: Option<&Path>) -> Result<()> {
    let cfg = source(common, &[])?.resolve()?;
    let (train, test) = cfg.data.load(cfg.data_seed())?;
    save_dataset_with_meta(&DatasetFile::Batch(train), out, meta(&cfg))?;
    if let Some(t) = test_out {
        save_dataset_with_meta(&DatasetFile::Batch(test), t, meta(&cfg))?;
    }
    Ok(())
}

fn cmd_craft(common: &Common, generator: &str, input: &Path, out: &Path) -> Result<()> {
    let clean = load_dataset(input)?.into_batch();
    let cfg = source(common, &[("craft.generator", Value::from(generator)), ("data.size", side(&clean))])?.resolve()?;
    let ds = craft(&clean, &cfg.craft)?;
    let report = verify_budget(&ds);
    if report.passed == Some(false) {
        return Err(Error::Integrity(format!(
            "crafted poison violates its budget: {} samples",
            report.violations.len()
        )));
    }
    save_dataset_with_meta(&DatasetFile::Poisoned(ds), out, meta(&cfg))
}

fn cmd_train(common: &Common, method: &str, data: &Path, test: Option<&Path>, out: &Path, curves: bool) -> Result<()> {
    let file = load_dataset(data)?;
    let test = test.map(|t| load_dataset(t).map(DatasetFile::into_batch)).transpose()?;
    let images = match &file {
        DatasetFile::Batch(b) => b.clone(),
        DatasetFile::Poisoned(p) => p.poisoned().clone(),
    };
    let cfg = source(common, &[("train.method", Value::from(method)), ("data.size", side(&images))])?.resolve()?;
    let poisoned = match file {
        DatasetFile::Poisoned(p) => Some(p),
        DatasetFile::Batch(_) => None,
    };
    let train_data = match &poisoned {
        Some(p) => TrainData::Poisoned(p),
        None => TrainData::Clean(&images),
    };
    let (bundle, mut record, probe_record, test_report) = if curves {
        let p = poisoned
            .as_ref()
            .ok_or_else(|| Error::Argument("--curves needs a poisoned dataset".into()))?;
        let (mut bundle, record) = psn_cln_curves(|| initial_bundle(&cfg.train, &images), p, &cfg.train, test.as_ref())?;
        let mut probe_record = None;
        if !cfg.train.method.trains_classifier() {
            let (clf, rec) = linear_probe(&bundle, &images, &cfg.probe, test.as_ref())?;
            bundle.classifier = clf;
            probe_record = Some(rec);
        }
        let t = test.as_ref().map(|t| evaluate(&bundle, t, None)).transpose()?;
        (bundle, record, probe_record, t)
    } else {
        let o = fit(&cfg.train, &cfg.probe, train_data, test.as_ref())?;
        (o.bundle, o.record, o.probe_record, o.test)
    };
    std::fs::create_dir_all(out)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&bundle, &ckpt, meta(&cfg))?;
    record.checkpoint = Some(ckpt.display().to_string());
    write_json(
        &out.join("run.json"),
        &json!({
            "version": ARTIFACT_VERSION,
            "run_config": cfg.to_document(),
            "config_hash": cfg.hash_hex(),
            "record": record,
            "probe_record": probe_record,
            "test": test_report,
        }),
    )
}

fn cmd_analyze(common: &Common, model: &Path, data: &Path, out: &Path, export: Option<&Path>) -> Result<()> {
    let bundle = load_checkpoint(model)?;
    let p = load_dataset(data)?.into_poisoned()?;
    let cfg = source(common, &[("data.size", side(p.poisoned()))])?.resolve()?;
    let report = analysis_report(&bundle, &p, &cfg.analysis)?;
    if let Some(path) = export {
        let reps = RepresentationMatrix::encode(&bundle, p.poisoned())?;
        export_embeddings(&reps, path, meta(&cfg))?;
    }
    write_json(
        out,
        &json!({
            "version": ARTIFACT_VERSION,
            "run_config": cfg.to_document(),
            "config_hash": cfg.hash_hex(),
            "model": model.display().to_string(),
            "data": data.display().to_string(),
            "report": report,
        }),
    )
}

fn cmd_bench(common: &Common, out: &Path, jobs: usize) -> Result<()> {
    let s = source(common, &[])?;
    let progress = |c: &CellResult, reused: bool| {
        let status = match (&c.error, c.accuracy) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(a)) => format!("{a:.4}"),
            (None, None) => "no test accuracy".into(),
        };
        let tag = if reused { " (cached)" } else { "" };
        eprintln!("{} × {}: {status}{tag}", c.row, c.method.name());
    };
    let report = run_bench(
        &s,
        &BenchOptions {
            out: Some(out.to_path_buf()),
            jobs,
            progress: Some(&progress),
        },
    )?;
    print!("{}", report.table.to_csv());
    Ok(())
}

fn cmd_config(common: &Common, method: Option<&str>, generator: Option<&str>) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = method {
        flags.push(("train.method", Value::from(m)));
    }
    if let Some(g) = generator {
        flags.push(("craft.generator", Value::from(g)));
    }
    let cfg = source(common, &flags)?.resolve()?;
    println!("{}", serde_json::to_string_pretty(&cfg.to_document())?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Toy { out, test_out } => cmd_toy(c, out, test_out.as_deref()),
        Cmd::Craft { generator, input, out } => cmd_craft(c, generator, input, out),
        Cmd::Train {
            method,
            data,
            test,
            out,
            curves,
        } => cmd_train(c, method, data, test.as_deref(), out, *curves),
        Cmd::Analyze {
            model,
            data,
            out,
            export_reps,
        } => cmd_analyze(c, model, data, out, export_reps.as_deref()),
        Cmd::Bench { out, jobs } => cmd_bench(c, out, *jobs),
        Cmd::Config { method, generator } => cmd_config(c, method.as_deref(), generator.as_deref()),
    }
}

fn error_line(e: &Error) -> String {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Config { module, key, reason } = e {
        v["module"] = Value::from(module.as_str());
        v["key"] = Value::from(key.as_str());
        v["reason"] = Value::from(reason.as_str());
    }
    v.to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
