//! Run configuration.
//!
//! A run is described by one hierarchical document with dotted keys:
//!
//! ```toml
//! seed = 3
//! data.size = 16
//! craft.generator = "ue"
//! train.method = "vespr"
//! train.epochs = 20
//! at.steps = 5          # PGD used by adversarial training
//! loss.alpha = 0.25     # weights of the combined objective
//! ```
//!
//! Sections: `seed`, `data`, `craft`, `train`, `at`, `loss`, `probe`,
//! `analysis`, `bench`. Defaults depend on `train.method`,
//! `craft.generator` and `data.size`; everything else the user supplies
//! is merged on top of those defaults and then checked against the
//! schema, so a misspelled key is an error naming the key.
//!
//! Layers, lowest precedence first: defaults, the config file,
//! `POISONFORGE_<KEY>` environment variables (`at.step_size` is
//! `POISONFORGE_AT_STEP_SIZE`), command-line flags.
//!
//! Per-module seeds are not configurable. They are `seed::derive(seed,
//! name)` with name `data`, `poisoncraft`, `trainer`, `probe` or `analysis`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisConfig;
use crate::data::{load_cifar_format, make_toy_split, CifarSplit, ImageBatch, ToyRecipe};
use crate::error::{Error, Result};
use crate::poisoncraft::{Generator, GeneratorConfig};
use crate::seed;
use crate::trainer::{Method, ProbeConfig, TrainConfig};

pub const ENV_PREFIX: &str = "POISONFORGE_";

/// Where training and test images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Image side in pixels.
    pub size: usize,
    pub recipe: ToyRecipe,
    /// Directory of CIFAR-10 binaries; replaces the toy data when set.
    pub cifar_dir: Option<PathBuf>,
}

impl DataConfig {
    pub fn toy(size: usize) -> Self {
        Self {
            classes: 4,
            per_class: 50,
            test_per_class: 50,
            size,
            recipe: ToyRecipe::default(),
            cifar_dir: None,
        }
    }

    /// Train and clean-test sets.
    pub fn load(&self, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
        match &self.cifar_dir {
            Some(dir) => Ok((
                load_cifar_format(dir, CifarSplit::Train)?,
                load_cifar_format(dir, CifarSplit::Test)?,
            )),
            None => make_toy_split(
                &self.recipe,
                self.classes,
                self.per_class,
                self.test_per_class,
                self.size,
                seed,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cifar_dir.is_none() && self.size < 8 {
            return Err(Error::arg("size must be >= 8"));
        }
        if self.classes < 2 || self.per_class < 2 || self.test_per_class < 1 {
            return Err(Error::arg("need >= 2 classes, >= 2 train and >= 1 test samples per class"));
        }
        Ok(())
    }
}

/// Grid of the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub generators: Vec<Generator>,
    pub methods: Vec<Method>,
    /// Adds a row trained on the unpoisoned set.
    pub include_clean: bool,
    /// Computes the representation metrics for every poisoned cell.
    pub analysis: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            generators: Generator::ALL.to_vec(),
            methods: vec![Method::Sl, Method::Ssl, Method::Vespr],
            include_clean: true,
            analysis: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generators.is_empty() || self.methods.is_empty() {
            return Err(Error::arg("generators and methods must be nonempty"));
        }
        Ok(())
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub craft: GeneratorConfig,
    /// Holds the `at` and `loss` sections as `pgd` and `weights`.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub analysis: AnalysisConfig,
    pub bench: BenchConfig,
}

/// Document keys that live inside `train` in the resolved form.
const HOISTED: [(&str, &str); 2] = [("at", "pgd"), ("loss", "weights")];

/// Seeds filled in from the top-level seed, as document paths.
const DERIVED_SEEDS: [&[&str]; 7] = [
    &["craft", "seed"],
    &["train", "seed"],
    &["train", "pretrain_aug", "seed"],
    &["train", "sl_aug", "seed"],
    &["probe", "seed"],
    &["probe", "aug", "seed"],
    &["analysis", "seed"],
];

fn module_of(key: &str) -> &'static str {
    match key.split('.').next().unwrap_or("") {
        "data" => "data",
        "craft" => "poisoncraft",
        "train" | "probe" => "trainer",
        "at" => "adversary",
        "loss" => "loss",
        "analysis" => "analysis",
        _ => "cli",
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        module: module_of(key).to_string(),
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Maps a validation failure of one section onto a config error.
fn in_section(key: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Argument(reason) => config_err(key, reason),
        other => config_err(key, other.to_string()),
    })
}

impl RunConfig {
    /// Defaults for a method and generator on `size×size` images.
    pub fn defaults(method: Method, generator: Generator, size: usize) -> Self {
        let mut c = Self {
            seed: 0,
            data: DataConfig::toy(size),
            craft: GeneratorConfig::new(generator),
            train: TrainConfig::for_method(method, size),
            probe: ProbeConfig::desk(size),
            analysis: AnalysisConfig::default(),
            bench: BenchConfig::default(),
        };
        c.derive_seeds();
        c
    }

    fn derive_seeds(&mut self) {
        self.craft.seed = seed::derive(self.seed, "poisoncraft");
        self.train.seed = seed::derive(self.seed, "trainer");
        self.train.pretrain_aug.seed = 0;
        self.train.sl_aug.seed = 0;
        self.probe.seed = seed::derive(self.seed, "probe");
        self.probe.aug.seed = 0;
        self.analysis.seed = seed::derive(self.seed, "analysis");
    }

    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, "data")
    }

    /// The dotted-key document form, without derived seeds.
    pub fn to_document(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for path in DERIVED_SEEDS {
            remove_path(&mut v, path);
        }
        let root = v.as_object_mut().expect("object");
        let train = root["train"].as_object_mut().expect("object");
        let moved: Vec<(&str, Value)> = HOISTED
            .iter()
            .map(|(doc, field)| (*doc, train.remove(*field).expect("field present")))
            .collect();
        for (doc, val) in moved {
            root.insert(doc.to_string(), val);
        }
        v
    }

    /// Parses a complete document, rejecting unknown keys.
    pub fn from_document(doc: &Value) -> Result<Self> {
        let mut v = doc.clone();
        for path in DERIVED_SEEDS {
            if get_path(&v, path).is_some() {
                return Err(config_err(&path.join("."), "seeds derive from the top-level `seed`"));
            }
        }
        let root = v
            .as_object_mut()
            .ok_or_else(|| config_err("", "document must be a table"))?;
        let mut hoisted = Vec::new();
        for (doc_key, field) in HOISTED {
            if let Some(x) = root.remove(doc_key) {
                hoisted.push((field, x));
            }
        }
        if let Some(Value::Object(train)) = root.get_mut("train") {
            for (field, x) in hoisted {
                if train.contains_key(field) {
                    return Err(config_err(&format!("train.{field}"), "unknown key"));
                }
                train.insert(field.to_string(), x);
            }
        }
        for path in DERIVED_SEEDS {
            set_path(&mut v, path, Value::from(0u64));
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| {
            let mut key = document_key(&e.path().to_string());
            let msg = e.inner().to_string();
            if let Some(field) = unknown_field(&msg) {
                if !(key == field || key.ends_with(&format!(".{field}"))) {
                    key = if key.is_empty() { field } else { format!("{key}.{field}") };
                }
                return config_err(&key, "unknown key");
            }
            config_err(&key, msg)
        })?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        in_section("data", self.data.validate())?;
        in_section("craft", self.craft.validate())?;
        in_section("at", self.train.pgd.validate())?;
        in_section("loss", self.train.weights.validate())?;
        in_section("train", self.train.validate())?;
        in_section("probe", self.probe.validate())?;
        if !(self.analysis.radius > 0.0) {
            return Err(config_err("analysis.radius", "must be > 0"));
        }
        in_section("bench", self.bench.validate())
    }

    /// SHA-256 over the canonical document and the artifact version.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(crate::ARTIFACT_VERSION.as_bytes());
        h.update(serde_json::to_string(&self.to_document()).expect("json").as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with a different method, re-resolved from `source` so that
    /// method-dependent defaults follow the method.
    pub fn for_method(source: &ConfigSource, method: Method) -> Result<Self> {
        let mut s = source.clone();
        s.set("train.method", Value::from(method.name()))?;
        s.resolve()
    }

    pub fn for_generator(source: &ConfigSource, generator: Generator) -> Result<Self> {
        let mut s = source.clone();
        s.set("craft.generator", Value::from(generator.name()))?;
        s.resolve()
    }
}

/// Rewrites a path in the resolved form back to the document key.
fn document_key(path: &str) -> String {
    let path = if path == "." { "" } else { path };
    for (doc, field) in HOISTED {
        let inner = format!("train.{field}");
        if path == inner {
            return doc.to_string();
        }
        if let Some(rest) = path.strip_prefix(&format!("{inner}.")) {
            return format!("{doc}.{rest}");
        }
    }
    path.to_string()
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn get_path<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |cur, k| cur.as_object()?.get(*k))
}

fn remove_path(v: &mut Value, path: &[&str]) {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = v;
    for k in parents {
        match cur.as_object_mut().and_then(|m| m.get_mut(*k)) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(m) = cur.as_object_mut() {
        m.remove(*last);
    }
}

/// Sets `value` at `path`, creating tables; false when a non-table is in the way.
fn set_path(v: &mut Value, path: &[&str], value: Value) -> bool {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = v;
    for k in parents {
        let Some(m) = cur.as_object_mut() else { return false };
        cur = m.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    match cur.as_object_mut() {
        Some(m) => {
            m.insert(last.to_string(), value);
            true
        }
        None => false,
    }
}

/// Recursive merge; tables merge key by key, anything else replaces.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn leaf_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v.as_object() {
        Some(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(x, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Environment variable that overrides `key`.
pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

/// Interprets an override string as a TOML value, falling back to a
/// plain string (`3` is an integer, `true` a bool, `ce` a string).
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).unwrap_or(Value::from(raw)),
        Err(_) => Value::from(raw),
    }
}

/// The user-supplied layers of a run configuration, before defaults.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    doc: Value,
}

impl ConfigSource {
    pub fn new() -> Self {
        Self {
            doc: Value::Object(Map::new()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: toml::Table = toml::from_str(text).map_err(|e| {
            let reason = e.message().to_string();
            config_err("", format!("not a valid TOML document: {reason}"))
        })?;
        Ok(Self {
            doc: serde_json::to_value(t)?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Overrides one dotted key.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let path: Vec<&str> = key.split('.').collect();
        if path.iter().any(|p| p.is_empty()) || !set_path(&mut self.doc, &path, value) {
            return Err(config_err(key, "not a settable key"));
        }
        Ok(())
    }

    /// Applies every `POISONFORGE_*` variable; names that match no key
    /// are errors.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut known = Vec::new();
        leaf_keys(
            &RunConfig::defaults(Method::Sl, Generator::Ap, 32).to_document(),
            "",
            &mut known,
        );
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, raw) in vars {
            let key = known
                .iter()
                .find(|k| env_var_name(k) == name)
                .ok_or_else(|| config_err(&name, "environment variable matches no config key"))?;
            self.set(key, parse_value(&raw))?;
        }
        Ok(())
    }

    pub fn document(&self) -> &Value {
        &self.doc
    }

    fn peek_str(&self, key: &str) -> Result<Option<String>> {
        let path: Vec<&str> = key.split('.').collect();
        match get_path(&self.doc, &path) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(config_err(key, "expected a string")),
        }
    }

    /// Merges the layers onto the defaults and validates the result.
    pub fn resolve(&self) -> Result<RunConfig> {
        let method = match self.peek_str("train.method")? {
            Some(s) => Method::parse(&s).map_err(|e| config_err("train.method", e.to_string()))?,
            None => Method::Sl,
        };
        let generator = match self.peek_str("craft.generator")? {
            Some(s) => Generator::parse(&s).map_err(|e| config_err("craft.generator", e.to_string()))?,
            None => Generator::Ap,
        };
        let size = match get_path(&self.doc, &["data", "size"]) {
            None => 16,
            Some(v) => v
                .as_u64()
                .filter(|&s| s > 0)
                .ok_or_else(|| config_err("data.size", "expected a positive integer"))? as usize,
        };
        let mut doc = RunConfig::defaults(method, generator, size).to_document();
        // canonical spellings for the peeked enums
        let mut over = self.doc.clone();
        set_path(&mut over, &["train", "method"], Value::from(method.name()));
        set_path(&mut over, &["craft", "generator"], Value::from(generator.name()));
        merge(&mut doc, &over);
        RunConfig::from_document(&doc)
    }
}
