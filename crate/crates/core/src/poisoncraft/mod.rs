//! Availability-poison generators.
//!
//! Additive generators (AP, UE, RUE, CP) work on a per-sample `δ` inside an
//! L∞ ball. LSP and OPS are class-wise patterns; CUDA filters every image
//! with a per-class kernel and has no additive budget.

mod classwise;
mod optimized;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ImageBatch, Norm, PerturbationBudget, PoisonedDataset, BUDGET_TOLERANCE};
use crate::error::{Error, Result};
use crate::trainer::{ModelConfig, OptimConfig};

pub use classwise::{craft_cuda, craft_lsp, craft_ops};
pub use optimized::{craft_ap, craft_cp, craft_rue, craft_ue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Ap,
    Ue,
    Rue,
    Cp,
    Lsp,
    Ops,
    Cuda,
}

impl Generator {
    pub const ALL: [Generator; 7] = [
        Generator::Ap,
        Generator::Ue,
        Generator::Rue,
        Generator::Cp,
        Generator::Lsp,
        Generator::Ops,
        Generator::Cuda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::Ap => "ap",
            Generator::Ue => "ue",
            Generator::Rue => "rue",
            Generator::Cp => "cp",
            Generator::Lsp => "lsp",
            Generator::Ops => "ops",
            Generator::Cuda => "cuda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase();
        Generator::ALL
            .into_iter()
            .find(|g| g.name() == norm)
            .ok_or_else(|| Error::arg(format!("unknown generator '{s}'")))
    }

    /// Adds a bounded `δ` to each image.
    pub fn is_additive(self) -> bool {
        !matches!(self, Generator::Ops | Generator::Cuda)
    }

    pub fn default_budget(self) -> PerturbationBudget {
        match self {
            Generator::Ap | Generator::Ue | Generator::Rue | Generator::Cp => PerturbationBudget::linf(8.0 / 255.0),
            Generator::Lsp => PerturbationBudget::linf(16.0 / 255.0),
            Generator::Ops => PerturbationBudget::one_pixel(),
            Generator::Cuda => PerturbationBudget::unbounded(),
        }
    }
}

/// Surrogate network and the SGD settings used to train it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub model: ModelConfig,
    /// Epochs of clean training before AP's attack.
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate per 256 samples, as in training configs.
    pub base_lr: f64,
    pub optimizer: OptimConfig,
    /// InfoNCE temperature of the contrastive surrogate.
    pub temperature: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 32,
            base_lr: 0.4,
            optimizer: OptimConfig {
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            temperature: 0.2,
        }
    }
}

impl SurrogateConfig {
    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Alternating min-min schedule shared by UE, RUE and CP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinMinConfig {
    /// Surrogate SGD steps per round.
    pub train_steps: usize,
    /// Perturbation steps per round.
    pub delta_steps: usize,
    /// Sign-step size; `None` means `epsilon / 10`.
    pub delta_step_size: Option<f64>,
    pub stop_acc: f64,
    pub max_rounds: usize,
}

impl Default for MinMinConfig {
    fn default() -> Self {
        Self {
            train_steps: 20,
            delta_steps: 10,
            delta_step_size: None,
            stop_acc: 0.99,
            max_rounds: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApConfig {
    /// Push toward `y+1 mod K`; otherwise maximize CE on the true label.
    pub targeted: bool,
    pub steps: usize,
    /// `None` means `epsilon / 4`.
    pub step_size: Option<f64>,
    /// Minimum clean train accuracy of the surrogate.
    pub min_surrogate_acc: f64,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            targeted: true,
            steps: 20,
            step_size: None,
            min_surrogate_acc: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RueConfig {
    /// L∞ radius of the inner adversary.
    pub radius: f64,
    pub steps: usize,
    /// `None` means `radius / 4`.
    pub step_size: Option<f64>,
}

impl Default for RueConfig {
    fn default() -> Self {
        Self {
            radius: 2.0 / 255.0,
            steps: 5,
            step_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LspConfig {
    /// Side of the constant blocks; `None` means `image_side / 4`.
    pub block: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CudaConfig {
    /// Odd kernel side.
    pub kernel: usize,
    /// Half-width of the uniform noise added to the identity kernel.
    pub noise: f64,
}

impl Default for CudaConfig {
    fn default() -> Self {
        Self { kernel: 3, noise: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub generator: Generator,
    pub budget: PerturbationBudget,
    pub surrogate: SurrogateConfig,
    pub min_min: MinMinConfig,
    pub ap: ApConfig,
    pub rue: RueConfig,
    pub lsp: LspConfig,
    pub cuda: CudaConfig,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(generator: Generator) -> Self {
        Self {
            generator,
            budget: generator.default_budget(),
            surrogate: SurrogateConfig::default(),
            min_min: MinMinConfig::default(),
            ap: ApConfig::default(),
            rue: RueConfig::default(),
            lsp: LspConfig { block: None },
            cuda: CudaConfig::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        let g = self.generator;
        let family_ok = match g {
            Generator::Ops => self.budget.norm == Norm::L0 && self.budget.epsilon == 1.0,
            Generator::Cuda => self.budget.norm == Norm::Unbounded,
            _ => self.budget.norm == Norm::Linf,
        };
        if !family_ok {
            return Err(Error::arg(format!(
                "generator {} does not accept a {:?} budget of {}",
                g.name(),
                self.budget.norm,
                self.budget.epsilon
            )));
        }
        let s = &self.surrogate;
        if s.batch_size < 2 || !(s.base_lr > 0.0) || !(s.temperature > 0.0) {
            return Err(Error::arg("surrogate needs batch_size >= 2, base_lr > 0 and temperature > 0"));
        }
        let m = &self.min_min;
        if !(0.0..=1.0).contains(&m.stop_acc) || m.max_rounds == 0 {
            return Err(Error::arg("min_min needs stop_acc in [0,1] and max_rounds >= 1"));
        }
        if m.delta_step_size.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::arg("min_min.delta_step_size must be > 0"));
        }
        if !(self.rue.radius >= 0.0) {
            return Err(Error::arg("rue.radius must be >= 0"));
        }
        if self.lsp.block == Some(0) {
            return Err(Error::arg("lsp.block must be >= 1"));
        }
        if self.cuda.kernel % 2 == 0 || !(self.cuda.noise >= 0.0) {
            return Err(Error::arg("cuda.kernel must be odd and cuda.noise >= 0"));
        }
        Ok(())
    }

    /// Provenance map stored with the poisoned dataset.
    fn provenance(&self) -> Result<BTreeMap<String, Value>> {
        let mut m = BTreeMap::new();
        m.insert("generator".into(), Value::from(self.generator.name()));
        m.insert("seed".into(), Value::from(self.seed));
        m.insert("config".into(), serde_json::to_value(self)?);
        Ok(m)
    }
}

/// Run the configured generator.
pub fn craft(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    match cfg.generator {
        Generator::Ap => craft_ap(clean, cfg),
        Generator::Ue => craft_ue(clean, cfg),
        Generator::Rue => craft_rue(clean, cfg),
        Generator::Cp => craft_cp(clean, cfg),
        Generator::Lsp => craft_lsp(clean, cfg),
        Generator::Ops => craft_ops(clean, cfg),
        Generator::Cuda => craft_cuda(clean, cfg),
    }
}

fn expect_generator(cfg: &GeneratorConfig, g: Generator) -> Result<()> {
    if cfg.generator != g {
        return Err(Error::arg(format!(
            "config is for generator {}, not {}",
            cfg.generator.name(),
            g.name()
        )));
    }
    cfg.validate()?;
    Ok(())
}

fn check_input(clean: &ImageBatch) -> Result<()> {
    if clean.is_empty() {
        return Err(Error::arg("clean batch is empty"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionStats {
    pub mean_linf: f64,
    pub max_linf: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub norm: Norm,
    pub epsilon: f64,
    /// Per-sample distance under `norm` (L∞ for unbounded budgets).
    pub distances: Vec<f64>,
    pub max_distance: f64,
    /// `None` for unbounded budgets.
    pub passed: Option<bool>,
    /// Ids of samples over budget.
    pub violations: Vec<String>,
    /// Filled for unbounded budgets.
    pub distortion: Option<DistortionStats>,
}

pub fn verify_budget(ds: &PoisonedDataset) -> BudgetReport {
    verify_pairs(ds.clean(), ds.poisoned(), ds.budget())
}

/// Per-sample check of `poisoned` against `clean` under `budget`; pairs
/// are matched by position and violations reported by clean id.
pub fn verify_pairs(clean: &ImageBatch, poisoned: &ImageBatch, b: PerturbationBudget) -> BudgetReport {
    let n = clean.len().min(poisoned.len());
    let pair = |i: usize, norm: Norm| crate::data::image_distance(norm, poisoned.image(i), clean.image(i));
    let distances: Vec<f64> = (0..n).map(|i| pair(i, b.norm)).collect();
    let max_distance = distances.iter().copied().fold(0.0, f64::max);
    if b.is_checked() {
        let violations: Vec<String> = distances
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > b.epsilon + BUDGET_TOLERANCE)
            .map(|(i, _)| clean.ids()[i].clone())
            .collect();
        BudgetReport {
            norm: b.norm,
            epsilon: b.epsilon,
            distances,
            max_distance,
            passed: Some(violations.is_empty()),
            violations,
            distortion: None,
        }
    } else {
        let denom = n.max(1) as f64;
        let l2: f64 = (0..n).map(|i| pair(i, Norm::L2)).sum();
        BudgetReport {
            norm: b.norm,
            epsilon: b.epsilon,
            distortion: Some(DistortionStats {
                mean_linf: distances.iter().sum::<f64>() / denom,
                max_linf: max_distance,
                mean_l2: l2 / denom,
            }),
            distances,
            max_distance,
            passed: None,
            violations: Vec::new(),
        }
    }
}
