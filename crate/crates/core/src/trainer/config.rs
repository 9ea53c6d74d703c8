use serde::{Deserialize, Serialize};

use crate::adversary::{Guide, PgdConfig};
use crate::augment::{AugmentPolicy, IssMode};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{Arch, BundleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sl,
    SlAt,
    Ssl,
    SslAt,
    SslSl,
    Vespr,
    VesprSsl,
    VesprBoth,
    SslSlGn,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Sl,
        Method::SlAt,
        Method::Ssl,
        Method::SslAt,
        Method::SslSl,
        Method::Vespr,
        Method::VesprSsl,
        Method::VesprBoth,
        Method::SslSlGn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sl => "sl",
            Method::SlAt => "sl_at",
            Method::Ssl => "ssl",
            Method::SslAt => "ssl_at",
            Method::SslSl => "ssl_sl",
            Method::Vespr => "vespr",
            Method::VesprSsl => "vespr_ssl",
            Method::VesprBoth => "vespr_both",
            Method::SslSlGn => "ssl_sl_gn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::arg(format!("unknown method '{s}'")))
    }

    /// Uses the contrastive/SSL objective.
    pub fn uses_ssl(self) -> bool {
        !matches!(self, Method::Sl | Method::SlAt)
    }

    /// Trains the classifier head jointly; otherwise a linear probe supplies it.
    pub fn trains_classifier(self) -> bool {
        !matches!(self, Method::Ssl | Method::SslAt)
    }

    /// Guide of the adversarial augmentation, if any.
    pub fn attack_guide(self) -> Option<Guide> {
        match self {
            Method::SlAt | Method::Vespr => Some(Guide::Ce),
            Method::SslAt | Method::VesprSsl => Some(Guide::Contrastive),
            Method::VesprBoth => Some(Guide::Combined),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslVariant {
    SimClr,
    MoCo,
    SimSiam,
    Byol,
}

impl SslVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" | "sim_clr" => Ok(Self::SimClr),
            "moco" | "mo_co" => Ok(Self::MoCo),
            "simsiam" | "sim_siam" => Ok(Self::SimSiam),
            "byol" => Ok(Self::Byol),
            _ => Err(Error::arg(format!("unknown ssl variant '{s}'"))),
        }
    }

    pub fn needs_predictor(self) -> bool {
        matches!(self, Self::SimSiam | Self::Byol)
    }

    pub fn needs_momentum(self) -> bool {
        matches!(self, Self::MoCo | Self::Byol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    /// ×0.2 at 60%, 75% and 90% of the epochs.
    Step,
}

/// Augmentation-based baseline applied to SL batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlAugment {
    None,
    Cutout { hole: usize },
    Mixup { alpha: f64 },
    CutMix { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub rep_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub projector_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::TinyConvNet,
            rep_dim: 64,
            proj_dim: 64,
            hidden: 16,
            projector_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, image_shape: [usize; 3], num_classes: usize, variant: SslVariant, seed: u64) -> BundleSpec {
        let mut s = BundleSpec::new(self.arch, image_shape, self.rep_dim, self.proj_dim, num_classes);
        s.hidden = self.hidden;
        s.projector_layers = self.projector_layers;
        s.with_predictor = variant.needs_predictor();
        s.with_momentum = variant.needs_momentum();
        s.seed = seed;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub variant: SslVariant,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate per 256 samples; the applied rate is
    /// `base_lr × batch_size / 256`.
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub warmup_epochs: usize,
    pub optimizer: OptimConfig,
    pub weights: LossWeights,
    pub pgd: PgdConfig,
    /// Views for SSL objectives.
    pub pretrain_aug: AugmentPolicy,
    /// Views for SL objectives.
    pub sl_aug: AugmentPolicy,
    pub sl_augment: SlAugment,
    /// Dataset pre-transform applied once before training.
    pub iss: Option<IssMode>,
    pub jpeg_quality: u8,
    pub noise_sigma: f64,
    pub noise_prob: f64,
    /// EMA rate of the momentum copy (MoCo, BYOL).
    pub momentum_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for a method on `size×size` images.
    pub fn for_method(method: Method, size: usize) -> Self {
        let ssl = method.uses_ssl();
        // Joint SSL+CE objectives tolerate, and need, a larger step.
        let joint_ssl = ssl && method.trains_classifier();
        Self {
            method,
            variant: SslVariant::SimClr,
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 32,
            base_lr: if joint_ssl { 1.0 } else { 0.4 },
            schedule: LrSchedule::Cosine,
            warmup_epochs: if ssl { 1 } else { 0 },
            optimizer: OptimConfig {
                momentum: 0.9,
                weight_decay: if ssl { 1e-4 } else { 5e-4 },
            },
            weights: LossWeights::default(),
            pgd: PgdConfig::default(),
            pretrain_aug: AugmentPolicy::pretrain(size, 0),
            sl_aug: AugmentPolicy::lin_probe(size, 0),
            sl_augment: SlAugment::None,
            iss: None,
            jpeg_quality: 10,
            noise_sigma: 4.0 / 255.0,
            noise_prob: 0.5,
            momentum_rate: 0.99,
            seed: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::arg("batch_size must be >= 2"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::arg("base_lr must be > 0"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::arg("warmup_epochs exceeds epochs"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::arg("optimizer momentum must be in [0,1) and weight_decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum_rate) {
            return Err(Error::arg("momentum_rate must be in [0,1]"));
        }
        self.weights.validate()?;
        self.pretrain_aug.validate()?;
        self.sl_aug.validate()?;
        if self.method.attack_guide().is_some() {
            self.pgd.validate()?;
        }
        if self.method == Method::SslSlGn && !(self.noise_sigma > 0.0 && (0.0..=1.0).contains(&self.noise_prob)) {
            return Err(Error::arg("noise control needs noise_sigma > 0 and noise_prob in [0,1]"));
        }
        if self.iss == Some(IssMode::Jpeg) && !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::arg("jpeg_quality must be in [1,100]"));
        }
        match self.sl_augment {
            SlAugment::Mixup { alpha } | SlAugment::CutMix { alpha } if !(alpha > 0.0) => {
                Err(Error::arg("mixing alpha must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Linear-probe settings: frozen encoder, fresh affine head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimConfig,
    pub aug: AugmentPolicy,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn desk(size: usize) -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: 4.0,
            schedule: LrSchedule::Step,
            optimizer: OptimConfig {
                momentum: 0.9,
                weight_decay: 0.0,
            },
            aug: AugmentPolicy::lin_probe(size, 0),
            seed: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::arg("base_lr must be > 0"));
        }
        self.aug.validate()
    }
}
