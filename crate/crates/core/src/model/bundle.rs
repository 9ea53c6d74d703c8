use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkBuilder, Tape};
use super::params::ParamSet;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Two 3×3 conv stages (the second strided) and a global average pool.
    TinyConvNet,
    /// Two dense layers on flattened pixels.
    Mlp,
}

/// Architecture descriptor; everything needed to rebuild a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub arch: Arch,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    pub rep_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub projector_layers: usize,
    /// Hidden width of the MLP encoder; conv channels of the first stage.
    pub hidden: usize,
    pub with_predictor: bool,
    pub with_momentum: bool,
    pub seed: u64,
}

impl BundleSpec {
    pub fn new(
        arch: Arch,
        image_shape: [usize; 3],
        rep_dim: usize,
        proj_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            arch,
            image_shape,
            rep_dim,
            proj_dim,
            num_classes,
            projector_layers: 3,
            hidden: match arch {
                Arch::Mlp => 128,
                Arch::TinyConvNet => 16,
            },
            with_predictor: false,
            with_momentum: false,
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.image_shape.iter().product()
    }
}

/// Which heads a forward pass evaluates. The representation is always
/// computed; the projector, classifier and predictor only on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Heads {
    pub proj: bool,
    pub logits: bool,
    /// Predictor on top of the projection (implies `proj`).
    pub pred: bool,
}

impl Heads {
    pub const REP: Heads = Heads {
        proj: false,
        logits: false,
        pred: false,
    };
    pub const PROJ: Heads = Heads {
        proj: true,
        logits: false,
        pred: false,
    };
    pub const LOGITS: Heads = Heads {
        proj: false,
        logits: true,
        pred: false,
    };
    pub const ALL: Heads = Heads {
        proj: true,
        logits: true,
        pred: false,
    };
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOutput {
    pub rep: Array2<f64>,
    pub proj: Option<Array2<f64>>,
    pub logits: Option<Array2<f64>>,
    pub pred: Option<Array2<f64>>,
}

/// Gradients of a scalar objective with respect to head outputs.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads {
    pub rep: Option<Array2<f64>>,
    pub proj: Option<Array2<f64>>,
    pub logits: Option<Array2<f64>>,
    pub pred: Option<Array2<f64>>,
}

/// Value of an objective evaluated on head outputs. `grads == None` marks
/// an objective that cannot be differentiated.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub value: f64,
    pub grads: Option<HeadGrads>,
}

/// Recorded forward pass through the bundle.
#[derive(Debug, Clone)]
pub struct BundlePass {
    pub out: ForwardOutput,
    enc: Tape,
    proj: Option<Tape>,
    logits: Option<Tape>,
    pred: Option<Tape>,
}

/// Per-network gradient buffers mirroring a bundle.
#[derive(Debug, Clone)]
pub struct BundleGrads {
    pub encoder: ParamSet,
    pub projector: ParamSet,
    pub classifier: ParamSet,
    pub predictor: Option<ParamSet>,
}

impl BundleGrads {
    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.projector.is_finite()
            && self.classifier.is_finite()
            && self.predictor.as_ref().is_none_or(ParamSet::is_finite)
    }
}

/// Evaluation counters, bumped once per network evaluation.
#[derive(Debug, Default)]
pub struct EvalCounters {
    pub encoder: AtomicUsize,
    pub projector: AtomicUsize,
    pub classifier: AtomicUsize,
    pub predictor: AtomicUsize,
}

impl EvalCounters {
    pub fn snapshot(&self) -> [usize; 4] {
        [
            self.encoder.load(Ordering::Relaxed),
            self.projector.load(Ordering::Relaxed),
            self.classifier.load(Ordering::Relaxed),
            self.predictor.load(Ordering::Relaxed),
        ]
    }
}

fn bump(c: &AtomicUsize) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumCopy {
    pub encoder: Network,
    pub projector: Network,
}

/// Encoder `f`, projector `g`, classifier `c`, optional predictor and
/// optional momentum (EMA) copy of `f` and `g`.
#[derive(Debug)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub encoder: Network,
    pub projector: Network,
    pub classifier: Network,
    pub predictor: Option<Network>,
    pub momentum: Option<MomentumCopy>,
    pub counters: EvalCounters,
}

impl Clone for ModelBundle {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            classifier: self.classifier.clone(),
            predictor: self.predictor.clone(),
            momentum: self.momentum.clone(),
            counters: EvalCounters::default(),
        }
    }
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.encoder == other.encoder
            && self.projector == other.projector
            && self.classifier == other.classifier
            && self.predictor == other.predictor
            && self.momentum == other.momentum
    }
}

/// Fixed input standardization applied by every encoder.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn build_encoder(spec: &BundleSpec, seed: u64) -> Network {
    let [c, h, w] = spec.image_shape;
    match spec.arch {
        Arch::Mlp => NetworkBuilder::new("encoder", spec.input_dim(), seed)
            .standardize(PIXEL_MEAN, PIXEL_STD)
            .dense(spec.hidden)
            .relu()
            .dense(spec.rep_dim)
            .relu()
            .build(),
        Arch::TinyConvNet => {
            let (h2, w2) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
            NetworkBuilder::new("encoder", spec.input_dim(), seed)
                .standardize(PIXEL_MEAN, PIXEL_STD)
                .conv3x3(c, h, w, spec.hidden, 1)
                .relu()
                .conv3x3(spec.hidden, h, w, spec.rep_dim, 2)
                .relu()
                .global_avg_pool(spec.rep_dim, h2, w2)
                .build()
        }
    }
}

fn build_projector(spec: &BundleSpec, seed: u64) -> Network {
    let mut b = NetworkBuilder::new("projector", spec.rep_dim, seed);
    for i in 0..spec.projector_layers {
        b = b.dense(spec.proj_dim);
        if i + 1 < spec.projector_layers {
            b = b.relu();
        }
    }
    b.build()
}

fn build_predictor(spec: &BundleSpec, seed: u64) -> Network {
    NetworkBuilder::new("predictor", spec.proj_dim, seed)
        .dense((spec.proj_dim / 4).max(4))
        .relu()
        .dense(spec.proj_dim)
        .build()
}

/// Linear classifier head `R^D → R^K`.
pub fn build_classifier(rep_dim: usize, num_classes: usize, seed: u64) -> Network {
    NetworkBuilder::new("classifier", rep_dim, seed)
        .dense(num_classes)
        .build()
}

pub fn build_bundle(spec: BundleSpec) -> Result<ModelBundle> {
    let [c, h, w] = spec.image_shape;
    if spec.rep_dim == 0 || spec.proj_dim == 0 || spec.num_classes == 0 {
        return Err(Error::arg("rep_dim, proj_dim and num_classes must be >= 1"));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "invalid image shape {:?}",
            spec.image_shape
        )));
    }
    if spec.projector_layers == 0 || spec.hidden == 0 {
        return Err(Error::arg("projector_layers and hidden must be >= 1"));
    }
    if spec.arch == Arch::TinyConvNet && (h < 3 || w < 3) {
        return Err(Error::arg("TinyConvNet needs images of at least 3×3"));
    }
    let s = spec.seed;
    let encoder = build_encoder(&spec, seed::derive(s, "encoder"));
    let projector = build_projector(&spec, seed::derive(s, "projector"));
    let classifier = build_classifier(spec.rep_dim, spec.num_classes, seed::derive(s, "classifier"));
    let predictor = spec
        .with_predictor
        .then(|| build_predictor(&spec, seed::derive(s, "predictor")));
    let momentum = spec.with_momentum.then(|| MomentumCopy {
        encoder: encoder.clone(),
        projector: projector.clone(),
    });
    Ok(ModelBundle {
        spec,
        encoder,
        projector,
        classifier,
        predictor,
        momentum,
        counters: EvalCounters::default(),
    })
}

impl ModelBundle {
    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        if batch.image_shape() != self.spec.image_shape {
            return Err(Error::arg(format!(
                "batch image shape {:?} does not match bundle {:?}",
                batch.image_shape(),
                self.spec.image_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &ImageBatch, heads: Heads) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        self.forward_input(&batch.to_input(), heads)
    }

    /// Forward on a flattened `N × C·H·W` input. No parameter side effects.
    pub fn forward_input(&self, x: &Array2<f64>, heads: Heads) -> Result<ForwardOutput> {
        bump(&self.counters.encoder);
        let rep = self.encoder.forward(x)?;
        let mut out = ForwardOutput {
            rep,
            ..Default::default()
        };
        if heads.proj || heads.pred {
            bump(&self.counters.projector);
            out.proj = Some(self.projector.forward(&out.rep)?);
        }
        if heads.pred {
            let p = self
                .predictor
                .as_ref()
                .ok_or_else(|| Error::State("bundle has no predictor head".into()))?;
            bump(&self.counters.predictor);
            out.pred = Some(p.forward(out.proj.as_ref().expect("proj computed"))?);
        }
        if heads.logits {
            bump(&self.counters.classifier);
            out.logits = Some(self.classifier.forward(&out.rep)?);
        }
        Ok(out)
    }

    /// Forward pass that records what [`Self::backward_pass`] needs.
    pub fn forward_pass(&self, x: &Array2<f64>, heads: Heads) -> Result<BundlePass> {
        bump(&self.counters.encoder);
        let (rep, enc) = self.encoder.forward_tape(x)?;
        let mut pass = BundlePass {
            out: ForwardOutput {
                rep,
                ..Default::default()
            },
            enc,
            proj: None,
            logits: None,
            pred: None,
        };
        if heads.proj || heads.pred {
            bump(&self.counters.projector);
            let (p, t) = self.projector.forward_tape(&pass.out.rep)?;
            pass.out.proj = Some(p);
            pass.proj = Some(t);
        }
        if heads.pred {
            let net = self
                .predictor
                .as_ref()
                .ok_or_else(|| Error::State("bundle has no predictor head".into()))?;
            bump(&self.counters.predictor);
            let (p, t) = net.forward_tape(pass.out.proj.as_ref().expect("proj computed"))?;
            pass.out.pred = Some(p);
            pass.pred = Some(t);
        }
        if heads.logits {
            bump(&self.counters.classifier);
            let (l, t) = self.classifier.forward_tape(&pass.out.rep)?;
            pass.out.logits = Some(l);
            pass.logits = Some(t);
        }
        Ok(pass)
    }

    /// Back-propagate head gradients. Returns the input gradient; parameter
    /// gradients are accumulated into `grads` when given.
    pub fn backward_pass(
        &self,
        pass: &BundlePass,
        head_grads: &HeadGrads,
        mut grads: Option<&mut BundleGrads>,
    ) -> Result<Array2<f64>> {
        let mut rep_grad = head_grads
            .rep
            .clone()
            .unwrap_or_else(|| Array2::zeros(pass.out.rep.raw_dim()));
        let mut proj_grad = head_grads.proj.clone();
        if let Some(gp) = &head_grads.pred {
            let tape = pass
                .pred
                .as_ref()
                .ok_or_else(|| Error::State("predictor gradient without predictor pass".into()))?;
            let net = self.predictor.as_ref().expect("predictor exists when taped");
            let g = net.backward(
                tape,
                gp,
                grads.as_deref_mut().and_then(|g| g.predictor.as_mut()),
            );
            proj_grad = Some(match proj_grad {
                Some(p) => p + g,
                None => g,
            });
        }
        if let Some(gp) = &proj_grad {
            let tape = pass
                .proj
                .as_ref()
                .ok_or_else(|| Error::State("projection gradient without projector pass".into()))?;
            rep_grad += &self
                .projector
                .backward(tape, gp, grads.as_deref_mut().map(|g| &mut g.projector));
        }
        if let Some(gl) = &head_grads.logits {
            let tape = pass
                .logits
                .as_ref()
                .ok_or_else(|| Error::State("logit gradient without classifier pass".into()))?;
            rep_grad += &self
                .classifier
                .backward(tape, gl, grads.as_deref_mut().map(|g| &mut g.classifier));
        }
        Ok(self
            .encoder
            .backward(&pass.enc, &rep_grad, grads.map(|g| &mut g.encoder)))
    }

    pub fn zero_grads(&self) -> BundleGrads {
        BundleGrads {
            encoder: self.encoder.params.zeros_like(),
            projector: self.projector.params.zeros_like(),
            classifier: self.classifier.params.zeros_like(),
            predictor: self.predictor.as_ref().map(|p| p.params.zeros_like()),
        }
    }

    /// Projections from the momentum copy. Errors without one.
    pub fn momentum_proj(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self
            .momentum
            .as_ref()
            .ok_or_else(|| Error::State("bundle has no momentum copy".into()))?;
        m.projector.forward(&m.encoder.forward(x)?)
    }

    /// `momentum ← m·momentum + (1−m)·source`, elementwise.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::arg(format!("momentum rate {m} outside [0,1]")));
        }
        let copy = self
            .momentum
            .as_mut()
            .ok_or_else(|| Error::State("bundle has no momentum copy".into()))?;
        for (dst, src) in [
            (&mut copy.encoder.params, &self.encoder.params),
            (&mut copy.projector.params, &self.projector.params),
        ] {
            for (d, s) in dst.values_mut().zip(src.values()) {
                *d = m * *d + (1.0 - m) * s;
            }
        }
        Ok(())
    }

    /// Hash of encoder and projector parameters.
    pub fn backbone_hash(&self) -> String {
        format!(
            "{}{}",
            self.encoder.params.hash_hex(),
            self.projector.params.hash_hex()
        )
    }

    /// All parameter sets in checkpoint order with their prefixes.
    pub fn named_param_sets(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut v = vec![
            ("encoder", &self.encoder.params),
            ("projector", &self.projector.params),
            ("classifier", &self.classifier.params),
        ];
        if let Some(p) = &self.predictor {
            v.push(("predictor", &p.params));
        }
        if let Some(m) = &self.momentum {
            v.push(("momentum.encoder", &m.encoder.params));
            v.push(("momentum.projector", &m.projector.params));
        }
        v
    }

    pub(crate) fn named_param_sets_mut(&mut self) -> Vec<(&'static str, &mut ParamSet)> {
        let mut v = vec![
            ("encoder", &mut self.encoder.params),
            ("projector", &mut self.projector.params),
            ("classifier", &mut self.classifier.params),
        ];
        if let Some(p) = &mut self.predictor {
            v.push(("predictor", &mut p.params));
        }
        if let Some(m) = &mut self.momentum {
            v.push(("momentum.encoder", &mut m.encoder.params));
            v.push(("momentum.projector", &mut m.projector.params));
        }
        v
    }
}

/// Gradient of a head objective with respect to input pixels. Parameters
/// are untouched.
pub fn grad_wrt_input<F>(
    bundle: &ModelBundle,
    x: &Array2<f64>,
    heads: Heads,
    objective: F,
) -> Result<(f64, Array2<f64>)>
where
    F: Fn(&ForwardOutput) -> Result<HeadLoss>,
{
    let pass = bundle.forward_pass(x, heads)?;
    let loss = objective(&pass.out)?;
    let grads = loss.grads.ok_or_else(|| {
        Error::Unsupported("objective does not provide gradients".into())
    })?;
    let g = bundle.backward_pass(&pass, &grads, None)?;
    Ok((loss.value, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn mlp_spec() -> BundleSpec {
        let mut s = BundleSpec::new(Arch::Mlp, [3, 8, 8], 16, 16, 2);
        s.hidden = 16;
        s
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let b = build_bundle(mlp_spec()).unwrap();
        let x = Array2::zeros((1, 192));
        let out = b.forward_input(&x, Heads::LOGITS).unwrap();
        let l = out.logits.unwrap();
        assert_eq!(l.shape(), &[1, 2]);
        assert!(l.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(build_bundle(mlp_spec()).unwrap(), build_bundle(mlp_spec()).unwrap());
        let mut other = mlp_spec();
        other.seed = 1;
        assert_ne!(build_bundle(mlp_spec()).unwrap(), build_bundle(other).unwrap());
    }

    #[test]
    fn momentum_initialized_to_source() {
        let mut s = mlp_spec();
        s.with_momentum = true;
        let b = build_bundle(s).unwrap();
        let m = b.momentum.as_ref().unwrap();
        assert_eq!(m.encoder, b.encoder);
        assert_eq!(m.projector, b.projector);
    }

    #[test]
    fn momentum_update_rules() {
        let mut s = mlp_spec();
        s.with_momentum = true;
        let mut b = build_bundle(s).unwrap();
        b.encoder.params.tensors[0].data[0] = 1.0;
        b.momentum.as_mut().unwrap().encoder.params.tensors[0].data[0] = 0.0;
        b.momentum_update(1.0).unwrap();
        assert_eq!(b.momentum.as_ref().unwrap().encoder.params.tensors[0].data[0], 0.0);
        b.momentum_update(0.999).unwrap();
        let v = b.momentum.as_ref().unwrap().encoder.params.tensors[0].data[0];
        assert!((v - 0.001).abs() < 1e-15);
        b.momentum_update(0.0).unwrap();
        assert_eq!(b.momentum.as_ref().unwrap().encoder, b.encoder);

        let mut plain = build_bundle(mlp_spec()).unwrap();
        assert!(matches!(plain.momentum_update(0.5), Err(Error::State(_))));
    }

    #[test]
    fn rep_only_skips_heads_and_empty_batch_is_fine() {
        let b = build_bundle(mlp_spec()).unwrap();
        let out = b.forward_input(&Array2::zeros((0, 192)), Heads::REP).unwrap();
        assert_eq!(out.rep.shape(), &[0, 16]);
        assert!(out.proj.is_none() && out.logits.is_none());
        assert_eq!(b.counters.snapshot(), [1, 0, 0, 0]);
        b.forward_input(&Array2::zeros((2, 192)), Heads::ALL).unwrap();
        assert_eq!(b.counters.snapshot(), [2, 1, 1, 0]);
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let b = build_bundle(mlp_spec()).unwrap();
        let batch = ImageBatch::new(
            Array4::zeros((1, 3, 4, 4)),
            vec![0],
            vec!["x".into()],
            2,
        )
        .unwrap();
        assert!(matches!(b.forward(&batch, Heads::REP), Err(Error::Argument(_))));
    }

    #[test]
    fn non_differentiable_objective_is_unsupported() {
        let b = build_bundle(mlp_spec()).unwrap();
        let r = grad_wrt_input(&b, &Array2::zeros((1, 192)), Heads::REP, |o| {
            Ok(HeadLoss {
                value: o.rep.sum(),
                grads: None,
            })
        });
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn conv_bundle_builds() {
        let s = BundleSpec::new(Arch::TinyConvNet, [3, 8, 8], 8, 8, 3);
        let b = build_bundle(s).unwrap();
        let out = b.forward_input(&Array2::from_elem((2, 192), 0.3), Heads::ALL).unwrap();
        assert_eq!(out.rep.shape(), &[2, 8]);
        assert_eq!(out.logits.unwrap().shape(), &[2, 3]);
    }
}
