//! Encoder, projector, classifier and momentum-encoder networks.

mod bundle;
mod checkpoint;
mod network;
mod params;

pub use bundle::{
    build_bundle, build_classifier, build_encoder, grad_wrt_input, Arch, BundleGrads, BundlePass,
    BundleSpec, EvalCounters, ForwardOutput, HeadGrads, HeadLoss, Heads, ModelBundle,
    MomentumCopy,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{Layer, Network, NetworkBuilder, Tape};
pub use params::{ParamSet, Tensor};
