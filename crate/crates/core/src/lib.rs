//! Haptic texture authoring engine.
pub mod align;
pub mod corpus;
pub mod eval;
pub mod lpc;
pub mod nn;
pub mod render;
pub mod synth;
pub mod vae;
pub mod scalar;

pub use scalar::Scalar;

/// Training and checkpoint precision.
pub type Vae32 = vae::Vae<f32>;
pub type Vae64 = vae::Vae<f64>;
pub type LsfVector64 = lpc::LsfVector<f64>;
pub type ArCoeffs64 = lpc::ArCoeffs<f64>;
pub type Interpolator64 = synth::Interpolator<f64>;
pub type Synthesizer64 = synth::Synthesizer<f64>;
pub type RenderConfig64 = render::RenderConfig<f64>;
pub type RenderModel64 = render::RenderModel<f64>;
pub type ServoSim64 = render::ServoSim<f64>;
pub type ForceFrame64 = render::ForceFrame<f64>;
pub type FrictionAnchors32 = render::FrictionAnchorSet<f32>;
