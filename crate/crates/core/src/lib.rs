//! Gender-tag-conditioned toy speech translation: audio synthesis and voice
//! perturbation, log-mel features, a small reverse-mode autodiff engine, the model,
//! training loops with gradient reversal, and gender-accuracy evaluation.

pub mod audio;
pub mod autodiff;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod num;
pub mod perturb;
pub mod synthdata;
pub mod train;

pub use model::{Model, ModelConfig, ModelMode, Vocabulary};
pub use perturb::{PerturbConfig, SpeakerGender};
pub use synthdata::SynthSpec;
pub use train::{TrainConfig, Utterance};

pub type Waveform = audio::Waveform<f64>;
pub type FeatureMatrix = dsp::FeatureMatrix<f64>;
pub type F0Contour = dsp::F0Contour<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamSet = autodiff::ParamSet<f64>;

/// Any failure raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Perturb(#[from] perturb::PerturbError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Synth(#[from] synthdata::SynthError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}
