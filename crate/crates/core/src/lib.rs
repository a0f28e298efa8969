//! Contrastive learning of musical representations from raw waveforms:
//! augmentation, a SampleCNN-style encoder trained with NT-Xent, and
//! probe-based evaluation of the frozen representations.

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod contrastive;
pub mod datasets;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod seed;

pub use audio::{AudioBuffer, AudioError};
pub use augment::{make_pair, AugmentError, ChainConfig, ExamplePair, Transform, TransformChain, TransformConfig};
pub use autodiff::{AdamConfig, Tape, Tensor, TensorError};
pub use contrastive::{nt_xent, pretrain, ContrastiveError, PretrainOutcome, RunOutput, TrainConfig};
pub use datasets::{load_manifest, DatasetError, Manifest, Split, SynthConfig, TagVocabulary};
pub use eval::{evaluate, EvalError, EvalReport, ProbeConfig};
pub use model::{Checkpoint, Encoder, EncoderConfig, ModelParams, ProbeKind, SpectrumConfig};
