//! Speaker embeddings trained with a triplet loss, a conditional WGAN-GP
//! and a speaker classifier, plus the verification toolkit around them.
//!
//! Pipeline: [`featio`] turns audio (or a synthetic corpus) into normalized
//! log-mel slices, [`sampler`] builds triplet batches, [`trainer`] optimizes
//! the four [`nets`] against the [`losses`], and [`evalkit`] enrolls and
//! scores speakers.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod featio;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod sampler;
pub mod trainer;

pub use config::{
    Adversarial, Architecture, LossWeights, Margin, SamplingMode, SamplingPlan, TrainConfig,
    TripletReduction,
};
pub use error::{Error, Result};
pub use evalkit::{DetCurve, EvalReport, Protocol, SpeakerModel, TrialScoreSet};
pub use featio::{FbankSlice, FeatureSet, SetTag, SyntheticCorpus, Utterance};
pub use losses::LossComponents;
pub use nets::{ClassifierNet, DiscriminatorNet, Embedding, EncoderNet, GeneratorNet, Networks};
pub use sampler::TripletBatch;
pub use trainer::{LossRecord, Trainer};
