//! Multi-exit temporal boundary detection on per-frame feature sequences.
//!
//! A stack of per-frame backbone stages feeds one boundary detector per
//! stage. At inference, frames near boundaries found by an early detector
//! leave the pipeline and the rest are compacted for deeper stages.

pub mod config;
pub mod detector;
pub mod error;
pub mod evalproto;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod scheduler;
pub mod seqfeat;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::ModelConfig;
pub use detector::{detector_forward, Detector, DetectorConfig, OrderSet, ScoreSequence};
pub use error::{Error, Result};
pub use evalproto::{corpus_eval, match_boundaries, rel_dis, video_f1, AnnotationSet, EvalReport, MatchResult};
pub use layers::Activation;
pub use model::Model;
pub use scheduler::{run_dynamic_inference, ExitState, FlopsLedger, InferenceOutput};
pub use seqfeat::{FrameFeatureSequence, MultiScaleFeature, WindowTensor};
pub use tensor::Tensor;
pub use trainer::{fit, LrSchedule, TrainConfig};
