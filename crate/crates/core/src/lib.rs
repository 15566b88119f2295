//! Weakly supervised detection of visual corruptions in rendered video.
//!
//! Videos are cut into bags of 512 frames, each made of 32 segments of 16
//! frames. Only bag-level labels are needed for training: a segment scorer is
//! learned with a multiple-instance ranking objective (or attention pooling),
//! and at test time a bag is flagged when any segment scores above a threshold
//! tuned for a target false-positive rate on clean footage.

pub mod checkpoint;
pub mod error;
pub mod energy;
pub mod eval;
pub mod features;
pub mod formats;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod video;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use eval::{
    bag_score, per_kind_report, recall_at_threshold, roc_auc, tune_threshold, Granularity, MetricsReport, RocPoint,
    ScoreRow, ScoreTable, ThresholdResult,
};
pub use features::{extract_segment_features, extract_video_features, FeatureBag, FeatureVector, BUILTIN_DIM};
pub use formats::{read_features, read_video, write_features, write_video, FeatureFile};
pub use manifest::{DatasetManifest, ManifestEntry, Split, WeakLabel};
pub use model::{FcHead, GradientSet, Model, ModelKind};
pub use optim::{train, AdagradState, AdamState, OptimizerKind, TrainConfig, TrainOutcome, TrainState, Trainer};
pub use rng::SplitMix64;
pub use synth::{generate_dataset, inject, render_base_video, CorruptionEvent, CorruptionKind, GeneratorConfig, SceneSpec};
pub use video::{make_bags, Bag, BagGeometry, Frame, Segment, Video};
