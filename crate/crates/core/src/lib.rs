//! Core algorithms for gaze-based street-view safety perception studies.
//!
//! * [`gaze`] – eye-tracker log ingestion and I-VT fixation detection
//! * [`heatmap`] – fixation splatting, rank-CDF normalization, hue encoding
//! * [`segmentation`] – MoR / MoRH / adjusted MoH object metrics and ranking
//! * [`grouping`] – pairwise comparison records and safe/unsafe grouping
//! * [`stratify`] – balanced stimulus selection from model safety scores
//! * [`similarity`] – human vs. CAM heatmap agreement and method ranking
//! * [`io`] – PNG exchange formats

pub mod classes;
pub mod error;
pub mod gaze;
pub mod grid;
pub mod grouping;
pub mod heatmap;
pub mod io;
pub mod jsonl;
pub mod rng;
pub mod segmentation;
pub mod similarity;
pub mod stratify;

pub use classes::{class_name, NUM_CLASSES, UNLABELED};
pub use error::{Error, LineDiagnostic, Result};
pub use gaze::{
    classify_fixations_ivt, downsample, filter_invalid, parse_gaze_log, FixationEvent, IvtParams,
    RawGazeSample, ScreenGeometry, StreamKey, Validity,
};
pub use grid::Grid;
pub use grouping::{group_images, ComparisonRecord, Group, GroupLabel, Side};
pub use heatmap::{
    accumulate, aggregate_participants, cdf_normalize, hue_encode, AttentionAccumulator,
    AttentionHeatmap, HueMap, HUE_MAX,
};
pub use jsonl::{ParseMode, Parsed};
pub use segmentation::{mean_over_images, moh, mor, morh, top_k, MetricKind, ObjectVector, SegmentationMap};
pub use similarity::{cosine_element, l2_rms, rank_methods, CamMethod, SimilarityReport};
pub use stratify::{stratify_by_score, DualScore, Stratum};
