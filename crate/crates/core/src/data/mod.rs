//! Datasets, synthetic category generation, and PCK evaluation.

pub mod dataset;
pub mod evaluate;
pub mod pck;
pub mod synthetic;

pub use dataset::{
    CategoryInfo, CropTransform, Dataset, ImageData, Keypoint, LintAction, PoseSample, Split,
};
pub use evaluate::{
    center_baseline, center_predictions, evaluate, evaluate_full, EvalMode, EvalOptions,
    EvalReport, PairEntry,
};
pub use pck::{mpck, score_sample, PckCounts, SampleGt, PCK_ALPHAS};
pub use synthetic::{generate_synthetic, write_synthetic, SynthConfig};
