//! Slide-level aggregation, metrics, attention heatmaps and checkpoint evaluation.

mod aggregate;
mod evaluate;
mod heatmap;
mod metrics;

pub use aggregate::{patch_baseline_probability, slide_probability};
pub use evaluate::{
    evaluate_corpus, evaluate_predictor, format_predictions, parse_predictions, BagPrediction, BagSampling,
    Evaluation, InstanceInfo, Predictor, SlidePrediction, PATCH_CAP, PREDICTIONS_HEADER,
};
pub use heatmap::{heat_color, normalize_attention, render_attention_heatmap, HeatCell, Heatmap, BACKGROUND};
pub use metrics::{compute_metrics, Metrics, DEFAULT_THRESHOLD};
