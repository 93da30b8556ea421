//! Feature extractor, attention-based bag classifier and domain classifier.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{
    attention_pool, attention_weights, bag_predict, beta_weights, domain_forward, domain_predict,
    extract_features, extractor_forward, head_forward, multiscale_bag_predict, BagOutput,
    HeadNodes,
};
pub use params::{
    BagPredictorParams, Conv, DomainPredictorParams, DomainVars, ExtractorVars,
    FeatureExtractorParams, HeadVars, Linear, ParamSet,
};
