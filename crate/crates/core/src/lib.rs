//! Election simulation over a tagged social-media voter pool: corpus cleaning,
//! demographic annotation, IPF joint distributions, quota sampling, persona
//! polling through chat-completion backends, and evaluation metrics.

pub mod annotate;
pub mod corpus;
pub mod distribution;
pub mod engine;
pub mod metrics;
pub mod questionnaire;
pub mod sampler;
pub mod seed;
pub mod synthetic;
pub mod taxonomy;
