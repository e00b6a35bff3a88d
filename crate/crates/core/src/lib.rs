//! Cognitive trace annotation of search sessions.
//!
//! Raw interaction logs are segmented into sessions, labeled with
//! Information Foraging labels by rules or by a three-agent workflow,
//! reviewed by humans, scored for agreement and used as features for
//! outcome forecasting.

pub mod agents;
pub mod backend;
pub mod forecasting;
pub mod heuristic;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod store;
pub mod text;

pub use model::{
    ActionType, AnnotatedSession, AnnotationSource, CognitiveAnnotation, CognitiveLabel, Event, Session,
};
