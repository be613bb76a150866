//! Backend for the pairwise "Which place looks safer?" survey.
//!
//! Participants create a session with minimal demographics, are served
//! image pairs by an exposure-balancing scheduler, answer each pair once and
//! may stream gaze samples while viewing. Every change is written to an
//! append-only event log before it is acknowledged.

pub mod config;
pub mod error;
pub mod http;
pub mod model;
pub mod service;
pub mod state;
pub mod store;

pub use config::{parse_image_manifest, SchedulerPolicy, ServerConfig, StudyConfig, StudyImage};
pub use error::{Result, ServiceError};
pub use model::{Demographics, GazeSampleIn, Gender, PairAssignment, Session, SessionState, SessionSummary};
pub use service::{
    Clock, ExportOptions, ExportSummary, ExposureStats, FaultPoint, ManualClock, SurveyService,
    SystemClock,
};
