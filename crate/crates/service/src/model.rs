use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use streetgaze_core::{RawGazeSample, Validity};

pub const SESSION_LOG_SCHEMA: &str = "streetgaze.sessions/1";

/// Age bands offered by the demographics form.
pub const AGE_BANDS: [&str; 7] = ["18-24", "25-34", "35-44", "45-54", "55-64", "65+", "undisclosed"];

/// The only participant attributes the study stores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demographics {
    pub age_band: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    NonBinary,
    Undisclosed,
}

impl Demographics {
    pub fn validate(&self) -> Result<(), String> {
        if AGE_BANDS.contains(&self.age_band.as_str()) {
            Ok(())
        } else {
            Err(format!(
                "age_band `{}` is not one of {}",
                self.age_band,
                AGE_BANDS.join(", ")
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Complete,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub demographics: Demographics,
    pub created_at_ms: u64,
    pub pairs_served: u32,
    pub pairs_answered: u32,
    pub state: SessionState,
    pub last_activity_ms: u64,
    /// When the session left the active state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_at_ms: Option<u64>,
    /// Unordered image pairs already shown, smaller id first.
    #[serde(default)]
    pub seen_pairs: BTreeSet<(String, String)>,
}

/// One row of the exported session manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSummary {
    pub session_id: String,
    pub age_band: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    pub created_at_ms: u64,
    pub pairs_served: u32,
    pub pairs_answered: u32,
    pub state: SessionState,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        Self {
            session_id: s.session_id.clone(),
            age_band: s.demographics.age_band.clone(),
            gender: s.demographics.gender,
            created_at_ms: s.created_at_ms,
            pairs_served: s.pairs_served,
            pairs_answered: s.pairs_answered,
            state: s.state,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAssignment {
    pub pair_id: String,
    pub session_id: String,
    pub left_image: String,
    pub right_image: String,
    pub served_at_ms: u64,
    /// Position of this pair within its session, starting at 1.
    pub index: u32,
}

/// A gaze sample as posted by a tracker bridge. The session and image come
/// from the request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeSampleIn {
    pub t_ms: u64,
    #[serde(default)]
    pub x_px: Option<f64>,
    #[serde(default)]
    pub y_px: Option<f64>,
    pub valid: bool,
}

impl GazeSampleIn {
    pub fn to_raw(self, session_id: &str, image_id: &str) -> RawGazeSample {
        match (self.valid, self.x_px, self.y_px) {
            (true, Some(x), Some(y)) => RawGazeSample::valid(session_id, image_id, self.t_ms, x, y),
            _ => {
                let mut s = RawGazeSample::invalid(session_id, image_id, self.t_ms);
                if let (Some(x), Some(y)) = (self.x_px, self.y_px) {
                    s.x = x;
                    s.y = y;
                }
                s.validity = if self.valid { Validity::Valid } else { Validity::Invalid };
                s
            }
        }
    }
}
