//! Study state and the events that change it.
//!
//! [`StudyState::apply`] is the only mutation path, shared by live requests
//! and log replay, so a replayed state equals the live one.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use streetgaze_core::ComparisonRecord;

use crate::config::SchedulerPolicy;
use crate::model::{Demographics, GazeSampleIn, PairAssignment, Session, SessionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session_id: String,
        demographics: Demographics,
        at_ms: u64,
    },
    PairServed {
        pair: PairAssignment,
    },
    ChoiceRecorded {
        record: ComparisonRecord,
        /// Whether this answer completes the session.
        completes: bool,
    },
    GazeAppended {
        session_id: String,
        image_id: String,
        samples: Vec<GazeSampleIn>,
        at_ms: u64,
    },
    SessionAbandoned {
        session_id: String,
        at_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyState {
    pub sessions: BTreeMap<String, Session>,
    pub pairs: BTreeMap<String, PairAssignment>,
    /// Answers keyed by pair id.
    pub choices: BTreeMap<String, ComparisonRecord>,
    /// Pair ids in the order their answers were recorded.
    pub choice_order: Vec<String>,
    /// Times each image has been served, across all sessions.
    pub exposure: BTreeMap<String, u64>,
    /// Gaze samples per session, then per image, in arrival order.
    pub gaze: BTreeMap<String, BTreeMap<String, Vec<GazeSampleIn>>>,
    /// Number of scheduling decisions made so far.
    pub decisions: u64,
}

pub fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl StudyState {
    pub fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::SessionCreated {
                session_id,
                demographics,
                at_ms,
            } => {
                if self.sessions.contains_key(session_id) {
                    return Err(format!("session {session_id} created twice"));
                }
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id: session_id.clone(),
                        demographics: demographics.clone(),
                        created_at_ms: *at_ms,
                        pairs_served: 0,
                        pairs_answered: 0,
                        state: SessionState::Active,
                        last_activity_ms: *at_ms,
                        closed_at_ms: None,
                        seen_pairs: BTreeSet::new(),
                    },
                );
            }
            Event::PairServed { pair } => {
                let session = self
                    .sessions
                    .get_mut(&pair.session_id)
                    .ok_or_else(|| format!("pair for unknown session {}", pair.session_id))?;
                if self.pairs.contains_key(&pair.pair_id) {
                    return Err(format!("pair {} served twice", pair.pair_id));
                }
                session.pairs_served += 1;
                session.last_activity_ms = session.last_activity_ms.max(pair.served_at_ms);
                session
                    .seen_pairs
                    .insert(unordered(&pair.left_image, &pair.right_image));
                for img in [&pair.left_image, &pair.right_image] {
                    *self.exposure.entry(img.clone()).or_default() += 1;
                }
                self.decisions += 1;
                self.pairs.insert(pair.pair_id.clone(), pair.clone());
            }
            Event::ChoiceRecorded { record, completes } => {
                if self.choices.contains_key(&record.pair_id) {
                    return Err(format!("pair {} answered twice", record.pair_id));
                }
                let session = self
                    .sessions
                    .get_mut(&record.session_id)
                    .ok_or_else(|| format!("choice for unknown session {}", record.session_id))?;
                session.pairs_answered += 1;
                session.last_activity_ms = session.last_activity_ms.max(record.t_ms);
                if *completes && session.state == SessionState::Active {
                    session.state = SessionState::Complete;
                    session.closed_at_ms = Some(record.t_ms);
                }
                self.choice_order.push(record.pair_id.clone());
                self.choices.insert(record.pair_id.clone(), record.clone());
            }
            Event::GazeAppended {
                session_id,
                image_id,
                samples,
                at_ms,
            } => {
                let session = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| format!("gaze for unknown session {session_id}"))?;
                session.last_activity_ms = session.last_activity_ms.max(*at_ms);
                self.gaze
                    .entry(session_id.clone())
                    .or_default()
                    .entry(image_id.clone())
                    .or_default()
                    .extend_from_slice(samples);
            }
            Event::SessionAbandoned { session_id, at_ms } => {
                let session = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| format!("unknown session {session_id} abandoned"))?;
                if session.state != SessionState::Active {
                    return Err(format!("session {session_id} is not active"));
                }
                session.state = SessionState::Abandoned;
                session.closed_at_ms = Some(*at_ms);
            }
        }
        Ok(())
    }

    pub fn exposure_of(&self, image_id: &str) -> u64 {
        self.exposure.get(image_id).copied().unwrap_or(0)
    }

    /// Pairs served to `session_id` that are still waiting for an answer.
    pub fn open_pairs<'a>(&'a self, session_id: &'a str) -> impl Iterator<Item = &'a PairAssignment> {
        self.pairs
            .values()
            .filter(move |p| p.session_id == session_id && !self.choices.contains_key(&p.pair_id))
    }

    /// Images a session has been shown, so gaze for them can be accepted.
    pub fn shown_to(&self, session_id: &str, image_id: &str) -> bool {
        self.sessions.get(session_id).is_some_and(|s| {
            s.seen_pairs
                .iter()
                .any(|(a, b)| a == image_id || b == image_id)
        })
    }

    pub fn last_gaze_t(&self, session_id: &str, image_id: &str) -> Option<u64> {
        self.gaze
            .get(session_id)
            .and_then(|m| m.get(image_id))
            .and_then(|v| v.last())
            .map(|s| s.t_ms)
    }
}

/// Picks the next pair for a session, or `None` when every pair of images
/// has already been shown to it. The returned order is the on-screen order.
pub fn choose_pair<R: Rng>(
    policy: SchedulerPolicy,
    images: &[String],
    exposure: impl Fn(&str) -> u64,
    seen: &BTreeSet<(String, String)>,
    rng: &mut R,
) -> Option<(String, String)> {
    let n = images.len();
    if n < 2 || seen.len() >= n * (n - 1) / 2 {
        return None;
    }
    let unseen = |a: &str, b: &str| a != b && !seen.contains(&unordered(a, b));
    let pick = match policy {
        SchedulerPolicy::Balanced => {
            let mut order: Vec<&String> = images.iter().collect();
            order.shuffle(rng);
            order.sort_by_key(|id| exposure(id));
            let mut found = None;
            'outer: for i in 0..n {
                for j in i + 1..n {
                    if unseen(order[i], order[j]) {
                        found = Some((order[i].clone(), order[j].clone()));
                        break 'outer;
                    }
                }
            }
            found
        }
        SchedulerPolicy::Uniform => {
            let mut found = None;
            for _ in 0..64 {
                let a = &images[rng.random_range(0..n)];
                let b = &images[rng.random_range(0..n)];
                if unseen(a, b) {
                    found = Some((a.clone(), b.clone()));
                    break;
                }
            }
            found.or_else(|| {
                let mut rest: Vec<(String, String)> = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if unseen(&images[i], &images[j]) {
                            rest.push((images[i].clone(), images[j].clone()));
                        }
                    }
                }
                rest.choose(rng).cloned()
            })
        }
    }?;
    Some(if rng.random_bool(0.5) {
        (pick.1, pick.0)
    } else {
        pick
    })
}
