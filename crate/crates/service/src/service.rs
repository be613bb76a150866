use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::Serialize;
use streetgaze_core::gaze::{write_gaze_log, MAX_CLAMPED_REGRESSION_MS};
use streetgaze_core::grouping::write_comparison_log;
use streetgaze_core::jsonl::{self, ParseMode, Parsed};
use streetgaze_core::rng::indexed_substream;
use streetgaze_core::{ComparisonRecord, RawGazeSample, Side};

use crate::config::StudyConfig;
use crate::error::{Result, ServiceError};
use crate::model::{
    Demographics, GazeSampleIn, PairAssignment, Session, SessionState, SessionSummary,
    SESSION_LOG_SCHEMA,
};
use crate::state::{choose_pair, Event, StudyState};
use crate::store::EventStore;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn at(ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(ms)))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Injected faults for crash testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultPoint {
    #[default]
    None,
    /// Stop after the next event reaches the log but before it is applied
    /// or acknowledged.
    AfterAppend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExportOptions {
    pub include_abandoned: bool,
}

pub const COMPARISONS_FILE: &str = "comparisons.jsonl";
pub const GAZE_FILE: &str = "gaze.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    pub comparisons: usize,
    pub gaze_samples: usize,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExposureStats {
    pub images: usize,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub target: Option<f64>,
}

/// The survey backend: validates requests, logs them durably, then applies
/// them to the in-memory study state.
pub struct SurveyService {
    config: StudyConfig,
    image_ids: Vec<String>,
    state: StudyState,
    store: EventStore,
    clock: Arc<dyn Clock>,
    fault: FaultPoint,
    halted: bool,
}

impl SurveyService {
    /// Opens a durable service whose event log lives in `data_dir`.
    pub fn open(
        config: StudyConfig,
        data_dir: &Path,
        snapshot_every: u64,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let (store, state) = EventStore::open(data_dir, snapshot_every)?;
        Ok(Self::with_parts(config, store, state, clock))
    }

    /// A service that keeps everything in memory.
    pub fn in_memory(config: StudyConfig, clock: Arc<dyn Clock>) -> Self {
        Self::with_parts(config, EventStore::in_memory(), StudyState::default(), clock)
    }

    fn with_parts(
        config: StudyConfig,
        store: EventStore,
        state: StudyState,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let image_ids = config.images.iter().map(|i| i.image_id.clone()).collect();
        Self {
            config,
            image_ids,
            state,
            store,
            clock,
            fault: FaultPoint::None,
            halted: false,
        }
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn state(&self) -> &StudyState {
        &self.state
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.state.sessions.get(session_id)
    }

    /// Sequence number of the last logged event.
    pub fn last_seq(&self) -> u64 {
        self.store.last_seq()
    }

    pub fn set_fault(&mut self, fault: FaultPoint) {
        self.fault = fault;
    }

    fn commit(&mut self, event: Event) -> Result<()> {
        if self.halted {
            return Err(ServiceError::Crashed);
        }
        self.store.append(&event)?;
        if self.fault == FaultPoint::AfterAppend {
            self.fault = FaultPoint::None;
            self.halted = true;
            return Err(ServiceError::Crashed);
        }
        self.state.apply(&event).map_err(ServiceError::Corrupt)?;
        if self.store.wants_snapshot() {
            self.store.snapshot(&self.state)?;
        }
        Ok(())
    }

    fn live_session(&self, session_id: &str) -> Result<&Session> {
        if self.halted {
            return Err(ServiceError::Crashed);
        }
        self.state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::SessionNotFound(session_id.to_string()))
    }

    pub fn create_session(&mut self, demographics: Demographics) -> Result<Session> {
        demographics.validate().map_err(ServiceError::Validation)?;
        let n = self.state.sessions.len() as u64;
        let tag = indexed_substream(self.config.seed, "session-id", n).next_u32();
        let session_id = format!("s{:05}-{tag:08x}", n + 1);
        self.commit(Event::SessionCreated {
            session_id: session_id.clone(),
            demographics,
            at_ms: self.clock.now_ms(),
        })?;
        Ok(self.state.sessions[&session_id].clone())
    }

    /// Serves the session's next pair. While a served pair is unanswered the
    /// same pair is returned again, so retried requests do not burn pairs.
    pub fn next_pair(&mut self, session_id: &str) -> Result<PairAssignment> {
        let session = self.live_session(session_id)?;
        match session.state {
            SessionState::Active => {}
            SessionState::Complete => return Err(ServiceError::NoMorePairs(session_id.into())),
            SessionState::Abandoned => return Err(ServiceError::SessionClosed(session_id.into())),
        }
        if let Some(open) = self.state.open_pairs(session_id).next() {
            return Ok(open.clone());
        }
        if session.pairs_served >= self.config.pairs_per_session {
            return Err(ServiceError::NoMorePairs(session_id.into()));
        }
        let index = session.pairs_served + 1;
        let mut rng = indexed_substream(self.config.seed, "schedule", self.state.decisions);
        let (left, right) = choose_pair(
            self.config.scheduler,
            &self.image_ids,
            |id| self.state.exposure_of(id),
            &session.seen_pairs,
            &mut rng,
        )
        .ok_or_else(|| ServiceError::Exhausted(session_id.into()))?;
        let pair = PairAssignment {
            pair_id: format!("{session_id}-{index:02}"),
            session_id: session_id.to_string(),
            left_image: left,
            right_image: right,
            served_at_ms: self.clock.now_ms(),
            index,
        };
        self.commit(Event::PairServed { pair: pair.clone() })?;
        Ok(pair)
    }

    pub fn record_choice(
        &mut self,
        session_id: &str,
        pair_id: &str,
        chosen: Side,
    ) -> Result<ComparisonRecord> {
        let session = self.live_session(session_id)?;
        let pair = self
            .state
            .pairs
            .get(pair_id)
            .filter(|p| p.session_id == session_id)
            .ok_or_else(|| ServiceError::PairNotFound(pair_id.to_string()))?;
        if let Some(existing) = self.state.choices.get(pair_id) {
            return Err(ServiceError::Conflict {
                pair_id: pair_id.to_string(),
                existing: Box::new(existing.clone()),
            });
        }
        if session.state == SessionState::Abandoned {
            return Err(ServiceError::SessionClosed(session_id.into()));
        }
        let record = ComparisonRecord {
            pair_id: pair.pair_id.clone(),
            left_image: pair.left_image.clone(),
            right_image: pair.right_image.clone(),
            chosen,
            session_id: session_id.to_string(),
            t_ms: self.clock.now_ms(),
        };
        let completes = session.pairs_answered + 1 >= self.config.pairs_per_session;
        self.commit(Event::ChoiceRecorded {
            record: record.clone(),
            completes,
        })?;
        Ok(record)
    }

    /// Appends a batch of gaze samples for one image. Timestamps must not go
    /// backwards within an image's log; steps back of at most
    /// [`MAX_CLAMPED_REGRESSION_MS`] are clamped forward.
    pub fn record_gaze_batch(
        &mut self,
        session_id: &str,
        image_id: &str,
        samples: &[GazeSampleIn],
    ) -> Result<usize> {
        let now = self.clock.now_ms();
        let session = self.live_session(session_id)?;
        let open = match session.state {
            SessionState::Active => true,
            SessionState::Complete => session
                .closed_at_ms
                .is_some_and(|t| now <= t.saturating_add(self.config.gaze_grace_ms)),
            SessionState::Abandoned => false,
        };
        if !open {
            return Err(ServiceError::SessionClosed(session_id.into()));
        }
        if samples.len() > self.config.gaze_batch_cap {
            return Err(ServiceError::TooLarge {
                size: samples.len(),
                cap: self.config.gaze_batch_cap,
            });
        }
        if !self.state.shown_to(session_id, image_id) {
            return Err(ServiceError::Validation(format!(
                "image `{image_id}` has not been shown to session `{session_id}`"
            )));
        }
        if samples.is_empty() {
            return Ok(0);
        }
        let mut last = self.state.last_gaze_t(session_id, image_id);
        let mut accepted = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let coords_ok = match (s.x_px, s.y_px) {
                (Some(x), Some(y)) => x.is_finite() && y.is_finite(),
                (None, None) => !s.valid,
                _ => false,
            };
            if !coords_ok {
                return Err(ServiceError::Validation(format!(
                    "sample {i}: a valid sample needs two finite coordinates"
                )));
            }
            let mut s = *s;
            if let Some(prev) = last {
                if s.t_ms < prev {
                    if prev - s.t_ms > MAX_CLAMPED_REGRESSION_MS {
                        return Err(ServiceError::Validation(format!(
                            "sample {i}: timestamp {} goes back {} ms",
                            s.t_ms,
                            prev - s.t_ms
                        )));
                    }
                    s.t_ms = prev;
                }
            }
            last = Some(s.t_ms);
            accepted.push(s);
        }
        let count = accepted.len();
        self.commit(Event::GazeAppended {
            session_id: session_id.to_string(),
            image_id: image_id.to_string(),
            samples: accepted,
            at_ms: now,
        })?;
        Ok(count)
    }

    /// Marks active sessions idle for longer than the configured TTL as
    /// abandoned and returns their ids.
    pub fn sweep_abandoned(&mut self) -> Result<Vec<String>> {
        let now = self.clock.now_ms();
        let ttl = self.config.abandon_after_ms;
        let idle: Vec<String> = self
            .state
            .sessions
            .values()
            .filter(|s| s.state == SessionState::Active && now.saturating_sub(s.last_activity_ms) > ttl)
            .map(|s| s.session_id.clone())
            .collect();
        for id in &idle {
            self.commit(Event::SessionAbandoned {
                session_id: id.clone(),
                at_ms: now,
            })?;
        }
        Ok(idle)
    }

    fn included(&self, session_id: &str, opts: ExportOptions) -> bool {
        opts.include_abandoned
            || self
                .state
                .sessions
                .get(session_id)
                .is_some_and(|s| s.state != SessionState::Abandoned)
    }

    /// Recorded choices in the order they were made.
    pub fn comparisons(&self, opts: ExportOptions) -> Vec<ComparisonRecord> {
        self.state
            .choice_order
            .iter()
            .map(|id| &self.state.choices[id])
            .filter(|r| self.included(&r.session_id, opts))
            .cloned()
            .collect()
    }

    /// Gaze samples grouped by session then image, each in arrival order.
    pub fn gaze_samples(&self, opts: ExportOptions) -> Vec<RawGazeSample> {
        self.state
            .gaze
            .iter()
            .filter(|(session, _)| self.included(session, opts))
            .flat_map(|(session, per_image)| {
                per_image.iter().flat_map(move |(image, samples)| {
                    samples.iter().map(move |s| s.to_raw(session, image))
                })
            })
            .collect()
    }

    pub fn session_summaries(&self) -> Vec<SessionSummary> {
        self.state.sessions.values().map(SessionSummary::from).collect()
    }

    pub fn exposure_stats(&self) -> ExposureStats {
        let counts: Vec<u64> = self.image_ids.iter().map(|id| self.state.exposure_of(id)).collect();
        ExposureStats {
            images: counts.len(),
            min: counts.iter().copied().min().unwrap_or(0),
            max: counts.iter().copied().max().unwrap_or(0),
            mean: counts.iter().sum::<u64>() as f64 / counts.len().max(1) as f64,
            target: self.config.exposure_target,
        }
    }

    /// Exposure per image in manifest order.
    pub fn exposure_table(&self) -> Vec<(String, u64)> {
        self.image_ids
            .iter()
            .map(|id| (id.clone(), self.state.exposure_of(id)))
            .collect()
    }

    /// Writes the comparison log, gaze log and session manifest into `dest`.
    /// Each file is written under a temporary name and renamed into place, so
    /// readers never see a partial file.
    pub fn export_logs(&self, dest: &Path, opts: ExportOptions) -> Result<ExportSummary> {
        fs::create_dir_all(dest)?;
        let comparisons = self.comparisons(opts);
        let gaze = self.gaze_samples(opts);
        let sessions = self.session_summaries();
        let files = vec![
            write_atomically(&dest.join(COMPARISONS_FILE), |w| {
                write_comparison_log(w, &comparisons)
            })?,
            write_atomically(&dest.join(GAZE_FILE), |w| write_gaze_log(w, &gaze))?,
            write_atomically(&dest.join(SESSIONS_FILE), |w| write_session_log(w, &sessions))?,
        ];
        Ok(ExportSummary {
            files,
            comparisons: comparisons.len(),
            gaze_samples: gaze.len(),
            sessions: sessions.len(),
        })
    }
}

fn write_atomically(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<PathBuf> {
    let tmp = path.with_extension("jsonl.tmp");
    let file = File::create(&tmp)?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush()?;
    w.get_ref().sync_all()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(path.to_path_buf())
}

pub fn write_session_log<W: Write>(mut w: W, sessions: &[SessionSummary]) -> std::io::Result<()> {
    jsonl::write_header(&mut w, SESSION_LOG_SCHEMA)?;
    for s in sessions {
        jsonl::write_record(&mut w, s)?;
    }
    Ok(())
}

pub fn parse_session_log(path: &Path, mode: ParseMode) -> Result<Parsed<SessionSummary>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(jsonl::read_records(reader, SESSION_LOG_SCHEMA, mode, Ok)?)
}
