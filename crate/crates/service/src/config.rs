use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use streetgaze_core::Stratum;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    /// Least-exposed images first, seeded random choice among ties.
    #[default]
    Balanced,
    /// Two images drawn uniformly at random.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyImage {
    pub image_id: String,
    pub stratum: Stratum,
    /// File name under the image directory; defaults to `<image_id>.jpg`.
    pub file: String,
}

/// Everything the scheduler and validators need to know about a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub images: Vec<StudyImage>,
    pub pairs_per_session: u32,
    /// Mean comparisons per image the study aims for, if any.
    pub exposure_target: Option<f64>,
    pub seed: u64,
    pub scheduler: SchedulerPolicy,
    pub gaze_batch_cap: usize,
    pub abandon_after_ms: u64,
    pub gaze_grace_ms: u64,
}

impl StudyConfig {
    pub fn new(images: Vec<StudyImage>, seed: u64) -> Result<Self> {
        Self {
            images,
            pairs_per_session: 10,
            exposure_target: None,
            seed,
            scheduler: SchedulerPolicy::Balanced,
            gaze_batch_cap: 10_000,
            abandon_after_ms: 60 * 60 * 1000,
            gaze_grace_ms: 5 * 60 * 1000,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.images.len() < 2 {
            return Err(ServiceError::Config(format!(
                "the image manifest needs at least 2 images, found {}",
                self.images.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if img.image_id.is_empty() || img.image_id.contains(['/', '\\']) {
                return Err(ServiceError::Config(format!("invalid image id `{}`", img.image_id)));
            }
            if !ids.insert(img.image_id.as_str()) {
                return Err(ServiceError::Config(format!("duplicate image id `{}`", img.image_id)));
            }
        }
        if self.pairs_per_session == 0 {
            return Err(ServiceError::Config("pairs_per_session must be at least 1".into()));
        }
        if self.gaze_batch_cap == 0 {
            return Err(ServiceError::Config("gaze_batch_cap must be at least 1".into()));
        }
        if let Some(t) = self.exposure_target {
            if !(t.is_finite() && t > 0.0) {
                return Err(ServiceError::Config("exposure_target must be positive".into()));
            }
        }
        Ok(self)
    }

    pub fn image(&self, image_id: &str) -> Option<&StudyImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Builds a config from an `image_id,stratum` list.
    pub fn from_ids(ids: impl IntoIterator<Item = (String, Stratum)>, seed: u64) -> Result<Self> {
        let images = ids
            .into_iter()
            .map(|(image_id, stratum)| StudyImage {
                file: format!("{image_id}.jpg"),
                image_id,
                stratum,
            })
            .collect();
        Self::new(images, seed)
    }
}

fn parse_stratum(s: &str) -> Option<Stratum> {
    match s {
        "high" => Some(Stratum::High),
        "medium" => Some(Stratum::Medium),
        "low" => Some(Stratum::Low),
        _ => None,
    }
}

/// Parses the image manifest: a CSV with header `image_id,stratum` and an
/// optional third `file` column.
pub fn parse_image_manifest(text: &str) -> Result<Vec<StudyImage>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let has_file = match lines.next() {
        Some((_, h)) if h.trim() == "image_id,stratum" => false,
        Some((_, h)) if h.trim() == "image_id,stratum,file" => true,
        Some((n, h)) => {
            return Err(ServiceError::Config(format!(
                "manifest line {}: unexpected header `{}`",
                n + 1,
                h.trim()
            )))
        }
        None => return Err(ServiceError::Config("manifest is empty".into())),
    };
    lines
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| ServiceError::Config(format!("manifest line {}: {what}", n + 1));
            let expected = if has_file { 3 } else { 2 };
            if fields.len() != expected && !(has_file && fields.len() == 2) {
                return Err(bad("wrong number of fields"));
            }
            let stratum = parse_stratum(fields[1]).ok_or_else(|| bad("unknown stratum"))?;
            let file = match fields.get(2) {
                Some(f) if !f.is_empty() => f.to_string(),
                _ => format!("{}.jpg", fields[0]),
            };
            Ok(StudyImage {
                image_id: fields[0].to_string(),
                stratum,
                file,
            })
        })
        .collect()
}

/// Server settings as read from the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub manifest: PathBuf,
    pub image_dir: PathBuf,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub export_dir: Option<PathBuf>,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pairs")]
    pub pairs_per_session: u32,
    #[serde(default)]
    pub exposure_target: Option<f64>,
    pub admin_token: String,
    #[serde(default)]
    pub scheduler: SchedulerPolicy,
    #[serde(default = "default_cap")]
    pub gaze_batch_cap: usize,
    #[serde(default = "default_abandon")]
    pub abandon_after_s: u64,
    #[serde(default = "default_grace")]
    pub gaze_grace_s: u64,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: u64,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}
fn default_port() -> u16 {
    8080
}
fn default_pairs() -> u32 {
    10
}
fn default_cap() -> usize {
    10_000
}
fn default_abandon() -> u64 {
    3600
}
fn default_grace() -> u64 {
    300
}
fn default_snapshot() -> u64 {
    500
}

/// Environment variables that override file settings.
pub const ENV_PORT: &str = "STREETGAZE_PORT";
pub const ENV_MANIFEST: &str = "STREETGAZE_MANIFEST";
pub const ENV_SEED: &str = "STREETGAZE_SEED";
pub const ENV_PAIRS: &str = "STREETGAZE_PAIRS_PER_SESSION";
pub const ENV_ADMIN_TOKEN: &str = "STREETGAZE_ADMIN_TOKEN";

impl ServerConfig {
    /// Reads `path` and applies overrides from the process environment.
    /// Relative paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, |k| std::env::var(k).ok())
    }

    pub fn from_toml(
        text: &str,
        base: &Path,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let mut cfg: ServerConfig =
            toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        fn parse<T: FromStr>(key: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| ServiceError::Config(format!("{key}=`{v}` is not valid")))
        }
        if let Some(v) = env(ENV_PORT) {
            cfg.port = parse(ENV_PORT, v)?;
        }
        if let Some(v) = env(ENV_MANIFEST) {
            cfg.manifest = PathBuf::from(v);
        }
        if let Some(v) = env(ENV_SEED) {
            cfg.seed = parse(ENV_SEED, v)?;
        }
        if let Some(v) = env(ENV_PAIRS) {
            cfg.pairs_per_session = parse(ENV_PAIRS, v)?;
        }
        if let Some(v) = env(ENV_ADMIN_TOKEN) {
            cfg.admin_token = v;
        }
        if cfg.admin_token.len() < 8 {
            return Err(ServiceError::Config("admin_token must be at least 8 characters".into()));
        }
        if cfg.snapshot_every == 0 {
            return Err(ServiceError::Config("snapshot_every must be at least 1".into()));
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.image_dir);
        resolve(&mut cfg.data_dir);
        if let Some(p) = cfg.export_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.static_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn study_config(&self) -> Result<StudyConfig> {
        let text = std::fs::read_to_string(&self.manifest).map_err(|e| {
            ServiceError::Config(format!("cannot read manifest {}: {e}", self.manifest.display()))
        })?;
        StudyConfig {
            images: parse_image_manifest(&text)?,
            pairs_per_session: self.pairs_per_session,
            exposure_target: self.exposure_target,
            seed: self.seed,
            scheduler: self.scheduler,
            gaze_batch_cap: self.gaze_batch_cap,
            abandon_after_ms: self.abandon_after_s * 1000,
            gaze_grace_ms: self.gaze_grace_s * 1000,
        }
        .validated()
    }

    pub fn export_dir(&self) -> PathBuf {
        self.export_dir
            .clone()
            .unwrap_or_else(|| self.data_dir.join("exports"))
    }
}
