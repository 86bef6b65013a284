//! Append-only JSONL episode store and training-data export.
//!
//! Each store line is `{schema_version, episode_id, sha256, record}` where
//! `sha256` covers the compact JSON of `record`; a truncated or edited line
//! is reported on load. Exports are JSONL of [`TrainingExample`].

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dialogue::{EpisodeMode, EpisodeRecord, Role};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode {0:?} already stored")]
    Duplicate(String),
    #[error("episode {0:?} has not terminated")]
    NotTerminated(String),
    #[error("store line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("store line {line} has schema version {found}, expected {SCHEMA_VERSION}")]
    Schema { line: usize, found: u32 },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreLine {
    schema_version: u32,
    episode_id: String,
    sha256: String,
    record: EpisodeRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredEpisode {
    pub id: String,
    pub record: EpisodeRecord,
}

/// Stable identifier: problem id, mode and episode seed.
pub fn episode_id(record: &EpisodeRecord) -> String {
    format!(
        "{}#{}#{:016x}",
        record.problem_id,
        record.mode.slug(),
        record.seed
    )
}

fn digest(record: &EpisodeRecord) -> Result<String, serde_json::Error> {
    let json = serde_json::to_string(record)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

/// Single-writer handle on a store file.
#[derive(Debug)]
pub struct TrajectoryStore {
    path: PathBuf,
    ids: HashSet<String>,
    writer: BufWriter<File>,
}

impl TrajectoryStore {
    /// Opens or creates the store, validating every existing line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let existing = if path.exists() {
            load_episodes(&path)?
        } else {
            Vec::new()
        };
        let ids = existing.into_iter().map(|e| e.id).collect();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            ids,
            writer: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn record(&mut self, episode: &EpisodeRecord) -> Result<String, StoreError> {
        let id = episode_id(episode);
        if !episode.is_terminated() {
            return Err(StoreError::NotTerminated(id));
        }
        if self.ids.contains(&id) {
            return Err(StoreError::Duplicate(id));
        }
        let line = StoreLine {
            schema_version: SCHEMA_VERSION,
            episode_id: id.clone(),
            sha256: digest(episode)?,
            record: episode.clone(),
        };
        serde_json::to_writer(&mut self.writer, &line)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.writer.get_ref().sync_data()?;
        self.ids.insert(id.clone());
        Ok(id)
    }

    pub fn load(&self) -> Result<Vec<StoredEpisode>, StoreError> {
        load_episodes(&self.path)
    }
}

pub fn load_episodes(path: &Path) -> Result<Vec<StoredEpisode>, StoreError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let corrupt = |reason: String| StoreError::Corrupt {
            line: line_no,
            reason,
        };
        let Some(content) = buf.strip_suffix('\n') else {
            return Err(corrupt("missing line terminator (partial write)".into()));
        };
        if content.trim().is_empty() {
            continue;
        }
        let line: StoreLine = serde_json::from_str(content).map_err(|e| corrupt(e.to_string()))?;
        if line.schema_version != SCHEMA_VERSION {
            return Err(StoreError::Schema {
                line: line_no,
                found: line.schema_version,
            });
        }
        if digest(&line.record)? != line.sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        out.push(StoredEpisode {
            id: line.episode_id,
            record: line.record,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: Vec<ContextTurn>,
    pub target: String,
    pub target_role: Role,
    pub reward: f64,
    pub episode_id: String,
    pub turn_index: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportFilter {
    pub mode: Option<EpisodeMode>,
    pub solved_only: bool,
}

impl ExportFilter {
    pub fn accepts(&self, record: &EpisodeRecord) -> bool {
        self.mode.is_none_or(|m| m == record.mode) && (!self.solved_only || record.reward == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportView {
    Student,
    Worldmodel,
}

fn examples_for(
    episode: &StoredEpisode,
    include_teacher: bool,
) -> impl Iterator<Item = TrainingExample> + '_ {
    let rec = &episode.record;
    rec.utterances.iter().enumerate().filter_map(move |(i, u)| {
        let wanted = match u.role {
            Role::Student => true,
            Role::Teacher => include_teacher && u.turn_index > 0,
        };
        wanted.then(|| TrainingExample {
            context: rec.utterances[..i]
                .iter()
                .map(|p| ContextTurn {
                    role: p.role,
                    text: p.text.clone(),
                })
                .collect(),
            target: u.text.clone(),
            target_role: u.role,
            reward: f64::from(rec.reward),
            episode_id: episode.id.clone(),
            turn_index: u.turn_index,
        })
    })
}

/// One example per student turn, each carrying the episode's terminal reward.
pub fn student_view(episodes: &[StoredEpisode], filter: &ExportFilter) -> Vec<TrainingExample> {
    episodes
        .iter()
        .filter(|e| filter.accepts(&e.record))
        .flat_map(|e| examples_for(e, false))
        .collect()
}

/// Student-view examples plus one example per feedback turn, whose context
/// is the public history only.
pub fn worldmodel_view(episodes: &[StoredEpisode], filter: &ExportFilter) -> Vec<TrainingExample> {
    episodes
        .iter()
        .filter(|e| filter.accepts(&e.record))
        .flat_map(|e| examples_for(e, true))
        .collect()
}

pub fn export_view(
    episodes: &[StoredEpisode],
    view: ExportView,
    filter: &ExportFilter,
) -> Vec<TrainingExample> {
    match view {
        ExportView::Student => student_view(episodes, filter),
        ExportView::Worldmodel => worldmodel_view(episodes, filter),
    }
}

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
