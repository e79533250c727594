//! Real-vs-simulated reader study: sessions, append-only response logs and
//! per-rater / consensus statistics.
//!
//! On disk a session is a directory holding `header.json` (immutable),
//! `responses.jsonl` (one event per line, appended and synced before
//! acknowledgment) and `items/<item_id>.pgm`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_pgm16, write_pgm16, ScanSlice};
use crate::error::Error;
use crate::evalkit::binomial_p;

pub const DEFAULT_ITEMS_PER_CLASS: usize = 15;
const HEADER_FILE: &str = "header.json";
const LOG_FILE: &str = "responses.jsonl";
const ITEMS_DIR: &str = "items";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("session {0} is finalized")]
    Finalized(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("incomplete: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Storage(#[from] Error),
}

impl StudyError {
    /// Stable machine-readable code for error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            StudyError::NotFound(_) => "not_found",
            StudyError::Conflict(_) => "conflict",
            StudyError::Finalized(_) => "finalized",
            StudyError::Invalid(_) => "invalid",
            StudyError::Incomplete(_) => "incomplete",
            StudyError::Storage(_) => "storage",
        }
    }
}

pub type StudyResult<T> = std::result::Result<T, StudyError>;

/// Ground truth of an item, and a rater's answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Real,
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyItem {
    pub item_id: String,
    pub truth: Truth,
    pub source_slice_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyHeader {
    pub session_id: String,
    pub seed: u64,
    pub items: Vec<StudyItem>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub rater_id: String,
    pub item_id: String,
    pub choice: Truth,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEvent {
    Response(Response),
    Finalized { timestamp: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Open,
    Finalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudySession {
    pub header: StudyHeader,
    pub responses: Vec<Response>,
    pub status: Status,
}

/// Rater-facing view of an item; carries no truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterItem {
    pub item_id: String,
    pub image_url: String,
    pub answered: usize,
    pub total: usize,
}

impl StudySession {
    pub fn item(&self, item_id: &str) -> Option<&StudyItem> {
        self.header.items.iter().find(|i| i.item_id == item_id)
    }

    /// Rater ids in order of first response.
    pub fn raters(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.responses {
            if !out.contains(&r.rater_id) {
                out.push(r.rater_id.clone());
            }
        }
        out
    }

    pub fn answered_by(&self, rater_id: &str) -> usize {
        self.responses.iter().filter(|r| r.rater_id == rater_id).count()
    }

    /// First item in study order the rater has not answered.
    pub fn next_for(&self, rater_id: &str) -> Option<&StudyItem> {
        self.header
            .items
            .iter()
            .find(|i| !self.responses.iter().any(|r| r.rater_id == rater_id && r.item_id == i.item_id))
    }

    pub fn truths(&self) -> Vec<(String, Truth)> {
        self.header.items.iter().map(|i| (i.item_id.clone(), i.truth)).collect()
    }
}

// ---------------------------------------------------------------- statistics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterStats {
    pub rater_id: String,
    pub answered: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemVote {
    pub item_id: String,
    pub truth: Truth,
    pub real_votes: usize,
    pub simulated_votes: usize,
    /// `None` on a tie.
    pub majority: Option<Truth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyStats {
    pub raters: Vec<RaterStats>,
    pub consensus: Option<ConsensusStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
    pub items: Vec<ItemVote>,
    pub complete: bool,
}

/// Scores `responses` against `truths` (item id, truth) in item order.
/// Without `allow_partial`, every rater must have answered every item.
/// Consensus is the per-item majority and needs an odd number of raters.
pub fn compute_stats(truths: &[(String, Truth)], responses: &[Response], allow_partial: bool) -> StudyResult<StudyStats> {
    let truth_of: BTreeMap<&str, Truth> = truths.iter().map(|(id, t)| (id.as_str(), *t)).collect();
    let mut order: Vec<&str> = Vec::new();
    let mut answers: BTreeMap<&str, BTreeMap<&str, Truth>> = BTreeMap::new();
    for r in responses {
        if !truth_of.contains_key(r.item_id.as_str()) {
            return Err(StudyError::NotFound(format!("item {}", r.item_id)));
        }
        if !order.contains(&r.rater_id.as_str()) {
            order.push(&r.rater_id);
        }
        if answers.entry(&r.rater_id).or_default().insert(&r.item_id, r.choice).is_some() {
            return Err(StudyError::Conflict(format!("{} answered {} twice", r.rater_id, r.item_id)));
        }
    }
    let complete = order.iter().all(|r| answers[r].len() == truths.len());
    if !complete && !allow_partial {
        return Err(StudyError::Incomplete("not every rater has answered every item".into()));
    }
    let raters = order
        .iter()
        .map(|&r| {
            let a = &answers[r];
            let correct = a.iter().filter(|(item, c)| truth_of[*item] == **c).count();
            RaterStats {
                rater_id: r.to_string(),
                answered: a.len(),
                correct,
                accuracy: correct as f64 / a.len() as f64,
                p_value: binomial_p(correct as u64, a.len() as u64),
            }
        })
        .collect();
    let items: Vec<ItemVote> = truths
        .iter()
        .map(|(id, t)| {
            let votes = order.iter().filter_map(|r| answers[r].get(id.as_str()));
            let real_votes = votes.clone().filter(|&&c| c == Truth::Real).count();
            let simulated_votes = votes.count() - real_votes;
            let majority = match real_votes.cmp(&simulated_votes) {
                std::cmp::Ordering::Greater => Some(Truth::Real),
                std::cmp::Ordering::Less => Some(Truth::Simulated),
                std::cmp::Ordering::Equal => None,
            };
            ItemVote { item_id: id.clone(), truth: *t, real_votes, simulated_votes, majority }
        })
        .collect();
    let (consensus, notice) = if order.is_empty() {
        (None, Some("no responses yet".to_string()))
    } else if order.len() % 2 == 0 {
        (None, Some(format!("consensus omitted: {} raters is an even count", order.len())))
    } else if !complete {
        (None, Some("consensus omitted: responses are incomplete".to_string()))
    } else {
        let correct = items.iter().filter(|v| v.majority == Some(v.truth)).count();
        let total = items.len();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        (Some(ConsensusStats { correct, total, accuracy, p_value: binomial_p(correct as u64, total as u64) }), None)
    };
    Ok(StudyStats { raters, consensus, notice, items, complete })
}

// ---------------------------------------------------------------- display

/// 8-bit display rendering: linear window from the 1st to the 99th
/// percentile (nearest rank) of the slice, clamped.
pub fn window_to_u8(image: &[u16]) -> Vec<u8> {
    let mut sorted = image.to_vec();
    sorted.sort_unstable();
    let lo = crate::dataset::nearest_rank(&sorted, 0.01).unwrap_or(0) as f64;
    let hi = crate::dataset::nearest_rank(&sorted, 0.99).unwrap_or(0) as f64;
    image
        .iter()
        .map(|&v| if hi > lo { ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

// ---------------------------------------------------------------- storage

fn now_millis() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |e| StudyError::Storage(Error::Io { path: path.to_path_buf(), source: e })
}

/// File-backed study sessions under one root directory. Not synchronized;
/// callers serialize writes.
#[derive(Debug)]
pub struct StudyStore {
    root: PathBuf,
    cache: BTreeMap<String, StudySession>,
}

impl StudyStore {
    pub fn open(root: impl Into<PathBuf>) -> StudyResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(Self { root, cache: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, session_id: &str) -> PathBuf {
        self.root.join(session_id)
    }

    pub fn item_image_path(&self, item_id: &str) -> StudyResult<PathBuf> {
        let (session, _) = item_id.rsplit_once("-i").ok_or_else(|| StudyError::NotFound(format!("item {item_id}")))?;
        check_id(session)?;
        Ok(self.dir(session).join(ITEMS_DIR).join(format!("{item_id}.pgm")))
    }

    /// Draws `n_each` slices from each pool and stores them in seeded-random order.
    pub fn create_study(
        &mut self,
        session_id: &str,
        real_pool: &[ScanSlice],
        simulated_pool: &[ScanSlice],
        n_each: usize,
        seed: u64,
    ) -> StudyResult<StudySession> {
        check_id(session_id)?;
        if n_each == 0 {
            return Err(StudyError::Invalid("a study needs at least one item per class".into()));
        }
        for (name, pool) in [("real", real_pool), ("simulated", simulated_pool)] {
            if pool.len() < n_each {
                return Err(StudyError::Invalid(format!("{name} pool has {} slices, need {n_each}", pool.len())));
            }
        }
        let dir = self.dir(session_id);
        if dir.join(HEADER_FILE).exists() {
            return Err(StudyError::Conflict(format!("session {session_id} already exists")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<(&ScanSlice, Truth)> = real_pool
            .choose_multiple(&mut rng, n_each)
            .map(|s| (s, Truth::Real))
            .chain(simulated_pool.choose_multiple(&mut rng, n_each).map(|s| (s, Truth::Simulated)))
            .collect();
        picks.shuffle(&mut rng);
        let items_dir = dir.join(ITEMS_DIR);
        fs::create_dir_all(&items_dir).map_err(io(&items_dir))?;
        let mut items = Vec::with_capacity(picks.len());
        for (idx, (slice, truth)) in picks.into_iter().enumerate() {
            let item_id = format!("{session_id}-i{idx:02}");
            write_pgm16(&items_dir.join(format!("{item_id}.pgm")), slice.size(), &slice.image)?;
            items.push(StudyItem { item_id, truth, source_slice_id: slice.slice_id.clone() });
        }
        let header = StudyHeader { session_id: session_id.to_string(), seed, items };
        let path = dir.join(HEADER_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&header).expect("header serializes")).map_err(io(&path))?;
        let log = dir.join(LOG_FILE);
        fs::write(&log, b"").map_err(io(&log))?;
        let session = StudySession { header, responses: Vec::new(), status: Status::Open };
        self.cache.insert(session_id.to_string(), session.clone());
        Ok(session)
    }

    /// Loads from disk on first access, replaying the response log.
    pub fn session(&mut self, session_id: &str) -> StudyResult<&StudySession> {
        check_id(session_id)?;
        if !self.cache.contains_key(session_id) {
            let s = self.load(session_id)?;
            self.cache.insert(session_id.to_string(), s);
        }
        Ok(&self.cache[session_id])
    }

    fn load(&self, session_id: &str) -> StudyResult<StudySession> {
        let dir = self.dir(session_id);
        let path = dir.join(HEADER_FILE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StudyError::NotFound(format!("session {session_id}")),
            _ => io(&path)(e),
        })?;
        let header: StudyHeader = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.clone(), source })?;
        let log = dir.join(LOG_FILE);
        let text = fs::read_to_string(&log).map_err(io(&log))?;
        let mut session = StudySession { header, responses: Vec::new(), status: Status::Open };
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                match serde_json::from_str(trimmed) {
                    Ok(LogEvent::Response(r)) => session.responses.push(r),
                    Ok(LogEvent::Finalized { .. }) => session.status = Status::Finalized,
                    // A torn final line from a crash mid-append is ignored.
                    Err(_) if offset + line.len() == text.len() && !line.ends_with('\n') => {}
                    Err(e) => return Err(Error::parse(&log, offset, e.to_string()).into()),
                }
            }
            offset += line.len();
        }
        Ok(session)
    }

    fn append(&self, session_id: &str, event: &LogEvent) -> StudyResult<()> {
        let path = self.dir(session_id).join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
        let mut line = serde_json::to_vec(event).expect("event serializes");
        line.push(b'\n');
        f.write_all(&line).map_err(io(&path))?;
        f.sync_data().map_err(io(&path))
    }

    pub fn next_item(&mut self, session_id: &str, rater_id: &str) -> StudyResult<Option<RaterItem>> {
        check_rater(rater_id)?;
        let s = self.session(session_id)?;
        let answered = s.answered_by(rater_id);
        let total = s.header.items.len();
        Ok(s.next_for(rater_id).map(|i| RaterItem {
            item_id: i.item_id.clone(),
            image_url: format!("/items/{}/image.png", i.item_id),
            answered,
            total,
        }))
    }

    /// Appends the response durably, then acknowledges it.
    pub fn record_response(&mut self, session_id: &str, rater_id: &str, item_id: &str, choice: Truth) -> StudyResult<Response> {
        check_rater(rater_id)?;
        let s = self.session(session_id)?;
        if s.status == Status::Finalized {
            return Err(StudyError::Finalized(session_id.to_string()));
        }
        if s.item(item_id).is_none() {
            return Err(StudyError::NotFound(format!("item {item_id} in session {session_id}")));
        }
        if s.responses.iter().any(|r| r.rater_id == rater_id && r.item_id == item_id) {
            return Err(StudyError::Conflict(format!("{rater_id} already answered {item_id}")));
        }
        let response = Response { rater_id: rater_id.to_string(), item_id: item_id.to_string(), choice, timestamp: now_millis() };
        self.append(session_id, &LogEvent::Response(response.clone()))?;
        self.cache.get_mut(session_id).expect("loaded above").responses.push(response.clone());
        Ok(response)
    }

    /// Closes the session to further responses.
    pub fn finalize(&mut self, session_id: &str) -> StudyResult<()> {
        if self.session(session_id)?.status == Status::Finalized {
            return Ok(());
        }
        self.append(session_id, &LogEvent::Finalized { timestamp: now_millis() })?;
        self.cache.get_mut(session_id).expect("loaded above").status = Status::Finalized;
        Ok(())
    }

    pub fn stats(&mut self, session_id: &str, allow_partial: bool) -> StudyResult<StudyStats> {
        let s = self.session(session_id)?;
        compute_stats(&s.truths(), &s.responses, allow_partial)
    }

    /// Stats recomputed from a fresh read of the files, bypassing the cache.
    pub fn stats_from_log(&self, session_id: &str, allow_partial: bool) -> StudyResult<StudyStats> {
        check_id(session_id)?;
        let s = self.load(session_id)?;
        compute_stats(&s.truths(), &s.responses, allow_partial)
    }

    pub fn item_image(&self, item_id: &str) -> StudyResult<(usize, Vec<u16>)> {
        let path = self.item_image_path(item_id)?;
        if !path.exists() {
            return Err(StudyError::NotFound(format!("item {item_id}")));
        }
        Ok(read_pgm16(&path)?)
    }
}

/// Session ids become directory names.
fn check_id(id: &str) -> StudyResult<()> {
    if id.is_empty() || id.len() > 64 || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(StudyError::Invalid(format!("bad session id '{id}'")));
    }
    Ok(())
}

fn check_rater(id: &str) -> StudyResult<()> {
    if id.trim().is_empty() || id.len() > 128 {
        return Err(StudyError::Invalid("rater id must be 1 to 128 characters".into()));
    }
    Ok(())
}
