//! Input corpora: interaction events, job postings, content embeddings and
//! user records.
//!
//! Every parser is line-oriented and recoverable: a malformed line is
//! reported with its line number and the remaining lines are still parsed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::JobCatalog;

pub const EVENTS_HEADER: [&str; 5] = ["user_id", "job_id", "kind", "timestamp", "query_id"];
pub const JOBS_HEADER: [&str; 7] = [
    "job_id",
    "title",
    "category",
    "lat",
    "lon",
    "posted_at",
    "status",
];
pub const USERS_HEADER: [&str; 5] = ["user_id", "resume_category", "lat", "lon", "registered"];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A single rejected input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Records recovered from a stream together with the lines that failed.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Parsed {
            records: Vec::new(),
            errors: Vec::new(),
        }
    }
}

impl<T> Parsed<T> {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Layout of an events stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordFormat {
    /// Comma-separated `user_id,job_id,kind,timestamp,query_id`.
    #[default]
    Csv,
    /// One JSON object per line with the same field names.
    JsonLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Apply,
    Click,
    EmailOpenNoClick,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Apply => "apply",
            EventKind::Click => "click",
            EventKind::EmailOpenNoClick => "email_open_no_click",
        }
    }

    /// Applies and clicks; ignored emails carry no positive interest.
    pub fn is_engagement(self) -> bool {
        matches!(self, EventKind::Apply | EventKind::Click)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "apply" => Ok(EventKind::Apply),
            "click" => Ok(EventKind::Click),
            "email_open_no_click" => Ok(EventKind::EmailOpenNoClick),
            other => Err(format!("unknown event kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub job_id: String,
    pub kind: EventKind,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    const EARTH_RADIUS_KM: f64 = 6371.0088;

    /// Great-circle distance (haversine).
    pub fn distance_km(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * Self::EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Active,
    Expired,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Active => "active",
            JobStatus::Expired => "expired",
        }
    }
}

impl FromStr for JobStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(JobStatus::Active),
            "expired" => Ok(JobStatus::Expired),
            other => Err(format!("unknown job status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub title: String,
    pub category: String,
    pub location: Option<GeoPoint>,
    pub posted_at: DateTime<Utc>,
    pub status: JobStatus,
}

impl JobRecord {
    pub fn is_active(&self) -> bool {
        self.status == JobStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub job_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub resume_category: Option<String>,
    pub location: Option<GeoPoint>,
    pub registered: bool,
}

/// Closed set of fine-grained job categories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Taxonomy(BTreeSet<String>);

impl Taxonomy {
    pub fn new<I, S>(categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Taxonomy(categories.into_iter().map(Into::into).collect())
    }

    pub fn from_jobs(jobs: &[JobRecord]) -> Self {
        Taxonomy::new(jobs.iter().map(|j| j.category.clone()))
    }

    pub fn contains(&self, category: &str) -> bool {
        self.0.contains(category)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader)
}

/// Drives a header-tolerant CSV parse, mapping each record through `f`.
fn parse_csv<R, T, F>(reader: R, header: &[&str], mut f: F) -> Parsed<T>
where
    R: Read,
    F: FnMut(&csv::StringRecord) -> Result<T, String>,
{
    let mut out = Parsed::default();
    let mut first = true;
    for (i, rec) in csv_reader(reader).records().enumerate() {
        match rec {
            Ok(rec) => {
                let line = rec.position().map_or(i as u64 + 1, |p| p.line());
                if first && rec.iter().eq(header.iter().copied()) {
                    first = false;
                    continue;
                }
                first = false;
                if rec.len() == 1 && rec[0].trim().is_empty() {
                    continue;
                }
                if rec.len() != header.len() {
                    out.errors.push(LineError {
                        line,
                        message: format!("expected {} fields, found {}", header.len(), rec.len()),
                    });
                    continue;
                }
                match f(&rec) {
                    Ok(v) => out.records.push(v),
                    Err(message) => out.errors.push(LineError { line, message }),
                }
            }
            Err(e) => {
                first = false;
                let line = e.position().map_or(i as u64 + 1, |p| p.line());
                out.errors.push(LineError {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    out
}

fn non_empty(field: &str, name: &str) -> Result<String, String> {
    let v = field.trim();
    if v.is_empty() {
        Err(format!("{name} is empty"))
    } else {
        Ok(v.to_string())
    }
}

fn optional(field: &str) -> Option<String> {
    let v = field.trim();
    (!v.is_empty()).then(|| v.to_string())
}

fn parse_location(lat: &str, lon: &str) -> Result<Option<GeoPoint>, String> {
    match (lat.trim(), lon.trim()) {
        ("", "") => Ok(None),
        ("", _) | (_, "") => {
            Err("latitude and longitude must both be present or both empty".into())
        }
        (a, b) => {
            let lat: f64 = a.parse().map_err(|_| format!("bad latitude {a:?}"))?;
            let lon: f64 = b.parse().map_err(|_| format!("bad longitude {b:?}"))?;
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(format!("coordinates out of range ({lat}, {lon})"));
            }
            Ok(Some(GeoPoint { lat, lon }))
        }
    }
}

fn event_from_fields(
    user_id: &str,
    job_id: &str,
    kind: &str,
    timestamp: &str,
    query_id: Option<&str>,
) -> Result<InteractionEvent, String> {
    Ok(InteractionEvent {
        user_id: non_empty(user_id, "user_id")?,
        job_id: non_empty(job_id, "job_id")?,
        kind: kind.trim().parse()?,
        timestamp: parse_timestamp(timestamp)?,
        query_id: query_id.and_then(optional),
    })
}

#[derive(Deserialize)]
struct EventWire {
    user_id: String,
    job_id: String,
    kind: String,
    timestamp: String,
    #[serde(default)]
    query_id: Option<String>,
}

/// Parses an events stream. Malformed lines are collected, not fatal.
pub fn parse_events<R: BufRead>(reader: R, format: RecordFormat) -> Parsed<InteractionEvent> {
    match format {
        RecordFormat::Csv => parse_csv(reader, &EVENTS_HEADER, |r| {
            event_from_fields(&r[0], &r[1], &r[2], &r[3], Some(&r[4]))
        }),
        RecordFormat::JsonLines => {
            let mut out = Parsed::default();
            for (i, line) in reader.lines().enumerate() {
                let line_no = i as u64 + 1;
                let parsed = line.map_err(|e| e.to_string()).and_then(|l| {
                    if l.trim().is_empty() {
                        return Ok(None);
                    }
                    let w: EventWire = serde_json::from_str(&l).map_err(|e| e.to_string())?;
                    event_from_fields(
                        &w.user_id,
                        &w.job_id,
                        &w.kind,
                        &w.timestamp,
                        w.query_id.as_deref(),
                    )
                    .map(Some)
                });
                match parsed {
                    Ok(Some(ev)) => out.records.push(ev),
                    Ok(None) => {}
                    Err(message) => out.errors.push(LineError {
                        line: line_no,
                        message,
                    }),
                }
            }
            out
        }
    }
}

pub fn write_events<W: Write>(
    writer: W,
    events: &[InteractionEvent],
    format: RecordFormat,
) -> Result<(), IngestError> {
    match format {
        RecordFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(EVENTS_HEADER)?;
            for ev in events {
                w.write_record([
                    ev.user_id.as_str(),
                    ev.job_id.as_str(),
                    ev.kind.as_str(),
                    &format_timestamp(&ev.timestamp),
                    ev.query_id.as_deref().unwrap_or(""),
                ])?;
            }
            w.flush()?;
        }
        RecordFormat::JsonLines => {
            let mut w = writer;
            for ev in events {
                let obj = serde_json::json!({
                    "user_id": ev.user_id,
                    "job_id": ev.job_id,
                    "kind": ev.kind.as_str(),
                    "timestamp": format_timestamp(&ev.timestamp),
                    "query_id": ev.query_id,
                });
                serde_json::to_writer(&mut w, &obj)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Parses the jobs corpus. With a taxonomy, out-of-taxonomy categories are
/// rejected per line.
pub fn parse_jobs<R: Read>(reader: R, taxonomy: Option<&Taxonomy>) -> Parsed<JobRecord> {
    parse_csv(reader, &JOBS_HEADER, |r| {
        let category = non_empty(&r[2], "category")?;
        if let Some(tax) = taxonomy {
            if !tax.contains(&category) {
                return Err(format!("category {category:?} not in taxonomy"));
            }
        }
        Ok(JobRecord {
            job_id: non_empty(&r[0], "job_id")?,
            title: r[1].trim().to_string(),
            category,
            location: parse_location(&r[3], &r[4])?,
            posted_at: parse_timestamp(&r[5])?,
            status: r[6].trim().parse()?,
        })
    })
}

pub fn write_jobs<W: Write>(writer: W, jobs: &[JobRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(JOBS_HEADER)?;
    for j in jobs {
        let (lat, lon) = fmt_location(j.location);
        w.write_record([
            j.job_id.as_str(),
            &j.title,
            &j.category,
            &lat,
            &lon,
            &format_timestamp(&j.posted_at),
            j.status.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_location(loc: Option<GeoPoint>) -> (String, String) {
    loc.map_or((String::new(), String::new()), |p| {
        (p.lat.to_string(), p.lon.to_string())
    })
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" | "" => Ok(false),
        other => Err(format!("bad boolean {other:?}")),
    }
}

pub fn parse_users<R: Read>(reader: R, taxonomy: Option<&Taxonomy>) -> Parsed<UserRecord> {
    parse_csv(reader, &USERS_HEADER, |r| {
        let resume_category = optional(&r[1]);
        if let (Some(tax), Some(cat)) = (taxonomy, resume_category.as_deref()) {
            if !tax.contains(cat) {
                return Err(format!("resume category {cat:?} not in taxonomy"));
            }
        }
        Ok(UserRecord {
            user_id: non_empty(&r[0], "user_id")?,
            resume_category,
            location: parse_location(&r[2], &r[3])?,
            registered: parse_bool(&r[4])?,
        })
    })
}

pub fn write_users<W: Write>(writer: W, users: &[UserRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(USERS_HEADER)?;
    for u in users {
        let (lat, lon) = fmt_location(u.location);
        w.write_record([
            u.user_id.as_str(),
            u.resume_category.as_deref().unwrap_or(""),
            &lat,
            &lon,
            if u.registered { "true" } else { "false" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `job_id c1 c2 ... cd` lines. The first valid line fixes `d`.
pub fn parse_embeddings<R: BufRead>(reader: R) -> Parsed<EmbeddingRecord> {
    let mut out = Parsed::default();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.errors.push(LineError {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let mut parts = line.split_whitespace();
        let Some(job_id) = parts.next() else { continue };
        let rec = parts
            .map(|t| t.parse::<f64>().map_err(|_| format!("bad component {t:?}")))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|vector| {
                if vector.is_empty() {
                    return Err("no components".to_string());
                }
                if vector.iter().any(|x| !x.is_finite()) {
                    return Err("non-finite component".to_string());
                }
                if vector.iter().all(|&x| x == 0.0) {
                    return Err("zero-norm vector".to_string());
                }
                match dim {
                    Some(d) if d != vector.len() => Err(format!(
                        "dimension {} differs from corpus dimension {d}",
                        vector.len()
                    )),
                    _ => Ok(vector),
                }
            });
        match rec {
            Ok(vector) => {
                dim.get_or_insert(vector.len());
                out.records.push(EmbeddingRecord {
                    job_id: job_id.to_string(),
                    vector,
                });
            }
            Err(message) => out.errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    out
}

pub fn write_embeddings<W: Write>(
    mut writer: W,
    table: &EmbeddingTable,
) -> Result<(), IngestError> {
    for (id, v) in table.iter() {
        write!(writer, "{id}")?;
        for x in v {
            write!(writer, " {x}")?;
        }
        writeln!(writer)?;
    }
    writer.flush()?;
    Ok(())
}

/// Validated job embeddings sharing one dimensionality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding for {job_id} has dimension {found}, expected {expected}")]
    Dimension {
        job_id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding for {0} has a non-finite component or zero norm")]
    Degenerate(String),
}

impl EmbeddingTable {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, EmbeddingError> {
        let mut table = EmbeddingTable::default();
        for r in records {
            table.insert(r.job_id, r.vector)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, job_id: String, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        if self.vectors.is_empty() {
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(EmbeddingError::Dimension {
                job_id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        let norm2: f64 = vector.iter().map(|x| x * x).sum();
        if vector.is_empty() || !norm2.is_finite() || norm2 <= 0.0 {
            return Err(EmbeddingError::Degenerate(job_id));
        }
        self.vectors.insert(job_id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, job_id: &str) -> Option<&[f64]> {
        self.vectors.get(job_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// True when `timestamp` is at most `window_days` old and not in the future
/// relative to `reference`.
pub fn in_window(timestamp: &DateTime<Utc>, reference: &DateTime<Utc>, window_days: u32) -> bool {
    let age = *reference - *timestamp;
    age >= Duration::zero() && age < Duration::days(i64::from(window_days))
}

/// Keeps events whose age relative to `reference` is in `[0, window_days)`.
pub fn window_filter(
    events: &[InteractionEvent],
    reference: &DateTime<Utc>,
    window_days: u32,
) -> Vec<InteractionEvent> {
    events
        .iter()
        .filter(|e| in_window(&e.timestamp, reference, window_days))
        .cloned()
        .collect()
}

/// Drops events referencing jobs outside the catalog. Returns the kept events
/// and the number dropped.
pub fn retain_known_jobs(
    events: Vec<InteractionEvent>,
    catalog: &JobCatalog,
) -> (Vec<InteractionEvent>, usize) {
    let before = events.len();
    let kept: Vec<_> = events
        .into_iter()
        .filter(|e| catalog.index_of(&e.job_id).is_some())
        .collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} events referencing unknown jobs");
    }
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Occurrence {
    pub timestamp: DateTime<Utc>,
    pub query_id: Option<String>,
}

/// One distinct (user, job, kind) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signal {
    pub user_id: String,
    pub job_id: String,
    pub kind: EventKind,
    /// Latest observed timestamp.
    pub timestamp: DateTime<Utc>,
    /// Distinct raw occurrences, sorted; clicks keep their query grouping here.
    pub occurrences: Vec<Occurrence>,
}

/// Collapses events into distinct (user, job, kind) triples, ordered by key.
pub fn dedupe(events: &[InteractionEvent]) -> Vec<Signal> {
    let mut acc: BTreeMap<(&str, &str, EventKind), BTreeSet<Occurrence>> = BTreeMap::new();
    for e in events {
        acc.entry((e.user_id.as_str(), e.job_id.as_str(), e.kind))
            .or_default()
            .insert(Occurrence {
                timestamp: e.timestamp,
                query_id: e.query_id.clone(),
            });
    }
    acc.into_iter()
        .map(|((user, job, kind), occ)| {
            let occurrences: Vec<_> = occ.into_iter().collect();
            Signal {
                user_id: user.to_string(),
                job_id: job.to_string(),
                kind,
                timestamp: occurrences
                    .iter()
                    .map(|o| o.timestamp)
                    .max()
                    .expect("non-empty"),
                occurrences,
            }
        })
        .collect()
}

/// Groups users by id for quick lookup.
pub fn users_by_id(users: &[UserRecord]) -> HashMap<&str, &UserRecord> {
    users.iter().map(|u| (u.user_id.as_str(), u)).collect()
}
