//! End-to-end commands shared by the command-line front end: file loading,
//! graph builds with a manifest, batch serving and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::JobCatalog;
use crate::config::EngineConfig;
use crate::eval::{build_graph, connectivity_report, GraphBuild};
use crate::ingest::{
    dedupe, format_timestamp, parse_embeddings, parse_events, parse_jobs, parse_timestamp,
    parse_users, window_filter, write_jobs, EmbeddingTable, InteractionEvent, JobRecord, Parsed,
    RecordFormat, UserRecord,
};
use crate::mf::{als_train, build_matrix, implicit_sets, FactorModel, TrainReport};
use crate::recommend::{build_profiles, RecommendParams, Recommender, UserType};
use crate::scoring::RecDigraph;

pub const DIGRAPH_FILE: &str = "digraph.csv";
pub const NODES_FILE: &str = "graph_nodes.csv";
pub const EDGES_FILE: &str = "graph_edges.csv";
pub const CATALOG_FILE: &str = "jobs.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input,
    Config,
    Internal,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Input => 1,
            Stage::Config => 2,
            Stage::Internal => 3,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::Config => "config",
            Stage::Internal => "internal",
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn input(message: impl fmt::Display) -> Self {
        PipelineError {
            stage: Stage::Input,
            message: message.to_string(),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        PipelineError {
            stage: Stage::Config,
            message: message.to_string(),
        }
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        PipelineError {
            stage: Stage::Internal,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage.as_str(), self.message)
    }
}

impl std::error::Error for PipelineError {}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))
}

fn report_errors<T>(path: &Path, parsed: &Parsed<T>) -> usize {
    for e in parsed.errors.iter().take(20) {
        log::warn!("{}:{}: {}", path.display(), e.line, e.message);
    }
    if parsed.errors.len() > 20 {
        log::warn!(
            "{}: {} more malformed lines",
            path.display(),
            parsed.errors.len() - 20
        );
    }
    parsed.errors.len()
}

/// A loaded file plus the number of malformed lines skipped.
pub struct Loaded<T> {
    pub records: T,
    pub skipped: usize,
}

/// Reads events; `.jsonl` and `.ndjson` files are JSON lines, anything else CSV.
pub fn load_events(path: &Path) -> Result<Loaded<Vec<InteractionEvent>>> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "ndjson") => RecordFormat::JsonLines,
        _ => RecordFormat::Csv,
    };
    let parsed = parse_events(open(path)?, format);
    let skipped = report_errors(path, &parsed);
    Ok(Loaded {
        records: parsed.records,
        skipped,
    })
}

pub fn load_jobs(path: &Path) -> Result<Loaded<Vec<JobRecord>>> {
    let parsed = parse_jobs(open(path)?, None);
    let skipped = report_errors(path, &parsed);
    Ok(Loaded {
        records: parsed.records,
        skipped,
    })
}

pub fn load_users(path: &Path) -> Result<Loaded<Vec<UserRecord>>> {
    let parsed = parse_users(open(path)?, None);
    let skipped = report_errors(path, &parsed);
    Ok(Loaded {
        records: parsed.records,
        skipped,
    })
}

pub fn load_embeddings(path: &Path) -> Result<Loaded<EmbeddingTable>> {
    let parsed = parse_embeddings(open(path)?);
    let skipped = report_errors(path, &parsed);
    let table = EmbeddingTable::from_records(parsed.records)
        .map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        records: table,
        skipped,
    })
}

/// Loads embeddings when the file exists; otherwise warns and returns `None`.
pub fn load_embeddings_optional(
    path: Option<&Path>,
    warnings: &mut Vec<String>,
) -> Result<Option<Loaded<EmbeddingTable>>> {
    match path {
        Some(p) if p.exists() => load_embeddings(p).map(Some),
        Some(p) => {
            let msg = format!(
                "embedding file {} not found; content edges disabled",
                p.display()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            Ok(None)
        }
        None => {
            let msg = "no embedding file given; content edges disabled".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            Ok(None)
        }
    }
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn load_user_ids(path: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))?;
        let id = line.trim();
        if !id.is_empty() && !id.starts_with('#') {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

/// Command-line date, then the configured date, then the latest event.
pub fn resolve_reference(
    cli: Option<&str>,
    config: &EngineConfig,
    events: &[InteractionEvent],
) -> Result<DateTime<Utc>> {
    if let Some(s) = cli {
        return parse_timestamp(s).map_err(PipelineError::config);
    }
    if let Some(r) = config.reference().map_err(PipelineError::config)? {
        return Ok(r);
    }
    events
        .iter()
        .map(|e| e.timestamp)
        .max()
        .ok_or_else(|| PipelineError::input("no events and no reference date configured"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputCounts {
    pub events: usize,
    pub events_skipped: usize,
    pub jobs: usize,
    pub jobs_skipped: usize,
    pub embeddings: Option<usize>,
    pub embeddings_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphCounts {
    pub nodes: usize,
    pub active_nodes: usize,
    pub costat_edges: usize,
    pub content_edges: usize,
    pub digraph_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub reference_date: String,
    pub window_days: u32,
    pub config_hash: String,
    pub inputs: InputCounts,
    pub graph: GraphCounts,
    /// Connectivity fraction per edge-type subset.
    pub connectivity: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl BuildManifest {
    pub fn reference(&self) -> Result<DateTime<Utc>> {
        parse_timestamp(&self.reference_date).map_err(PipelineError::input)
    }
}

pub struct BuildInputs<'a> {
    pub events: &'a Path,
    pub jobs: &'a Path,
    pub embeddings: Option<&'a Path>,
}

/// Ingests the inputs, builds the digraph and writes the model directory.
pub fn build(
    config: &EngineConfig,
    inputs: &BuildInputs<'_>,
    reference: Option<&str>,
    out_dir: &Path,
) -> Result<BuildManifest> {
    config.validate().map_err(PipelineError::config)?;
    let events = load_events(inputs.events)?;
    let jobs = load_jobs(inputs.jobs)?;
    let mut warnings = Vec::new();
    let embeddings = load_embeddings_optional(inputs.embeddings, &mut warnings)?;
    let reference = resolve_reference(reference, config, &events.records)?;
    let catalog = JobCatalog::new(jobs.records);
    let table = embeddings.as_ref().map(|l| &l.records);

    let GraphBuild {
        multigraph,
        content,
        digraph,
    } = build_graph(&events.records, &catalog, table, &reference, config)
        .map_err(PipelineError::internal)?;
    let active = multigraph.catalog().active_indices();
    let connectivity = connectivity_report(&multigraph, &content, &active);

    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::input(format!("{}: {e}", out_dir.display())))?;
    let write_err = |e: &dyn fmt::Display| PipelineError::internal(format!("writing model: {e}"));
    digraph
        .write(create(&out_dir.join(DIGRAPH_FILE))?)
        .map_err(|e| write_err(&e))?;
    multigraph
        .write_nodes(create(&out_dir.join(NODES_FILE))?)
        .map_err(|e| write_err(&e))?;
    multigraph
        .write_edges(create(&out_dir.join(EDGES_FILE))?)
        .map_err(|e| write_err(&e))?;
    write_jobs(
        create(&out_dir.join(CATALOG_FILE))?,
        multigraph.catalog().jobs(),
    )
    .map_err(|e| write_err(&e))?;

    let manifest = BuildManifest {
        reference_date: format_timestamp(&reference),
        window_days: config.window_days,
        config_hash: config.hash(),
        inputs: InputCounts {
            events: events.records.len(),
            events_skipped: events.skipped,
            jobs: catalog.len(),
            jobs_skipped: jobs.skipped,
            embeddings: embeddings.as_ref().map(|l| l.records.len()),
            embeddings_skipped: embeddings.as_ref().map_or(0, |l| l.skipped),
        },
        graph: GraphCounts {
            nodes: multigraph.node_count(),
            active_nodes: active.len(),
            costat_edges: multigraph.edge_count(),
            content_edges: content.len(),
            digraph_edges: digraph.edge_count(),
        },
        connectivity: connectivity.rows().into_iter().collect(),
        warnings,
    };
    let mut w = create(&out_dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| write_err(&e))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| write_err(&e))?;
    Ok(manifest)
}

/// A model directory loaded back into memory.
pub struct Model {
    pub digraph: RecDigraph,
    pub manifest: BuildManifest,
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest: BuildManifest = serde_json::from_reader(open(&dir.join(MANIFEST_FILE))?)
        .map_err(|e| PipelineError::input(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let jobs = load_jobs(&dir.join(CATALOG_FILE))?;
    if jobs.skipped > 0 {
        return Err(PipelineError::input(format!(
            "{}: malformed catalog",
            dir.display()
        )));
    }
    let digraph = RecDigraph::load(
        JobCatalog::new(jobs.records),
        open(&dir.join(DIGRAPH_FILE))?,
    )
    .map_err(|e| PipelineError::input(format!("{}: {e}", dir.join(DIGRAPH_FILE).display())))?;
    if digraph.edge_count() != manifest.graph.digraph_edges {
        return Err(PipelineError::input(
            "digraph dump disagrees with its manifest",
        ));
    }
    Ok(Model { digraph, manifest })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub users_requested: usize,
    pub users_served: usize,
    pub unknown_users: usize,
    pub by_user_type: BTreeMap<String, usize>,
    pub by_provenance: BTreeMap<String, usize>,
    pub empty_lists: usize,
}

/// Data needed to profile users at serving time.
pub struct ServeInputs<'a> {
    pub users: &'a [UserRecord],
    pub events: &'a [InteractionEvent],
    pub embeddings: Option<&'a EmbeddingTable>,
}

fn user_type_name(t: UserType) -> &'static str {
    match t {
        UserType::Active => "active",
        UserType::PassiveOrNewWithProfile => "passive_or_new_with_profile",
        UserType::Anonymous => "anonymous",
    }
}

/// Writes `user_id,rank,job_id,score,provenance` lines for every known id in
/// `user_ids`. Ids without a user record or events are skipped and counted.
pub fn serve_batch<W: Write>(
    model: &Model,
    user_ids: &[String],
    inputs: &ServeInputs<'_>,
    params: RecommendParams,
    window_days: u32,
    mut out: W,
) -> Result<BatchSummary> {
    let reference = model.manifest.reference()?;
    let profiles = build_profiles(inputs.users, inputs.events, &reference, window_days);
    let recommender = Recommender::new(&model.digraph, inputs.embeddings, params, reference);

    let mut seen = BTreeSet::new();
    let ids: Vec<&String> = user_ids
        .iter()
        .filter(|id| seen.insert(id.as_str()))
        .collect();
    let lists: Vec<_> = ids
        .par_iter()
        .map(|id| profiles.get(id.as_str()).map(|p| recommender.recommend(p)))
        .collect();

    let mut summary = BatchSummary {
        users_requested: ids.len(),
        ..Default::default()
    };
    let io = |e: std::io::Error| PipelineError::internal(format!("writing recommendations: {e}"));
    writeln!(out, "user_id,rank,job_id,score,provenance").map_err(io)?;
    for (id, list) in ids.iter().zip(lists) {
        let Some(list) = list else {
            log::warn!("unknown user {id:?} skipped");
            summary.unknown_users += 1;
            continue;
        };
        summary.users_served += 1;
        *summary
            .by_user_type
            .entry(user_type_name(list.user_type).into())
            .or_default() += 1;
        if list.entries.is_empty() {
            summary.empty_lists += 1;
        }
        for d in &list.diagnostics {
            log::debug!("{id}: {d}");
        }
        for (rank, e) in list.entries.iter().enumerate() {
            *summary
                .by_provenance
                .entry(e.provenance.as_str().into())
                .or_default() += 1;
            writeln!(
                out,
                "{},{},{},{},{}",
                id,
                rank + 1,
                e.job_id,
                e.score,
                e.provenance.as_str()
            )
            .map_err(io)?;
        }
    }
    out.flush().map_err(io)?;
    Ok(summary)
}

/// Standard file names inside a corpus directory.
pub fn corpus_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    use crate::eval::synth::{EMBEDDINGS_FILE, EVENTS_FILE, JOBS_FILE, USERS_FILE};
    (
        dir.join(EVENTS_FILE),
        dir.join(JOBS_FILE),
        dir.join(USERS_FILE),
        dir.join(EMBEDDINGS_FILE),
    )
}

/// Trains the factor model on windowed explicit signals.
pub fn train_mf(
    config: &EngineConfig,
    events: &[InteractionEvent],
    reference: &DateTime<Utc>,
    seed: u64,
) -> Result<(FactorModel, TrainReport)> {
    config.validate().map_err(PipelineError::config)?;
    let signals = dedupe(&window_filter(events, reference, config.window_days));
    let matrix = build_matrix(&signals);
    if matrix.is_empty() {
        return Err(PipelineError::input(
            "no apply or ignored-email events inside the window",
        ));
    }
    let sets = implicit_sets(&matrix, &signals);
    als_train(&matrix, &config.mf, Some(&sets), seed).map_err(PipelineError::internal)
}
