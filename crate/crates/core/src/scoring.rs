//! Pairwise association scores and their aggregation into the directed
//! recommendation digraph.
//!
//! For an ordered pair `j -> i` (recommend `i` to someone who engaged with
//! `j`) the aggregate is
//!
//! ```text
//! corr(i, j) = w1 * (p_apps(i|j) + p_clicks(i|j))
//!            + w2 * (pmi2_apps(i, j) + pmi2_clicks(i, j))
//!            + w3 * sim_e(i, j)
//! ```
//!
//! with `p(i|j) = c(i,j) / c(j)`, `pmi2 = ln(c(i,j)^2 / (c(i) c(j)))` and
//! `sim_e` the cosine of the two content embeddings. Signals without evidence
//! contribute zero. Only active jobs receive incoming edges.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{JobCatalog, JobIdx};
use crate::graph::{Behavior, JobMultiGraph};
use crate::ingest::EmbeddingTable;

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("edge to inactive job {0:?}")]
    InactiveDestination(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("digraph dump line {line}: {message}")]
    Dump { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    /// Weight of the conditional-probability sum.
    pub w1: f64,
    /// Weight of the PMI² sum.
    pub w2: f64,
    /// Weight of the embedding cosine.
    pub w3: f64,
    /// Content edges need `sim_e >= gamma`.
    pub gamma: f64,
    /// Use `exp(pmi2)` in place of `pmi2`, mapping it into `(0, 1]`.
    pub normalize_pmi2: bool,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w1: 0.5,
            w2: 0.3,
            w3: 0.2,
            gamma: 0.4,
            normalize_pmi2: false,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), ScoringError> {
        let ws = [self.w1, self.w2, self.w3];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ScoringError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(ScoringError::InvalidWeights(
                "at least one weight must be positive".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(ScoringError::InvalidWeights(format!(
                "gamma {} outside [-1, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `co / given`, or 0 without evidence.
pub fn mle_from_counts(co: u32, given: u32) -> f64 {
    if given == 0 {
        0.0
    } else {
        f64::from(co) / f64::from(given)
    }
}

/// `ln(co^2 / (ci * cj))`; `None` when any count is zero.
pub fn pmi2_from_counts(co: u32, ci: u32, cj: u32) -> Option<f64> {
    if co == 0 || ci == 0 || cj == 0 {
        return None;
    }
    let co = f64::from(co);
    Some((co * co / (f64::from(ci) * f64::from(cj))).ln())
}

/// Estimated `p(i | j)` for one behavior.
pub fn mle(graph: &JobMultiGraph, i: JobIdx, j: JobIdx, behavior: Behavior) -> f64 {
    mle_from_counts(
        graph.costats(i, j).get(behavior),
        graph.stats(j).get(behavior),
    )
}

pub fn pmi2(graph: &JobMultiGraph, i: JobIdx, j: JobIdx, behavior: Behavior) -> Option<f64> {
    pmi2_from_counts(
        graph.costats(i, j).get(behavior),
        graph.stats(i).get(behavior),
        graph.stats(j).get(behavior),
    )
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of two same-length, nonzero vectors.
pub fn embed_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding dimensions differ");
    cosine_with_norms(a, b, norm(a), norm(b))
}

/// Symmetric content edges keyed by `(lower, higher)` catalog index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContentEdges {
    edges: BTreeMap<(JobIdx, JobIdx), f64>,
}

impl ContentEdges {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn get(&self, i: JobIdx, j: JobIdx) -> Option<f64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges.get(&key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (JobIdx, JobIdx, f64)> + '_ {
        self.edges.iter().map(|(&(i, j), &s)| (i, j, s))
    }
}

/// All catalog pairs with `sim_e >= gamma`, by exhaustive comparison. With
/// `block_by_category` only same-category pairs are compared.
pub fn content_edges(
    catalog: &JobCatalog,
    embeddings: &EmbeddingTable,
    gamma: f64,
    block_by_category: bool,
) -> ContentEdges {
    let present: Vec<(JobIdx, &[f64], f64)> = (0..catalog.len())
        .filter_map(|i| embeddings.get(catalog.id(i)).map(|v| (i, v, norm(v))))
        .collect();
    let rows: Vec<Vec<((JobIdx, JobIdx), f64)>> = present
        .par_iter()
        .enumerate()
        .map(|(a, &(i, vi, ni))| {
            present[a + 1..]
                .iter()
                .filter(|(j, _, _)| {
                    !block_by_category || catalog.job(i).category == catalog.job(*j).category
                })
                .filter_map(|&(j, vj, nj)| {
                    let s = cosine_with_norms(vi, vj, ni, nj);
                    (s >= gamma).then_some(((i, j), s))
                })
                .collect()
        })
        .collect();
    ContentEdges {
        edges: rows.into_iter().flatten().collect(),
    }
}

/// Component scores of one directed edge, kept for auditing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeScore {
    pub corr: f64,
    pub p_apps: f64,
    pub p_clicks: f64,
    pub pmi2_apps: Option<f64>,
    pub pmi2_clicks: Option<f64>,
    pub sim_e: Option<f64>,
}

impl EdgeScore {
    /// An edge carrying only an aggregate value.
    pub fn bare(corr: f64) -> Self {
        EdgeScore {
            corr,
            p_apps: 0.0,
            p_clicks: 0.0,
            pmi2_apps: None,
            pmi2_clicks: None,
            sim_e: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEdge {
    pub dst: JobIdx,
    pub score: EdgeScore,
}

/// Directed, weighted job graph whose edges all end at active jobs.
#[derive(Debug, Clone)]
pub struct RecDigraph {
    catalog: JobCatalog,
    out: Vec<Vec<ScoredEdge>>,
}

impl RecDigraph {
    /// Builds a digraph from explicit `(src, dst, score)` edges. Later
    /// duplicates replace earlier ones; self edges are dropped.
    pub fn from_edges(
        catalog: JobCatalog,
        edges: impl IntoIterator<Item = (JobIdx, JobIdx, EdgeScore)>,
    ) -> Result<Self, ScoringError> {
        let n = catalog.len();
        let mut maps: Vec<BTreeMap<JobIdx, EdgeScore>> = vec![BTreeMap::new(); n];
        for (src, dst, score) in edges {
            if src >= n || dst >= n {
                return Err(ScoringError::UnknownJob(format!("index {}", src.max(dst))));
            }
            if !catalog.is_active(dst) {
                return Err(ScoringError::InactiveDestination(
                    catalog.id(dst).to_string(),
                ));
            }
            if src != dst {
                maps[src].insert(dst, score);
            }
        }
        let out = maps
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(dst, score)| ScoredEdge { dst, score })
                    .collect()
            })
            .collect();
        Ok(RecDigraph { catalog, out })
    }

    pub fn catalog(&self) -> &JobCatalog {
        &self.catalog
    }

    pub fn node_count(&self) -> usize {
        self.out.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// Outgoing edges of `src`, ordered by destination.
    pub fn out_edges(&self, src: JobIdx) -> &[ScoredEdge] {
        &self.out[src]
    }

    pub fn corr(&self, src: JobIdx, dst: JobIdx) -> Option<f64> {
        self.out[src]
            .binary_search_by_key(&dst, |e| e.dst)
            .ok()
            .map(|k| self.out[src][k].score.corr)
    }

    pub fn edges(&self) -> impl Iterator<Item = (JobIdx, &ScoredEdge)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(s, es)| es.iter().map(move |e| (s, e)))
    }

    /// Writes `src_job,dst_job,corr,p_apps,p_clicks,pmi2_apps,pmi2_clicks,sim_e`.
    /// Absent components are empty fields.
    pub fn write<W: Write>(&self, writer: W) -> Result<(), ScoringError> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut w = csv::Writer::from_writer(writer);
        for (src, e) in self.edges() {
            let s = &e.score;
            w.write_record([
                self.catalog.id(src),
                self.catalog.id(e.dst),
                &s.corr.to_string(),
                &s.p_apps.to_string(),
                &s.p_clicks.to_string(),
                &opt(s.pmi2_apps),
                &opt(s.pmi2_clicks),
                &opt(s.sim_e),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reloads a dump written by [`write`](Self::write) against its catalog.
    pub fn load<R: Read>(catalog: JobCatalog, reader: R) -> Result<Self, ScoringError> {
        let mut edges = Vec::new();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(reader);
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let dump_err = |message: String| ScoringError::Dump { line, message };
            if rec.len() != 8 {
                return Err(dump_err(format!("expected 8 fields, found {}", rec.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| dump_err(format!("bad number {s:?}")))
            };
            let opt = |s: &str| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let idx = |s: &str| {
                catalog
                    .index_of(s)
                    .ok_or_else(|| ScoringError::UnknownJob(s.to_string()))
            };
            edges.push((
                idx(&rec[0])?,
                idx(&rec[1])?,
                EdgeScore {
                    corr: num(&rec[2])?,
                    p_apps: num(&rec[3])?,
                    p_clicks: num(&rec[4])?,
                    pmi2_apps: opt(&rec[5])?,
                    pmi2_clicks: opt(&rec[6])?,
                    sim_e: opt(&rec[7])?,
                },
            ));
        }
        RecDigraph::from_edges(catalog, edges)
    }
}

fn score_direction(
    graph: &JobMultiGraph,
    content: Option<f64>,
    src: JobIdx,
    dst: JobIdx,
    w: &ScoreWeights,
) -> EdgeScore {
    let p_apps = mle(graph, dst, src, Behavior::Apps);
    let p_clicks = mle(graph, dst, src, Behavior::Clicks);
    let pmi2_apps = pmi2(graph, dst, src, Behavior::Apps);
    let pmi2_clicks = pmi2(graph, dst, src, Behavior::Clicks);
    let pmi_term = |v: Option<f64>| match v {
        Some(x) if w.normalize_pmi2 => x.exp(),
        Some(x) => x,
        None => 0.0,
    };
    let corr = w.w1 * (p_apps + p_clicks)
        + w.w2 * (pmi_term(pmi2_apps) + pmi_term(pmi2_clicks))
        + w.w3 * content.unwrap_or(0.0);
    EdgeScore {
        corr,
        p_apps,
        p_clicks,
        pmi2_apps,
        pmi2_clicks,
        sim_e: content,
    }
}

/// Aggregates behavioral co-statistics and content edges into a digraph.
/// Each unordered pair with any evidence yields up to two directed edges,
/// one per active endpoint.
pub fn aggregate(
    graph: &JobMultiGraph,
    content: &ContentEdges,
    weights: &ScoreWeights,
) -> RecDigraph {
    let catalog = graph.catalog();
    let mut pairs: BTreeMap<(JobIdx, JobIdx), Option<f64>> =
        graph.edges().map(|(i, j, _)| ((i, j), None)).collect();
    for (i, j, s) in content.iter() {
        pairs.insert((i, j), Some(s));
    }
    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for (&(a, b), &sim) in &pairs {
        for (src, dst) in [(a, b), (b, a)] {
            if catalog.is_active(dst) {
                edges.push((src, dst, score_direction(graph, sim, src, dst, weights)));
            }
        }
    }
    RecDigraph::from_edges(catalog.clone(), edges).expect("destinations filtered to active jobs")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic feature-hashed bag of title and category tokens, used when
/// no learned embeddings are available. Jobs with no tokens are omitted.
pub fn bag_of_tokens_embeddings(catalog: &JobCatalog, dim: usize) -> EmbeddingTable {
    assert!(dim > 0);
    let mut table = EmbeddingTable::default();
    for job in catalog.jobs() {
        let mut v = vec![0.0; dim];
        let text = format!("{} {}", job.title, job.category).to_lowercase();
        for tok in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % dim as u64) as usize] += sign;
        }
        // Zero vectors (no tokens, or cancelling hashes) are rejected by the table.
        let _ = table.insert(job.job_id.clone(), v);
    }
    table
}
