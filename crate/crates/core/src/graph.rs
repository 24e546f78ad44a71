//! Labeled job multigraph: per-job totals and per-pair co-statistics.
//!
//! Counts are distinct-user counts. A pair's co-apps is the number of users
//! who applied to both jobs; co-clicks is the number of users who clicked both
//! within one click group. A click group is a `(user, query_id)` pair when the
//! click carries a query id, otherwise a run of the user's id-less clicks with
//! no gap longer than the configured session gap.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::catalog::{JobCatalog, JobIdx};
use crate::ingest::{EventKind, Signal};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("graphs cover different catalogs")]
    CatalogMismatch,
    #[error("dump line {line}: {message}")]
    Dump { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Apps,
    Clicks,
}

impl Behavior {
    pub const ALL: [Behavior; 2] = [Behavior::Apps, Behavior::Clicks];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub total_apps: u32,
    pub total_clicks: u32,
}

impl NodeStats {
    pub fn get(&self, b: Behavior) -> u32 {
        match b {
            Behavior::Apps => self.total_apps,
            Behavior::Clicks => self.total_clicks,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoStats {
    pub co_apps: u32,
    pub co_clicks: u32,
}

impl CoStats {
    pub fn get(&self, b: Behavior) -> u32 {
        match b {
            Behavior::Apps => self.co_apps,
            Behavior::Clicks => self.co_clicks,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.co_apps == 0 && self.co_clicks == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GraphOptions {
    /// Maximum gap between consecutive id-less clicks of one session.
    pub session_gap: Duration,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            session_gap: Duration::minutes(30),
        }
    }
}

fn ordered(a: JobIdx, b: JobIdx) -> (JobIdx, JobIdx) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone)]
pub struct JobMultiGraph {
    catalog: JobCatalog,
    nodes: Vec<NodeStats>,
    edges: BTreeMap<(JobIdx, JobIdx), CoStats>,
    adjacency: Vec<Vec<JobIdx>>,
}

impl JobMultiGraph {
    fn empty(catalog: JobCatalog) -> Self {
        let n = catalog.len();
        JobMultiGraph {
            catalog,
            nodes: vec![NodeStats::default(); n],
            edges: BTreeMap::new(),
            adjacency: vec![Vec::new(); n],
        }
    }

    fn reindex(&mut self) {
        self.edges.retain(|_, c| !c.is_zero());
        for a in &mut self.adjacency {
            a.clear();
        }
        for &(i, j) in self.edges.keys() {
            self.adjacency[i].push(j);
            self.adjacency[j].push(i);
        }
        for a in &mut self.adjacency {
            a.sort_unstable();
        }
    }

    pub fn catalog(&self) -> &JobCatalog {
        &self.catalog
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn stats(&self, idx: JobIdx) -> NodeStats {
        self.nodes[idx]
    }

    /// Co-statistics of an unordered pair; zero when the pair has no edge.
    pub fn costats(&self, i: JobIdx, j: JobIdx) -> CoStats {
        self.edges.get(&ordered(i, j)).copied().unwrap_or_default()
    }

    /// Edges as `(lower index, higher index, counts)`.
    pub fn edges(&self) -> impl Iterator<Item = (JobIdx, JobIdx, CoStats)> + '_ {
        self.edges.iter().map(|(&(i, j), &c)| (i, j, c))
    }

    pub fn neighbor_indices(&self, idx: JobIdx) -> &[JobIdx] {
        &self.adjacency[idx]
    }

    /// Nonzero co-statistic partners of `job_id`, ordered by job id.
    pub fn neighbors(&self, job_id: &str) -> Result<Vec<(String, CoStats)>, GraphError> {
        let idx = self
            .catalog
            .index_of(job_id)
            .ok_or_else(|| GraphError::UnknownJob(job_id.to_string()))?;
        Ok(self.adjacency[idx]
            .iter()
            .map(|&o| (self.catalog.id(o).to_string(), self.costats(idx, o)))
            .collect())
    }

    /// Adds another partial count table over the same catalog. Exact when the
    /// two tables were built from disjoint user sets.
    pub fn add_counts(&mut self, other: &JobMultiGraph) -> Result<(), GraphError> {
        if self.catalog.len() != other.catalog.len()
            || (0..self.catalog.len()).any(|i| self.catalog.id(i) != other.catalog.id(i))
        {
            return Err(GraphError::CatalogMismatch);
        }
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            a.total_apps += b.total_apps;
            a.total_clicks += b.total_clicks;
        }
        for (k, c) in &other.edges {
            let e = self.edges.entry(*k).or_default();
            e.co_apps += c.co_apps;
            e.co_clicks += c.co_clicks;
        }
        self.reindex();
        Ok(())
    }

    /// Writes `job_i,job_j,co_apps,co_clicks` lines, `job_i < job_j`.
    pub fn write_edges<W: Write>(&self, writer: W) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(writer);
        for (i, j, c) in self.edges() {
            w.write_record([
                self.catalog.id(i),
                self.catalog.id(j),
                &c.co_apps.to_string(),
                &c.co_clicks.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `job_id,total_apps,total_clicks` for every node.
    pub fn write_nodes<W: Write>(&self, writer: W) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(writer);
        for (i, s) in self.nodes.iter().enumerate() {
            w.write_record([
                self.catalog.id(i),
                &s.total_apps.to_string(),
                &s.total_clicks.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reloads a graph written by [`write_nodes`](Self::write_nodes) and
    /// [`write_edges`](Self::write_edges).
    pub fn load<R1: Read, R2: Read>(
        catalog: JobCatalog,
        nodes: R1,
        edges: R2,
    ) -> Result<Self, GraphError> {
        let mut g = JobMultiGraph::empty(catalog);
        let parse_u32 = |s: &str, line: u64| {
            s.parse::<u32>().map_err(|_| GraphError::Dump {
                line,
                message: format!("bad count {s:?}"),
            })
        };
        let reader = |r| csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        for rec in reader(Box::new(nodes) as Box<dyn Read>).records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 3 {
                return Err(GraphError::Dump {
                    line,
                    message: "expected 3 fields".into(),
                });
            }
            let idx = g.lookup(&rec[0])?;
            g.nodes[idx] = NodeStats {
                total_apps: parse_u32(&rec[1], line)?,
                total_clicks: parse_u32(&rec[2], line)?,
            };
        }
        for rec in reader(Box::new(edges) as Box<dyn Read>).records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(GraphError::Dump {
                    line,
                    message: "expected 4 fields".into(),
                });
            }
            let (i, j) = (g.lookup(&rec[0])?, g.lookup(&rec[1])?);
            if i == j {
                return Err(GraphError::Dump {
                    line,
                    message: "self edge".into(),
                });
            }
            g.edges.insert(
                ordered(i, j),
                CoStats {
                    co_apps: parse_u32(&rec[2], line)?,
                    co_clicks: parse_u32(&rec[3], line)?,
                },
            );
        }
        g.reindex();
        Ok(g)
    }

    fn lookup(&self, id: &str) -> Result<JobIdx, GraphError> {
        self.catalog
            .index_of(id)
            .ok_or_else(|| GraphError::UnknownJob(id.to_string()))
    }
}

/// Builds the multigraph from deduplicated, windowed signals. Every catalog
/// job becomes a node, active or expired.
pub fn build_costats(
    signals: &[Signal],
    catalog: JobCatalog,
    options: &GraphOptions,
) -> Result<JobMultiGraph, GraphError> {
    let mut g = JobMultiGraph::empty(catalog);

    // user -> applied jobs, user -> click occurrences (job, ts, query)
    let mut applies: BTreeMap<&str, BTreeSet<JobIdx>> = BTreeMap::new();
    let mut clicks: BTreeMap<&str, Vec<(JobIdx, &Signal)>> = BTreeMap::new();
    for s in signals {
        let idx = g.lookup(&s.job_id)?;
        match s.kind {
            EventKind::Apply => {
                applies.entry(&s.user_id).or_default().insert(idx);
            }
            EventKind::Click => clicks.entry(&s.user_id).or_default().push((idx, s)),
            EventKind::EmailOpenNoClick => {}
        }
    }

    for jobs in applies.values() {
        for &j in jobs {
            g.nodes[j].total_apps += 1;
        }
        let jobs: Vec<_> = jobs.iter().copied().collect();
        for (a, &i) in jobs.iter().enumerate() {
            for &j in &jobs[a + 1..] {
                g.edges.entry((i, j)).or_default().co_apps += 1;
            }
        }
    }

    for user_clicks in clicks.values() {
        let mut distinct = BTreeSet::new();
        let mut by_query: BTreeMap<&str, BTreeSet<JobIdx>> = BTreeMap::new();
        let mut unscoped = Vec::new();
        for &(idx, s) in user_clicks {
            distinct.insert(idx);
            for o in &s.occurrences {
                match o.query_id.as_deref() {
                    Some(q) => {
                        by_query.entry(q).or_default().insert(idx);
                    }
                    None => unscoped.push((o.timestamp, idx)),
                }
            }
        }
        for &j in &distinct {
            g.nodes[j].total_clicks += 1;
        }

        let mut groups: Vec<BTreeSet<JobIdx>> = by_query.into_values().collect();
        unscoped.sort_unstable();
        let mut current = BTreeSet::new();
        let mut last = None;
        for (t, idx) in unscoped {
            if let Some(prev) = last {
                if t - prev > options.session_gap {
                    groups.push(std::mem::take(&mut current));
                }
            }
            current.insert(idx);
            last = Some(t);
        }
        groups.push(current);

        let mut pairs = BTreeSet::new();
        for group in &groups {
            let jobs: Vec<_> = group.iter().copied().collect();
            for (a, &i) in jobs.iter().enumerate() {
                for &j in &jobs[a + 1..] {
                    pairs.insert((i, j));
                }
            }
        }
        for p in pairs {
            g.edges.entry(p).or_default().co_clicks += 1;
        }
    }

    g.reindex();
    Ok(g)
}
