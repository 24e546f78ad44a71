//! Offline evaluation: connectivity reports, temporal holdout, precision and
//! recall at k, and a side-by-side comparison of the graph recommender, the
//! co-application baseline and matrix factorization.

pub mod cf;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{JobCatalog, JobIdx};
use crate::config::EngineConfig;
use crate::graph::{build_costats, GraphError, GraphOptions, JobMultiGraph};
use crate::ingest::{
    dedupe, retain_known_jobs, window_filter, EmbeddingTable, EventKind, InteractionEvent,
    UserRecord,
};
use crate::mf::{als_train, build_matrix, implicit_sets, MfError};
use crate::recommend::{build_profiles, Recommender};
use crate::scoring::{aggregate, content_edges, ContentEdges};

use cf::CfIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    CoClicks,
    CoApps,
    Content,
}

impl EdgeType {
    pub const ALL: [EdgeType; 3] = [EdgeType::CoClicks, EdgeType::CoApps, EdgeType::Content];

    fn bit(self) -> u8 {
        match self {
            EdgeType::CoClicks => 1,
            EdgeType::CoApps => 2,
            EdgeType::Content => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::CoClicks => "co_clicks",
            EdgeType::CoApps => "co_apps",
            EdgeType::Content => "content",
        }
    }
}

/// Nonempty set of edge types as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeTypeSet(u8);

impl EdgeTypeSet {
    pub fn of(types: &[EdgeType]) -> Self {
        EdgeTypeSet(types.iter().fold(0, |m, t| m | t.bit()))
    }

    /// The seven nonempty subsets, smallest mask first.
    pub fn all_nonempty() -> impl Iterator<Item = EdgeTypeSet> {
        (1u8..8).map(EdgeTypeSet)
    }

    pub fn contains(self, t: EdgeType) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn is_subset_of(self, other: EdgeTypeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn types(self) -> Vec<EdgeType> {
        EdgeType::ALL
            .into_iter()
            .filter(|t| self.contains(*t))
            .collect()
    }
}

impl fmt::Display for EdgeTypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.types().into_iter().map(EdgeType::as_str).collect();
        f.write_str(&names.join("+"))
    }
}

/// Share of active jobs touching at least one edge of each type subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityReport {
    pub active_jobs: usize,
    /// Keyed by subset, all seven present.
    pub fractions: BTreeMap<EdgeTypeSet, f64>,
}

impl ConnectivityReport {
    pub fn fraction(&self, types: &[EdgeType]) -> f64 {
        self.fractions[&EdgeTypeSet::of(types)]
    }

    /// `(subset name, fraction)` pairs in mask order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        self.fractions
            .iter()
            .map(|(s, f)| (s.to_string(), *f))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let fractions: serde_json::Map<String, serde_json::Value> = self
            .rows()
            .into_iter()
            .map(|(k, v)| (k, serde_json::json!(v)))
            .collect();
        serde_json::json!({ "active_jobs": self.active_jobs, "fractions": fractions })
    }
}

/// Counts, for every nonempty subset of edge types, the active jobs with an
/// edge of a type in the subset. Edge partners may be any job.
pub fn connectivity_report(
    graph: &JobMultiGraph,
    content: &ContentEdges,
    active: &[JobIdx],
) -> ConnectivityReport {
    let mut masks = vec![0u8; graph.node_count()];
    let mut mark = |i: JobIdx, t: EdgeType| {
        if let Some(m) = masks.get_mut(i) {
            *m |= t.bit();
        }
    };
    for (i, j, co) in graph.edges() {
        for (count, t) in [
            (co.co_clicks, EdgeType::CoClicks),
            (co.co_apps, EdgeType::CoApps),
        ] {
            if count > 0 {
                mark(i, t);
                mark(j, t);
            }
        }
    }
    for (i, j, _) in content.iter() {
        mark(i, EdgeType::Content);
        mark(j, EdgeType::Content);
    }
    let active: BTreeSet<JobIdx> = active.iter().copied().collect();
    let fractions = EdgeTypeSet::all_nonempty()
        .map(|set| {
            let hit = active
                .iter()
                .filter(|&&j| masks.get(j).is_some_and(|m| m & set.0 != 0))
                .count();
            let f = if active.is_empty() {
                0.0
            } else {
                hit as f64 / active.len() as f64
            };
            (set, f)
        })
        .collect();
    ConnectivityReport {
        active_jobs: active.len(),
        fractions,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoldoutSplit {
    pub train: Vec<InteractionEvent>,
    /// Held-out apply events.
    pub test: Vec<InteractionEvent>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("holdout fraction {0} outside (0, 1)")]
    Fraction(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no events to evaluate")]
    NoEvents,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mf(#[from] MfError),
}

/// Holds out the latest `round(fraction * n)` applies of each user, clamped
/// so at least one apply stays in training. Equal timestamps are ordered by a
/// seeded shuffle. A user's non-apply events at or after their first held-out
/// apply are dropped from training.
pub fn holdout_split(
    events: &[InteractionEvent],
    fraction: f64,
    seed: u64,
) -> Result<HoldoutSplit, EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::Fraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut applies: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if e.kind == EventKind::Apply {
            applies.entry(&e.user_id).or_default().push(i);
        }
    }
    let mut held = vec![false; events.len()];
    let mut cutoff: BTreeMap<&str, DateTime<Utc>> = BTreeMap::new();
    for (user, mut idx) in applies {
        let key = |&i: &usize| {
            (
                events[i].timestamp,
                events[i].job_id.clone(),
                events[i].query_id.clone(),
            )
        };
        idx.sort_by_key(key);
        // Shuffle runs of equal timestamps.
        let mut start = 0;
        while start < idx.len() {
            let t = events[idx[start]].timestamp;
            let end = start
                + idx[start..]
                    .iter()
                    .take_while(|&&i| events[i].timestamp == t)
                    .count();
            idx[start..end].shuffle(&mut rng);
            start = end;
        }
        let n = idx.len();
        let hold = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        if hold == 0 {
            continue;
        }
        let first_held = n - hold;
        for &i in &idx[first_held..] {
            held[i] = true;
        }
        cutoff.insert(user, events[idx[first_held]].timestamp);
    }
    let mut split = HoldoutSplit::default();
    for (i, e) in events.iter().enumerate() {
        if held[i] {
            split.test.push(e.clone());
        } else if e.kind == EventKind::Apply
            || cutoff
                .get(e.user_id.as_str())
                .is_none_or(|c| e.timestamp < *c)
        {
            split.train.push(e.clone());
        }
    }
    Ok(split)
}

/// `(precision, recall)` of the first `k` recommendations, or `None` when
/// nothing is held out.
pub fn precision_recall_at_k<S: AsRef<str>>(
    recommended: &[S],
    heldout: &BTreeSet<String>,
    k: usize,
) -> Option<(f64, f64)> {
    if heldout.is_empty() || k == 0 {
        return None;
    }
    let top: HashSet<&str> = recommended.iter().take(k).map(|r| r.as_ref()).collect();
    let hits = top.iter().filter(|r| heldout.contains(**r)).count();
    Some((hits as f64 / k as f64, hits as f64 / heldout.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Gbr,
    Cf,
    Mf,
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Gbr => "gbr",
            System::Cf => "cf",
            System::Mf => "mf",
        }
    }
}

impl FromStr for System {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "gbr" => Ok(System::Gbr),
            "cf" => Ok(System::Cf),
            "mf" => Ok(System::Mf),
            other => Err(format!("unknown system {other:?} (expected gbr, cf or mf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub system: System,
    pub precision: f64,
    pub recall: f64,
    /// Evaluated users who got no recommendation at all.
    pub empty_lists: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub users_evaluated: usize,
    pub systems: Vec<SystemMetrics>,
}

impl EvalReport {
    pub fn metrics(&self, system: System) -> Option<&SystemMetrics> {
        self.systems.iter().find(|m| m.system == system)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "users evaluated: {}\nk: {}\nholdout fraction: {}\nseed: {}\n",
            self.users_evaluated, self.k, self.holdout_fraction, self.seed
        );
        for m in &self.systems {
            out.push_str(&format!(
                "{:<4} precision@{k}={:.4} recall@{k}={:.4} empty={}\n",
                m.system.as_str(),
                m.precision,
                m.recall,
                m.empty_lists,
                k = self.k
            ));
        }
        out
    }
}

/// Inputs shared by every system in one evaluation.
pub struct EvalInputs<'a> {
    pub events: &'a [InteractionEvent],
    pub jobs: &'a JobCatalog,
    pub users: &'a [UserRecord],
    pub embeddings: Option<&'a EmbeddingTable>,
    pub reference: DateTime<Utc>,
}

/// Trained graph artifacts for one event log.
pub struct GraphBuild {
    pub multigraph: JobMultiGraph,
    pub content: ContentEdges,
    pub digraph: crate::scoring::RecDigraph,
}

/// Runs window filtering, co-statistics, content edges and aggregation.
pub fn build_graph(
    events: &[InteractionEvent],
    jobs: &JobCatalog,
    embeddings: Option<&EmbeddingTable>,
    reference: &DateTime<Utc>,
    config: &EngineConfig,
) -> Result<GraphBuild, GraphError> {
    let catalog = jobs.windowed(reference, config.window_days);
    let windowed = window_filter(events, reference, config.window_days);
    let (known, _) = retain_known_jobs(windowed, &catalog);
    let signals = dedupe(&known);
    let options = GraphOptions {
        session_gap: chrono::Duration::minutes(i64::from(config.session_gap_minutes)),
    };
    let multigraph = build_costats(&signals, catalog, &options)?;
    let content = match embeddings {
        Some(table) => content_edges(
            multigraph.catalog(),
            table,
            config.weights.gamma,
            config.category_blocking,
        ),
        None => ContentEdges::default(),
    };
    let digraph = aggregate(&multigraph, &content, &config.weights);
    Ok(GraphBuild {
        multigraph,
        content,
        digraph,
    })
}

/// Splits `inputs.events`, trains every requested system on the training
/// part and scores each on the held-out applies of users that have any.
pub fn evaluate(
    inputs: &EvalInputs<'_>,
    config: &EngineConfig,
    systems: &[System],
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let k = config.eval.k;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if inputs.events.is_empty() {
        return Err(EvalError::NoEvents);
    }
    let reference = inputs.reference;
    let split = holdout_split(inputs.events, config.eval.holdout_fraction, seed)?;
    let profiles = build_profiles(inputs.users, &split.train, &reference, config.window_days);

    let mut heldout: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for e in &split.test {
        heldout
            .entry(&e.user_id)
            .or_default()
            .insert(e.job_id.clone());
    }
    // Jobs already applied to in training are not fresh predictions.
    let train_applied: HashSet<(&str, &str)> = split
        .train
        .iter()
        .filter(|e| e.kind == EventKind::Apply)
        .map(|e| (e.user_id.as_str(), e.job_id.as_str()))
        .collect();
    for (user, jobs) in heldout.iter_mut() {
        jobs.retain(|j| !train_applied.contains(&(*user, j.as_str())));
    }
    heldout.retain(|_, jobs| !jobs.is_empty());
    let users: Vec<&str> = heldout.keys().copied().collect();

    let is_active = |id: &str| inputs.jobs.get(id).is_some_and(|j| j.is_active());
    let history = |user: &str| -> HashSet<&str> {
        profiles
            .get(user)
            .map(|p| p.history().into_iter().collect())
            .unwrap_or_default()
    };

    let mut per_system: Vec<(System, Vec<Vec<String>>)> = Vec::new();
    for &system in systems {
        let lists: Vec<Vec<String>> = match system {
            System::Gbr => {
                let build = build_graph(
                    &split.train,
                    inputs.jobs,
                    inputs.embeddings,
                    &reference,
                    config,
                )?;
                let mut params = config.recommend;
                params.k = k;
                params.min_recs = Some(params.min_recs().min(k));
                let recommender =
                    Recommender::new(&build.digraph, inputs.embeddings, params, reference);
                users
                    .par_iter()
                    .map(|u| match profiles.get(*u) {
                        Some(p) => recommender
                            .recommend(p)
                            .entries
                            .into_iter()
                            .map(|e| e.job_id)
                            .collect(),
                        None => Vec::new(),
                    })
                    .collect()
            }
            System::Cf => {
                let index = CfIndex::new(&split.train, &reference, config.window_days, config.cf);
                users
                    .par_iter()
                    .map(|u| {
                        let exclude = history(u);
                        index
                            .recommend(u, k, &exclude, is_active)
                            .into_iter()
                            .map(|(j, _)| j)
                            .collect()
                    })
                    .collect()
            }
            System::Mf => {
                let windowed = window_filter(&split.train, &reference, config.window_days);
                let signals = dedupe(&windowed);
                let matrix = build_matrix(&signals);
                if matrix.is_empty() {
                    vec![Vec::new(); users.len()]
                } else {
                    let sets = implicit_sets(&matrix, &signals);
                    let (model, _) = als_train(&matrix, &config.mf, Some(&sets), seed)?;
                    users
                        .par_iter()
                        .map(|u| {
                            let exclude = history(u);
                            let implicit: Vec<&str> =
                                match (config.mf.implicit, model.user_index(u)) {
                                    (true, Some(ui)) => sets[ui]
                                        .iter()
                                        .map(|&j| matrix.jobs()[j].as_str())
                                        .collect(),
                                    _ => Vec::new(),
                                };
                            model
                                .recommend(u, k, &exclude, &implicit, is_active)
                                .map(|recs| recs.into_iter().map(|(j, _)| j).collect())
                                .unwrap_or_default()
                        })
                        .collect()
                }
            }
        };
        per_system.push((system, lists));
    }

    let systems = per_system
        .into_iter()
        .map(|(system, lists)| {
            let (mut p, mut r, mut empty) = (0.0, 0.0, 0);
            for (u, list) in users.iter().zip(&lists) {
                let (pu, ru) =
                    precision_recall_at_k(list, &heldout[u], k).expect("heldout nonempty");
                p += pu;
                r += ru;
                empty += usize::from(list.is_empty());
            }
            let n = users.len().max(1) as f64;
            SystemMetrics {
                system,
                precision: p / n,
                recall: r / n,
                empty_lists: empty,
            }
        })
        .collect();
    Ok(EvalReport {
        k,
        holdout_fraction: config.eval.holdout_fraction,
        seed,
        users_evaluated: users.len(),
        systems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::JobCatalog;
    use crate::graph::GraphOptions;
    use crate::ingest::{JobRecord, JobStatus};
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;
    use rand::Rng;

    fn reference() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 7, 1, 0, 0, 0).unwrap()
    }

    fn ev(u: &str, j: &str, kind: EventKind, day: i64) -> InteractionEvent {
        InteractionEvent {
            user_id: u.into(),
            job_id: j.into(),
            kind,
            timestamp: reference() - Duration::days(100) + Duration::days(day),
            query_id: None,
        }
    }

    fn catalog(n: usize) -> JobCatalog {
        JobCatalog::new((0..n).map(|i| JobRecord {
            job_id: format!("j{i:02}"),
            title: String::new(),
            category: "c".into(),
            location: None,
            posted_at: reference() - Duration::days(30),
            status: JobStatus::Active,
        }))
    }

    fn graph_from(n: usize, events: &[InteractionEvent]) -> JobMultiGraph {
        build_costats(&dedupe(events), catalog(n), &GraphOptions::default()).unwrap()
    }

    #[test]
    fn empty_graph_has_zero_connectivity() {
        let g = graph_from(4, &[]);
        let r = connectivity_report(&g, &ContentEdges::default(), &[0, 1, 2, 3]);
        assert_eq!(r.fractions.len(), 7);
        assert!(r.fractions.values().all(|&f| f == 0.0));
    }

    #[test]
    fn content_pairs_connect_everything() {
        let g = graph_from(4, &[]);
        let mut table = EmbeddingTable::default();
        for i in 0..4 {
            table
                .insert(format!("j{i:02}"), vec![1.0, 0.1 * i as f64])
                .unwrap();
        }
        let content = content_edges(g.catalog(), &table, 0.4, false);
        let r = connectivity_report(&g, &content, &[0, 1, 2, 3]);
        assert_eq!(r.fraction(&[EdgeType::Content]), 1.0);
        assert_eq!(r.fraction(&[EdgeType::CoApps]), 0.0);
    }

    #[test]
    fn connectivity_matches_incidence_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 25;
            let mut events = Vec::new();
            for u in 0..15 {
                for _ in 0..rng.random_range(0..4) {
                    let kind = if rng.random_bool(0.5) {
                        EventKind::Apply
                    } else {
                        EventKind::Click
                    };
                    events.push(ev(
                        &format!("u{u}"),
                        &format!("j{:02}", rng.random_range(0..n)),
                        kind,
                        1,
                    ));
                }
            }
            let g = graph_from(n, &events);
            let mut table = EmbeddingTable::default();
            for i in 0..n {
                if rng.random_bool(0.5) {
                    table
                        .insert(
                            format!("j{i:02}"),
                            vec![rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)],
                        )
                        .unwrap();
                }
            }
            let content = content_edges(g.catalog(), &table, 0.95, false);
            let active: Vec<JobIdx> = (0..n).filter(|_| rng.random_bool(0.8)).collect();
            let report = connectivity_report(&g, &content, &active);
            for set in EdgeTypeSet::all_nonempty() {
                let connected = active
                    .iter()
                    .filter(|&&a| {
                        (0..n).any(|b| {
                            if a == b {
                                return false;
                            }
                            let co = g.costats(a, b);
                            (set.contains(EdgeType::CoClicks) && co.co_clicks > 0)
                                || (set.contains(EdgeType::CoApps) && co.co_apps > 0)
                                || (set.contains(EdgeType::Content) && content.get(a, b).is_some())
                        })
                    })
                    .count();
                let expected = if active.is_empty() {
                    0.0
                } else {
                    connected as f64 / active.len() as f64
                };
                assert_eq!(report.fractions[&set], expected);
            }
            for s in EdgeTypeSet::all_nonempty() {
                for t in EdgeTypeSet::all_nonempty() {
                    if s.is_subset_of(t) {
                        assert!(report.fractions[&s] <= report.fractions[&t]);
                    }
                }
            }
        }
    }

    #[test]
    fn holdout_last_half() {
        let events: Vec<_> = (0..4)
            .map(|d| ev("u", &format!("j{d}"), EventKind::Apply, d))
            .collect();
        let split = holdout_split(&events, 0.5, 1).unwrap();
        assert_eq!(
            split
                .test
                .iter()
                .map(|e| e.job_id.as_str())
                .collect::<Vec<_>>(),
            vec!["j2", "j3"]
        );
        assert_eq!(split.train.len(), 2);
    }

    #[test]
    fn single_apply_stays_in_train() {
        let events = vec![
            ev("u", "a", EventKind::Apply, 0),
            ev("u", "b", EventKind::Click, 1),
        ];
        let split = holdout_split(&events, 0.9, 1).unwrap();
        assert!(split.test.is_empty());
        assert_eq!(split.train, events);
        assert!(holdout_split(&events, 1.0, 1).is_err());
        assert!(holdout_split(&events, 0.0, 1).is_err());
    }

    #[test]
    fn later_non_applies_leave_train() {
        let events = vec![
            ev("u", "a", EventKind::Apply, 0),
            ev("u", "b", EventKind::Apply, 5),
            ev("u", "c", EventKind::Click, 6),
            ev("u", "d", EventKind::Click, 2),
        ];
        let split = holdout_split(&events, 0.5, 1).unwrap();
        assert_eq!(split.test.len(), 1);
        assert_eq!(
            split
                .train
                .iter()
                .map(|e| e.job_id.as_str())
                .collect::<Vec<_>>(),
            vec!["a", "d"]
        );
    }

    #[test]
    fn tie_order_is_seeded() {
        let events: Vec<_> = (0..6)
            .map(|d| ev("u", &format!("j{d}"), EventKind::Apply, 0))
            .collect();
        let a = holdout_split(&events, 0.5, 3).unwrap();
        let b = holdout_split(&events, 0.5, 3).unwrap();
        assert_eq!(a, b);
        let differs = (0..20).any(|s| holdout_split(&events, 0.5, s).unwrap().test != a.test);
        assert!(differs);
    }

    fn split_oracle(
        events: &[InteractionEvent],
        fraction: f64,
    ) -> BTreeMap<String, (usize, usize)> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in events.iter().filter(|e| e.kind == EventKind::Apply) {
            *counts.entry(e.user_id.clone()).or_default() += 1;
        }
        counts
            .into_iter()
            .map(|(u, n)| {
                let hold = ((fraction * n as f64).round() as usize).min(n - 1);
                (u, (n - hold, hold))
            })
            .collect()
    }

    #[test]
    fn per_user_counts_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let events: Vec<_> = (0..400)
            .map(|_| {
                let kind = if rng.random_bool(0.7) {
                    EventKind::Apply
                } else {
                    EventKind::Click
                };
                ev(
                    &format!("u{}", rng.random_range(0..40)),
                    &format!("j{}", rng.random_range(0..30)),
                    kind,
                    rng.random_range(0..90),
                )
            })
            .collect();
        for fraction in [0.1, 0.3, 0.5, 0.8] {
            let split = holdout_split(&events, fraction, 2).unwrap();
            let mut got: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for e in split.train.iter().filter(|e| e.kind == EventKind::Apply) {
                got.entry(e.user_id.clone()).or_default().0 += 1;
            }
            for e in &split.test {
                got.entry(e.user_id.clone()).or_default().1 += 1;
            }
            assert_eq!(got, split_oracle(&events, fraction));
            // held-out applies are each user's latest
            for e in &split.test {
                let latest_train = split
                    .train
                    .iter()
                    .filter(|t| t.kind == EventKind::Apply && t.user_id == e.user_id)
                    .map(|t| t.timestamp)
                    .max()
                    .unwrap();
                assert!(latest_train <= e.timestamp);
            }
        }
    }

    proptest! {
        #[test]
        fn holdout_partitions_applies(
            raw in proptest::collection::vec((0u8..6, 0u8..10, 0u8..3, 0i64..60), 0..80),
            fraction in 0.05f64..0.95,
            seed in 0u64..100,
        ) {
            let kinds = [EventKind::Apply, EventKind::Click, EventKind::EmailOpenNoClick];
            let events: Vec<_> = raw
                .iter()
                .map(|&(u, j, k, d)| ev(&format!("u{u}"), &format!("j{j}"), kinds[k as usize], d))
                .collect();
            let split = holdout_split(&events, fraction, seed).unwrap();
            let mut input: Vec<_> = events.iter().filter(|e| e.kind == EventKind::Apply).cloned().collect();
            let mut output: Vec<_> = split
                .train
                .iter()
                .filter(|e| e.kind == EventKind::Apply)
                .chain(&split.test)
                .cloned()
                .collect();
            let key = |e: &InteractionEvent| (e.user_id.clone(), e.job_id.clone(), e.timestamp);
            input.sort_by_key(key);
            output.sort_by_key(key);
            prop_assert_eq!(input, output);
            prop_assert!(split.test.iter().all(|e| e.kind == EventKind::Apply));
        }

        #[test]
        fn metrics_bounded(recs in proptest::collection::vec(0u8..20, 0..15), held in proptest::collection::btree_set(0u8..20, 1..8), k in 1usize..12) {
            let recs: Vec<String> = recs.iter().map(|r| r.to_string()).collect();
            let held: BTreeSet<String> = held.iter().map(|h| h.to_string()).collect();
            let (p, r) = precision_recall_at_k(&recs, &held, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
            let top: BTreeSet<&String> = recs.iter().take(k).collect();
            let overlap = top.iter().filter(|x| held.contains(x.as_str())).count();
            prop_assert_eq!((p * k as f64).round() as usize, overlap);
        }
    }

    #[test]
    fn precision_recall_cases() {
        let held: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            precision_recall_at_k(&["a", "b", "c"], &held, 3),
            Some((1.0, 1.0))
        );
        assert_eq!(
            precision_recall_at_k(&["x", "y"], &held, 3),
            Some((0.0, 0.0))
        );
        let held4: BTreeSet<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let recs = [
            "a", "x1", "x2", "b", "x3", "x4", "x5", "x6", "x7", "x8", "c",
        ];
        assert_eq!(precision_recall_at_k(&recs, &held4, 10), Some((0.2, 0.5)));
        assert_eq!(precision_recall_at_k(&recs, &BTreeSet::new(), 10), None);
    }

    #[test]
    fn cf_on_clean_corpus_stays_in_cluster() {
        let corpus = synth::synth_corpus(&synth::SynthParams {
            clusters: 3,
            jobs_per_cluster: 30,
            users: 120,
            noise: 0.0,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let category: BTreeMap<&str, &str> = corpus
            .jobs
            .iter()
            .map(|j| (j.job_id.as_str(), j.category.as_str()))
            .collect();
        let index = CfIndex::new(
            &corpus.events,
            &corpus.reference,
            180,
            cf::CfParams::default(),
        );
        for (user, home) in &corpus.user_clusters {
            for (job, _) in index.recommend(user, 15, &HashSet::new(), |_| true) {
                assert_eq!(category[job.as_str()], home.as_str());
            }
        }
    }

    #[test]
    fn evaluate_runs_all_systems() {
        let corpus = synth::synth_corpus(&synth::SynthParams {
            clusters: 3,
            jobs_per_cluster: 40,
            users: 200,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let catalog = JobCatalog::new(corpus.jobs.clone());
        let inputs = EvalInputs {
            events: &corpus.events,
            jobs: &catalog,
            users: &corpus.users,
            embeddings: Some(&corpus.embeddings),
            reference: corpus.reference,
        };
        let mut config = EngineConfig::default();
        config.mf.k = 4;
        let report = evaluate(&inputs, &config, &[System::Gbr, System::Cf, System::Mf], 3).unwrap();
        assert!(report.users_evaluated > 50);
        assert_eq!(report.systems.len(), 3);
        for m in &report.systems {
            assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
        }
        let again = evaluate(&inputs, &config, &[System::Gbr, System::Cf, System::Mf], 3).unwrap();
        assert_eq!(report, again);
    }
}
