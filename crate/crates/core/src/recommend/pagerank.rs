//! Power-iteration PageRank over the active part of a [`RecDigraph`].
//!
//! Transition weights are the aggregate scores clamped at zero and
//! row-normalized. Nodes without positive out-weight are dangling: their mass
//! is redistributed along the restart distribution.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::catalog::JobIdx;
use crate::scoring::RecDigraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PageRankParams {
    pub damping: f64,
    /// Stop once the L1 change between iterates drops below this.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for PageRankParams {
    fn default() -> Self {
        PageRankParams {
            damping: 0.85,
            epsilon: 1e-10,
            max_iters: 100,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PageRankError {
    #[error("damping {0} outside (0, 1)")]
    Damping(f64),
    #[error("graph has no active jobs")]
    EmptyGraph,
    #[error("no preference job is an active node of the graph")]
    NoPreferenceInGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRankRun {
    /// `(job, score)` ordered by job index.
    pub scores: Vec<(JobIdx, f64)>,
    pub iterations: usize,
    pub l1_delta: f64,
    pub converged: bool,
}

impl PageRankRun {
    pub fn score_of(&self, job: JobIdx) -> Option<f64> {
        self.scores
            .binary_search_by_key(&job, |&(j, _)| j)
            .ok()
            .map(|k| self.scores[k].1)
    }
}

/// PageRank with a uniform restart over all active jobs.
pub fn global_pagerank(
    digraph: &RecDigraph,
    params: &PageRankParams,
) -> Result<PageRankRun, PageRankError> {
    let nodes = digraph.catalog().active_indices();
    if nodes.is_empty() {
        return Err(PageRankError::EmptyGraph);
    }
    let restart = vec![1.0 / nodes.len() as f64; nodes.len()];
    power_iterate(digraph, &nodes, &restart, params)
}

/// PageRank restarting uniformly over the active members of `preference`.
///
/// The walk runs on the preference jobs plus everything reachable from them
/// over positive edges. With `scope`, traversal only enters jobs of that
/// category (preference jobs are always kept).
pub fn personalized_pagerank(
    digraph: &RecDigraph,
    preference: &[JobIdx],
    params: &PageRankParams,
    scope: Option<&str>,
) -> Result<PageRankRun, PageRankError> {
    let catalog = digraph.catalog();
    let seeds: BTreeSet<JobIdx> = preference
        .iter()
        .copied()
        .filter(|&j| j < catalog.len() && catalog.is_active(j))
        .collect();
    if seeds.is_empty() {
        return Err(PageRankError::NoPreferenceInGraph);
    }
    let mut members = seeds.clone();
    let mut queue: VecDeque<JobIdx> = seeds.iter().copied().collect();
    while let Some(u) = queue.pop_front() {
        for e in digraph.out_edges(u) {
            if e.score.corr <= 0.0 || members.contains(&e.dst) {
                continue;
            }
            if scope.is_some_and(|c| catalog.job(e.dst).category != c) {
                continue;
            }
            members.insert(e.dst);
            queue.push_back(e.dst);
        }
    }
    let nodes: Vec<JobIdx> = members.into_iter().collect();
    let share = 1.0 / seeds.len() as f64;
    let restart: Vec<f64> = nodes
        .iter()
        .map(|j| if seeds.contains(j) { share } else { 0.0 })
        .collect();
    power_iterate(digraph, &nodes, &restart, params)
}

fn power_iterate(
    digraph: &RecDigraph,
    nodes: &[JobIdx],
    restart: &[f64],
    params: &PageRankParams,
) -> Result<PageRankRun, PageRankError> {
    let d = params.damping;
    if !(d > 0.0 && d < 1.0) {
        return Err(PageRankError::Damping(d));
    }
    let n = nodes.len();
    let local = |j: JobIdx| nodes.binary_search(&j).ok();

    // Row-normalized sparse transitions in local indices.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for &u in nodes {
        let mut row: Vec<(usize, f64)> = digraph
            .out_edges(u)
            .iter()
            .filter(|e| e.score.corr > 0.0)
            .filter_map(|e| local(e.dst).map(|v| (v, e.score.corr)))
            .collect();
        let total: f64 = row.iter().map(|&(_, w)| w).sum();
        for entry in &mut row {
            entry.1 /= total;
        }
        rows.push(row);
    }

    let mut x = restart.to_vec();
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut l1_delta = f64::INFINITY;
    let mut converged = false;
    while iterations < params.max_iters {
        iterations += 1;
        let dangling: f64 = rows
            .iter()
            .zip(&x)
            .filter(|(r, _)| r.is_empty())
            .map(|(_, &xi)| xi)
            .sum();
        for (v, slot) in next.iter_mut().enumerate() {
            *slot = (1.0 - d + d * dangling) * restart[v];
        }
        for (u, row) in rows.iter().enumerate() {
            let mass = d * x[u];
            for &(v, p) in row {
                next[v] += mass * p;
            }
        }
        l1_delta = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if l1_delta < params.epsilon {
            converged = true;
            break;
        }
    }
    let total: f64 = x.iter().sum();
    Ok(PageRankRun {
        scores: nodes
            .iter()
            .zip(&x)
            .map(|(&j, &s)| (j, s / total))
            .collect(),
        iterations,
        l1_delta,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::JobCatalog;
    use crate::ingest::{JobRecord, JobStatus};
    use crate::scoring::EdgeScore;
    use chrono::{TimeZone, Utc};

    fn catalog(n: usize, expired: &[usize]) -> JobCatalog {
        JobCatalog::new((0..n).map(|i| JobRecord {
            job_id: format!("j{i:02}"),
            title: String::new(),
            category: if i % 2 == 0 {
                "even".into()
            } else {
                "odd".into()
            },
            location: None,
            posted_at: Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap(),
            status: if expired.contains(&i) {
                JobStatus::Expired
            } else {
                JobStatus::Active
            },
        }))
    }

    fn digraph(n: usize, edges: &[(usize, usize, f64)]) -> RecDigraph {
        RecDigraph::from_edges(
            catalog(n, &[]),
            edges.iter().map(|&(s, d, w)| (s, d, EdgeScore::bare(w))),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_pair_is_uniform() {
        let g = digraph(2, &[(0, 1, 0.7), (1, 0, 0.7)]);
        let run = global_pagerank(&g, &PageRankParams::default()).unwrap();
        assert!(run.converged);
        for (_, s) in &run.scores {
            assert!((s - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node() {
        let g = digraph(1, &[]);
        let run = global_pagerank(&g, &PageRankParams::default()).unwrap();
        assert_eq!(run.scores, vec![(0, 1.0)]);
    }

    #[test]
    fn single_preference_without_out_edges_keeps_all_mass() {
        let g = digraph(3, &[(1, 0, 1.0), (2, 1, 1.0)]);
        let run = personalized_pagerank(&g, &[0], &PageRankParams::default(), None).unwrap();
        assert_eq!(run.scores.len(), 1);
        assert!((run.scores[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_preference_equals_global() {
        let g = digraph(
            4,
            &[
                (0, 1, 0.5),
                (1, 2, 0.2),
                (2, 0, 0.9),
                (3, 0, 0.4),
                (0, 3, 0.1),
            ],
        );
        let p = PageRankParams::default();
        let global = global_pagerank(&g, &p).unwrap();
        let pers = personalized_pagerank(&g, &[0, 1, 2, 3], &p, None).unwrap();
        for ((a, x), (b, y)) in global.scores.iter().zip(&pers.scores) {
            assert_eq!(a, b);
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_edges_are_ignored_for_transitions() {
        let with_neg = digraph(3, &[(0, 1, 0.5), (0, 2, -3.0), (1, 0, 0.5)]);
        let without = digraph(3, &[(0, 1, 0.5), (1, 0, 0.5)]);
        let p = PageRankParams::default();
        assert_eq!(
            global_pagerank(&with_neg, &p).unwrap().scores,
            global_pagerank(&without, &p).unwrap().scores
        );
    }

    #[test]
    fn expired_nodes_are_excluded() {
        let cat = catalog(3, &[2]);
        let g = RecDigraph::from_edges(
            cat,
            [(2, 0, EdgeScore::bare(1.0)), (0, 1, EdgeScore::bare(1.0))],
        )
        .unwrap();
        let run = global_pagerank(&g, &PageRankParams::default()).unwrap();
        assert_eq!(
            run.scores.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert!(personalized_pagerank(&g, &[2], &PageRankParams::default(), None).is_err());
    }

    #[test]
    fn scope_limits_closure() {
        // 0 (even) -> 1 (odd) -> 2 (even)
        let g = digraph(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]);
        let run =
            personalized_pagerank(&g, &[0], &PageRankParams::default(), Some("even")).unwrap();
        assert_eq!(
            run.scores.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![0, 2]
        );
    }

    #[test]
    fn errors() {
        let g = digraph(2, &[]);
        let bad = PageRankParams {
            damping: 1.0,
            ..Default::default()
        };
        assert_eq!(global_pagerank(&g, &bad), Err(PageRankError::Damping(1.0)));
        assert_eq!(
            personalized_pagerank(&g, &[7], &PageRankParams::default(), None),
            Err(PageRankError::NoPreferenceInGraph)
        );
        let empty = RecDigraph::from_edges(catalog(1, &[0]), []).unwrap();
        assert_eq!(
            global_pagerank(&empty, &PageRankParams::default()),
            Err(PageRankError::EmptyGraph)
        );
    }

    #[test]
    fn non_convergence_is_flagged() {
        let g = digraph(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0), (0, 2, 0.1)]);
        let p = PageRankParams {
            max_iters: 2,
            ..Default::default()
        };
        let run = global_pagerank(&g, &p).unwrap();
        assert!(!run.converged);
        assert_eq!(run.iterations, 2);
        let sum: f64 = run.scores.iter().map(|s| s.1).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
