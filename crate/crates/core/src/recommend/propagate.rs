//! One- and two-hop propagation from a user's source jobs.
//!
//! A level-1 candidate `j` scores `max_s activity(s) * corr(s -> j)`. Level 2
//! extends each level-1 job `m` with path score `p_m` to its successors,
//! scoring `p_m * corr(m -> j)` and keeping the best path per job.

use std::collections::{BTreeMap, HashSet};

use crate::catalog::JobIdx;
use crate::scoring::{RecDigraph, ScoredEdge};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub job: JobIdx,
    pub score: f64,
}

/// Orders by score descending, then job index (job id) ascending.
pub fn rank(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.job.cmp(&b.job)));
}

fn merge_max(best: &mut BTreeMap<JobIdx, f64>, job: JobIdx, score: f64) {
    best.entry(job)
        .and_modify(|s| {
            if score > *s {
                *s = score
            }
        })
        .or_insert(score);
}

fn top_k(best: BTreeMap<JobIdx, f64>, k: usize) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = best
        .into_iter()
        .map(|(job, score)| Candidate { job, score })
        .collect();
    rank(&mut out);
    out.truncate(k);
    out
}

/// Direct recommendations of `sources` (`(job, activity)` pairs). Sources and
/// `exclude` never appear in the output.
pub fn level1(
    digraph: &RecDigraph,
    sources: &[(JobIdx, f64)],
    exclude: &HashSet<JobIdx>,
    k: usize,
) -> Vec<Candidate> {
    let source_set: HashSet<JobIdx> = sources.iter().map(|&(s, _)| s).collect();
    let mut best = BTreeMap::new();
    for &(s, activity) in sources {
        for e in digraph.out_edges(s) {
            if !source_set.contains(&e.dst) && !exclude.contains(&e.dst) {
                merge_max(&mut best, e.dst, activity * e.score.corr);
            }
        }
    }
    top_k(best, k)
}

/// Second-hop recommendations through the level-1 jobs. With `fanout`, only
/// each intermediate's strongest `fanout` edges are followed.
pub fn level2(
    digraph: &RecDigraph,
    level1: &[Candidate],
    exclude: &HashSet<JobIdx>,
    k: usize,
    fanout: Option<usize>,
) -> Vec<Candidate> {
    let first: HashSet<JobIdx> = level1.iter().map(|c| c.job).collect();
    let mut best = BTreeMap::new();
    for m in level1 {
        let mut edges: Vec<&ScoredEdge> = digraph.out_edges(m.job).iter().collect();
        if let Some(f) = fanout {
            edges.sort_by(|a, b| {
                b.score
                    .corr
                    .total_cmp(&a.score.corr)
                    .then(a.dst.cmp(&b.dst))
            });
            edges.truncate(f);
        }
        for e in edges {
            if !first.contains(&e.dst) && !exclude.contains(&e.dst) {
                merge_max(&mut best, e.dst, m.score * e.score.corr);
            }
        }
    }
    top_k(best, k)
}
