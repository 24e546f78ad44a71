//! Classic co-application baseline.
//!
//! Every job keeps its most recent `applicants` distinct appliers. A user is
//! matched to the appliers of the jobs they applied to, and the jobs those
//! appliers applied to within the window are ranked by recency-weighted
//! frequency. An applier met through several of the user's jobs counts once
//! per shared job.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ingest::{in_window, EventKind, InteractionEvent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfParams {
    /// Appliers remembered per job.
    pub applicants: usize,
    /// Per-day decay of an applier's apply when counting it.
    pub recency_lambda: f64,
}

impl Default for CfParams {
    fn default() -> Self {
        CfParams {
            applicants: 50,
            recency_lambda: 0.05,
        }
    }
}

/// Precomputed applier lists over one event log.
#[derive(Debug, Clone, Default)]
pub struct CfIndex {
    params: CfParams,
    /// Job -> appliers, most recent first.
    applicants: HashMap<String, Vec<String>>,
    /// User -> (job, age in days of the latest apply), by job id.
    applies: HashMap<String, Vec<(String, f64)>>,
}

impl CfIndex {
    /// Indexes apply events within `window_days` of `reference`.
    pub fn new(
        events: &[InteractionEvent],
        reference: &DateTime<Utc>,
        window_days: u32,
        params: CfParams,
    ) -> Self {
        let mut latest: BTreeMap<(&str, &str), DateTime<Utc>> = BTreeMap::new();
        for e in events {
            if e.kind == EventKind::Apply && in_window(&e.timestamp, reference, window_days) {
                let slot = latest.entry((&e.user_id, &e.job_id)).or_insert(e.timestamp);
                *slot = (*slot).max(e.timestamp);
            }
        }
        let mut by_job: BTreeMap<&str, Vec<(DateTime<Utc>, &str)>> = BTreeMap::new();
        let mut applies: HashMap<String, Vec<(String, f64)>> = HashMap::new();
        for (&(user, job), &ts) in &latest {
            by_job.entry(job).or_default().push((ts, user));
            let age = (*reference - ts).num_milliseconds() as f64 / 86_400_000.0;
            applies
                .entry(user.to_string())
                .or_default()
                .push((job.to_string(), age));
        }
        let applicants = by_job
            .into_iter()
            .map(|(job, mut list)| {
                list.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
                list.truncate(params.applicants);
                (
                    job.to_string(),
                    list.into_iter().map(|(_, u)| u.to_string()).collect(),
                )
            })
            .collect();
        CfIndex {
            params,
            applicants,
            applies,
        }
    }

    pub fn applicants(&self, job: &str) -> &[String] {
        self.applicants.get(job).map_or(&[], Vec::as_slice)
    }

    /// Top-`k` jobs for `user`, skipping the user's own applies, `exclude`,
    /// and jobs failing `eligible`. Ties order by job id.
    pub fn recommend(
        &self,
        user: &str,
        k: usize,
        exclude: &HashSet<&str>,
        eligible: impl Fn(&str) -> bool,
    ) -> Vec<(String, f64)> {
        let Some(own) = self.applies.get(user) else {
            return Vec::new();
        };
        let own_jobs: HashSet<&str> = own.iter().map(|(j, _)| j.as_str()).collect();
        let mut weight: BTreeMap<&str, f64> = BTreeMap::new();
        for (job, _) in own {
            for a in self.applicants(job) {
                if a != user {
                    *weight.entry(a).or_default() += 1.0;
                }
            }
        }
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for (a, w) in weight {
            for (job, age) in &self.applies[a] {
                let job = job.as_str();
                if own_jobs.contains(job) || exclude.contains(job) || !eligible(job) {
                    continue;
                }
                *scores.entry(job).or_default() += w * (-self.params.recency_lambda * age).exp();
            }
        }
        let mut ranked: Vec<(String, f64)> = scores
            .into_iter()
            .map(|(j, s)| (j.to_string(), s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// One-shot form of [`CfIndex::recommend`] over `events`.
pub fn classic_cf(
    events: &[InteractionEvent],
    user: &str,
    k: usize,
    reference: &DateTime<Utc>,
    window_days: u32,
    params: CfParams,
) -> Vec<(String, f64)> {
    CfIndex::new(events, reference, window_days, params)
        .recommend(user, k, &HashSet::new(), |_| true)
}
