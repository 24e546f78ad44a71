//! User classification and the per-user recommendation pipeline.
//!
//! * Active users (an apply or click inside the window): level-1 propagation
//!   from their source jobs, re-ranked by recency; level-2 propagation when
//!   short; personalized PageRank when still short.
//! * Passive or new users with a resume category: personalized PageRank seeded
//!   by their preference jobs.
//! * Anonymous users: global PageRank.
//!
//! Entries are grouped in provenance tiers (level 1, level 2, personalized
//! PageRank, global PageRank), each sorted by score and location re-ranked.

pub mod pagerank;
pub mod propagate;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::{JobCatalog, JobIdx};
use crate::ingest::{in_window, EmbeddingTable, EventKind, GeoPoint, InteractionEvent, UserRecord};
use crate::scoring::{embed_sim, RecDigraph};

pub use pagerank::{
    global_pagerank, personalized_pagerank, PageRankError, PageRankParams, PageRankRun,
};
pub use propagate::{level1, level2, rank, Candidate};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RecommendError {
    #[error("negative interaction age {0}")]
    NegativeAge(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub job_id: String,
    pub kind: EventKind,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserProfile {
    pub user_id: String,
    /// Interactions inside the recency window.
    pub interactions: Vec<Interaction>,
    /// Jobs applied to or clicked before the window opened.
    pub prior_jobs: Vec<String>,
    pub resume_category: Option<String>,
    pub location: Option<GeoPoint>,
}

impl UserProfile {
    /// Every job the user touched, in or before the window.
    pub fn history(&self) -> BTreeSet<&str> {
        self.interactions
            .iter()
            .map(|i| i.job_id.as_str())
            .chain(self.prior_jobs.iter().map(String::as_str))
            .collect()
    }
}

/// Builds a profile for every user in `users` or `events`, ordered by id.
/// Events after `reference` are ignored.
pub fn build_profiles(
    users: &[UserRecord],
    events: &[InteractionEvent],
    reference: &DateTime<Utc>,
    window_days: u32,
) -> BTreeMap<String, UserProfile> {
    let mut out: BTreeMap<String, UserProfile> = BTreeMap::new();
    for u in users {
        out.insert(
            u.user_id.clone(),
            UserProfile {
                user_id: u.user_id.clone(),
                resume_category: u.resume_category.clone(),
                location: u.location,
                ..Default::default()
            },
        );
    }
    for e in events {
        if e.timestamp > *reference {
            continue;
        }
        let p = out.entry(e.user_id.clone()).or_insert_with(|| UserProfile {
            user_id: e.user_id.clone(),
            ..Default::default()
        });
        if in_window(&e.timestamp, reference, window_days) {
            p.interactions.push(Interaction {
                job_id: e.job_id.clone(),
                kind: e.kind,
                timestamp: e.timestamp,
            });
        } else if e.kind.is_engagement() {
            p.prior_jobs.push(e.job_id.clone());
        }
    }
    for p in out.values_mut() {
        p.interactions.sort_by(|a, b| {
            (a.timestamp, &a.job_id, a.kind).cmp(&(b.timestamp, &b.job_id, b.kind))
        });
        p.prior_jobs.sort();
        p.prior_jobs.dedup();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserType {
    Active,
    PassiveOrNewWithProfile,
    Anonymous,
}

pub fn classify_user(profile: &UserProfile) -> UserType {
    if profile.interactions.iter().any(|i| i.kind.is_engagement()) {
        UserType::Active
    } else if profile.resume_category.is_some() {
        UserType::PassiveOrNewWithProfile
    } else {
        UserType::Anonymous
    }
}

/// Recency weight `exp(-lambda * age_days)`.
pub fn activity_score(age_days: f64, lambda: f64) -> Result<f64, RecommendError> {
    if age_days < 0.0 || age_days.is_nan() {
        return Err(RecommendError::NegativeAge(age_days));
    }
    Ok((-lambda * age_days).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Level1,
    Level2,
    PersonalizedPR,
    GlobalPR,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Level1 => "level1",
            Provenance::Level2 => "level2",
            Provenance::PersonalizedPR => "personalized_pr",
            Provenance::GlobalPR => "global_pr",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub job: JobIdx,
    pub job_id: String,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationList {
    pub user_id: String,
    pub user_type: UserType,
    pub entries: Vec<Recommendation>,
    pub diagnostics: Vec<String>,
}

impl RecommendationList {
    pub fn job_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.job_id.as_str()).collect()
    }
}

/// Multiplies in-radius scores by `boost` (dividing negative ones, so the
/// boost always favors) and stably re-sorts by score. Candidates are never
/// added or removed.
pub fn location_rerank(
    candidates: &mut [Recommendation],
    catalog: &JobCatalog,
    user_location: Option<GeoPoint>,
    radius_km: f64,
    boost: f64,
) {
    let Some(home) = user_location else { return };
    for c in candidates.iter_mut() {
        let near = catalog
            .job(c.job)
            .location
            .is_some_and(|p| p.distance_km(&home) <= radius_km);
        if near {
            c.score = if c.score >= 0.0 {
                c.score * boost
            } else {
                c.score / boost
            };
        }
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Seed jobs for personalized PageRank: for every expired job in the user's
/// history, its `per_expired` most similar active jobs by embedding; plus all
/// active jobs in the resume category.
pub fn preference_vector(
    profile: &UserProfile,
    digraph: &RecDigraph,
    embeddings: Option<&EmbeddingTable>,
    per_expired: usize,
) -> Vec<JobIdx> {
    let catalog = digraph.catalog();
    let mut prefs = BTreeSet::new();

    if let Some(table) = embeddings {
        let actives: Vec<(JobIdx, &[f64])> = catalog
            .active_indices()
            .into_iter()
            .filter_map(|j| table.get(catalog.id(j)).map(|v| (j, v)))
            .collect();
        let engaged = profile
            .interactions
            .iter()
            .filter(|i| i.kind.is_engagement())
            .map(|i| i.job_id.as_str())
            .chain(profile.prior_jobs.iter().map(String::as_str));
        let expired: BTreeSet<&str> = engaged
            .filter(|id| !catalog.get(id).is_some_and(|j| j.is_active()))
            .collect();
        for id in expired {
            let Some(v) = table.get(id) else { continue };
            let mut sims: Vec<Candidate> = actives
                .iter()
                .map(|&(j, w)| Candidate {
                    job: j,
                    score: embed_sim(v, w),
                })
                .collect();
            rank(&mut sims);
            prefs.extend(sims.iter().take(per_expired).map(|c| c.job));
        }
    }

    if let Some(cat) = profile.resume_category.as_deref() {
        prefs.extend(
            catalog
                .active_indices()
                .into_iter()
                .filter(|&j| catalog.job(j).category == cat),
        );
    }
    prefs.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommendParams {
    pub k: usize,
    /// Fewer level-1 results than this triggers level 2 (and then PageRank).
    /// Defaults to `k`.
    pub min_recs: Option<usize>,
    /// Decay rate of the activity score, per day.
    pub activity_lambda: f64,
    pub level2_fanout: Option<usize>,
    /// Similar active jobs taken per expired history job.
    pub similar_per_expired: usize,
    pub location_radius_km: f64,
    pub location_boost: f64,
    pub pagerank: PageRankParams,
}

impl Default for RecommendParams {
    fn default() -> Self {
        RecommendParams {
            k: 15,
            min_recs: None,
            activity_lambda: 0.05,
            level2_fanout: None,
            similar_per_expired: 5,
            location_radius_km: 80.0,
            location_boost: 1.25,
            pagerank: PageRankParams::default(),
        }
    }
}

impl RecommendParams {
    pub fn min_recs(&self) -> usize {
        self.min_recs.unwrap_or(self.k).min(self.k)
    }
}

/// Serves recommendations from one digraph, caching global PageRank.
pub struct Recommender<'a> {
    digraph: &'a RecDigraph,
    embeddings: Option<&'a EmbeddingTable>,
    params: RecommendParams,
    reference: DateTime<Utc>,
    global: OnceLock<Result<Vec<Candidate>, PageRankError>>,
}

impl<'a> Recommender<'a> {
    pub fn new(
        digraph: &'a RecDigraph,
        embeddings: Option<&'a EmbeddingTable>,
        params: RecommendParams,
        reference: DateTime<Utc>,
    ) -> Self {
        Recommender {
            digraph,
            embeddings,
            params,
            reference,
            global: OnceLock::new(),
        }
    }

    pub fn params(&self) -> &RecommendParams {
        &self.params
    }

    fn global_ranking(&self) -> &Result<Vec<Candidate>, PageRankError> {
        self.global.get_or_init(|| {
            global_pagerank(self.digraph, &self.params.pagerank).map(|run| {
                if !run.converged {
                    log::warn!(
                        "global PageRank stopped after {} iterations",
                        run.iterations
                    );
                }
                ranked(&run)
            })
        })
    }

    pub fn recommend(&self, profile: &UserProfile) -> RecommendationList {
        let user_type = classify_user(profile);
        let mut list = RecommendationList {
            user_id: profile.user_id.clone(),
            user_type,
            entries: Vec::new(),
            diagnostics: Vec::new(),
        };
        let catalog = self.digraph.catalog();
        if catalog.active_indices().is_empty() {
            list.diagnostics.push("digraph has no active jobs".into());
            return list;
        }
        let k = self.params.k;
        let min_recs = self.params.min_recs();
        let history: HashSet<JobIdx> = profile
            .history()
            .into_iter()
            .filter_map(|id| catalog.index_of(id))
            .collect();
        let mut taken = history.clone();
        let mut tiers: Vec<Vec<Recommendation>> = Vec::new();
        let mut filled = 0;
        let push_tier = |tiers: &mut Vec<Vec<Recommendation>>,
                         taken: &mut HashSet<JobIdx>,
                         cands: Vec<Candidate>,
                         prov| {
            let tier: Vec<Recommendation> = cands
                .into_iter()
                .map(|c| Recommendation {
                    job: c.job,
                    job_id: catalog.id(c.job).to_string(),
                    score: c.score,
                    provenance: prov,
                })
                .collect();
            taken.extend(tier.iter().map(|r| r.job));
            let len = tier.len();
            tiers.push(tier);
            len
        };

        let mut need_pagerank = true;
        if user_type == UserType::Active {
            let sources = self.sources(profile);
            let l1 = level1(self.digraph, &sources, &history, k);
            filled += push_tier(&mut tiers, &mut taken, l1.clone(), Provenance::Level1);
            if filled < min_recs {
                let l2 = level2(
                    self.digraph,
                    &l1,
                    &taken,
                    k - filled,
                    self.params.level2_fanout,
                );
                filled += push_tier(&mut tiers, &mut taken, l2, Provenance::Level2);
            }
            need_pagerank = filled < min_recs;
        }

        if need_pagerank && user_type != UserType::Anonymous {
            let prefs = preference_vector(
                profile,
                self.digraph,
                self.embeddings,
                self.params.similar_per_expired,
            );
            if prefs.is_empty() {
                list.diagnostics
                    .push("no preference jobs; using global PageRank".into());
            } else {
                match personalized_pagerank(
                    self.digraph,
                    &prefs,
                    &self.params.pagerank,
                    profile.resume_category.as_deref(),
                ) {
                    Ok(run) => {
                        let cands = take_unseen(ranked(&run), &taken, k - filled);
                        filled +=
                            push_tier(&mut tiers, &mut taken, cands, Provenance::PersonalizedPR);
                    }
                    Err(e) => list.diagnostics.push(format!("personalized PageRank: {e}")),
                }
            }
        }

        if need_pagerank && filled < k {
            match self.global_ranking() {
                Ok(global) => {
                    let cands = take_unseen(global.clone(), &taken, k - filled);
                    push_tier(&mut tiers, &mut taken, cands, Provenance::GlobalPR);
                }
                Err(e) => list.diagnostics.push(format!("global PageRank: {e}")),
            }
        }

        for mut tier in tiers {
            location_rerank(
                &mut tier,
                catalog,
                profile.location,
                self.params.location_radius_km,
                self.params.location_boost,
            );
            list.entries.extend(tier);
        }
        list
    }

    /// Engaged jobs present in the graph with the recency weight of their
    /// latest interaction.
    fn sources(&self, profile: &UserProfile) -> Vec<(JobIdx, f64)> {
        let catalog = self.digraph.catalog();
        let mut latest: BTreeMap<JobIdx, DateTime<Utc>> = BTreeMap::new();
        for i in profile
            .interactions
            .iter()
            .filter(|i| i.kind.is_engagement())
        {
            if let Some(j) = catalog.index_of(&i.job_id) {
                let t = latest.entry(j).or_insert(i.timestamp);
                *t = (*t).max(i.timestamp);
            }
        }
        latest
            .into_iter()
            .map(|(j, t)| {
                let age = ((self.reference - t).num_milliseconds() as f64 / 86_400_000.0).max(0.0);
                (
                    j,
                    activity_score(age, self.params.activity_lambda)
                        .expect("age clamped non-negative"),
                )
            })
            .collect()
    }
}

fn ranked(run: &PageRankRun) -> Vec<Candidate> {
    let mut c: Vec<Candidate> = run
        .scores
        .iter()
        .map(|&(job, score)| Candidate { job, score })
        .collect();
    rank(&mut c);
    c
}

fn take_unseen(ranked: Vec<Candidate>, taken: &HashSet<JobIdx>, n: usize) -> Vec<Candidate> {
    ranked
        .into_iter()
        .filter(|c| !taken.contains(&c.job))
        .take(n)
        .collect()
}

/// One-shot convenience wrapper around [`Recommender`].
pub fn recommend(
    profile: &UserProfile,
    digraph: &RecDigraph,
    embeddings: Option<&EmbeddingTable>,
    params: RecommendParams,
    reference: DateTime<Utc>,
) -> RecommendationList {
    Recommender::new(digraph, embeddings, params, reference).recommend(profile)
}
