//! Seeded synthetic corpora with planted cluster structure.
//!
//! Each cluster is a job category whose jobs sit on a ring around a cluster
//! centroid in embedding space. Users belong to one cluster and a position on
//! its ring, which drifts slowly over time; they apply to and click jobs near
//! their current position, and ignore emailed jobs far from it. With probability `noise` an event targets a
//! random job of another cluster instead.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::ingest::{
    write_embeddings, write_events, write_jobs, write_users, EmbeddingTable, EventKind, GeoPoint,
    IngestError, InteractionEvent, JobRecord, JobStatus, RecordFormat, UserRecord,
};

pub const EVENTS_FILE: &str = "events.csv";
pub const JOBS_FILE: &str = "jobs.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const USERS_FILE: &str = "users.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub clusters: usize,
    pub jobs_per_cluster: usize,
    pub users: usize,
    /// Probability that an event leaves the user's cluster.
    pub noise: f64,
    pub seed: u64,
    pub dim: usize,
    /// Share of active jobs that never receive an event.
    pub cold_fraction: f64,
    pub expired_fraction: f64,
    /// Share of users without any events.
    pub idle_user_fraction: f64,
    pub applies_per_user: f64,
    pub queries_per_user: f64,
    pub ignored_emails_per_user: f64,
    /// Angular width of a user's taste on the cluster ring, in radians.
    pub taste_width: f64,
    /// Largest drift of a user's taste over the period, in radians.
    pub taste_drift: f64,
    /// Log-scale spread of job popularity.
    pub popularity_sigma: f64,
    pub with_locations: bool,
    /// RFC 3339 end of the simulated period.
    pub reference_date: String,
    /// Length of the simulated period, in days.
    pub horizon_days: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            clusters: 5,
            jobs_per_cluster: 200,
            users: 2000,
            noise: 0.1,
            seed: 7,
            dim: 32,
            cold_fraction: 0.2,
            expired_fraction: 0.1,
            idle_user_fraction: 0.1,
            applies_per_user: 6.0,
            queries_per_user: 3.0,
            ignored_emails_per_user: 2.0,
            taste_width: 0.35,
            taste_drift: 1.0,
            popularity_sigma: 0.5,
            with_locations: true,
            reference_date: "2017-07-01T00:00:00Z".into(),
            horizon_days: 170,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub events: Vec<InteractionEvent>,
    pub jobs: Vec<JobRecord>,
    pub embeddings: EmbeddingTable,
    pub users: Vec<UserRecord>,
    /// Active jobs that received no events.
    pub cold_jobs: BTreeSet<String>,
    /// Category of each user's home cluster, by user id order.
    pub user_clusters: Vec<(String, String)>,
    pub reference: DateTime<Utc>,
}

const ROLES: [&str; 8] = [
    "software engineer",
    "registered nurse",
    "truck driver",
    "sales associate",
    "staff accountant",
    "elementary teacher",
    "warehouse associate",
    "customer service representative",
];

const SENIORITY: [&str; 4] = ["junior", "associate", "senior", "lead"];

const CITIES: [(f64, f64); 6] = [
    (33.749, -84.388),
    (41.878, -87.630),
    (32.777, -96.797),
    (39.739, -104.990),
    (47.606, -122.332),
    (42.360, -71.058),
];

fn category(c: usize) -> String {
    let role = ROLES[c % ROLES.len()].replace(' ', "-");
    if c < ROLES.len() {
        role
    } else {
        format!("{role}-{}", c / ROLES.len())
    }
}

struct Job {
    cluster: usize,
    angle: f64,
    popularity: f64,
    posted: DateTime<Utc>,
    expires: Option<DateTime<Utc>>,
    city: usize,
    cold: bool,
}

impl Job {
    fn open_at(&self, t: DateTime<Utc>) -> bool {
        self.posted <= t && self.expires.is_none_or(|e| t < e)
    }
}

fn ring_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let proj: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let basis = vs[j].clone();
            for (x, b) in vs[i].iter_mut().zip(&basis) {
                *x -= proj * b;
            }
        }
        let n = vs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        vs[i].iter_mut().for_each(|x| *x /= n);
    }
}

fn validate(p: &SynthParams) -> Result<DateTime<Utc>, SynthError> {
    let bad = |m: &str| Err(SynthError::Invalid(m.into()));
    if p.clusters == 0 || p.jobs_per_cluster == 0 || p.users == 0 {
        return bad("clusters, jobs_per_cluster and users must be positive");
    }
    if !(0.0..1.0).contains(&p.noise) {
        return bad("noise must lie in [0, 1)");
    }
    if p.dim < 3 {
        return bad("dim must be at least 3");
    }
    for (name, f) in [
        ("cold_fraction", p.cold_fraction),
        ("expired_fraction", p.expired_fraction),
        ("idle_user_fraction", p.idle_user_fraction),
    ] {
        if !(0.0..1.0).contains(&f) {
            return Err(SynthError::Invalid(format!("{name} must lie in [0, 1)")));
        }
    }
    for (name, m) in [
        ("applies_per_user", p.applies_per_user),
        ("queries_per_user", p.queries_per_user),
        ("ignored_emails_per_user", p.ignored_emails_per_user),
        ("taste_width", p.taste_width),
    ] {
        if !(m.is_finite() && m > 0.0) {
            return Err(SynthError::Invalid(format!("{name} must be positive")));
        }
    }
    if !(p.taste_drift.is_finite() && p.taste_drift >= 0.0)
        || !(p.popularity_sigma.is_finite() && p.popularity_sigma >= 0.0)
    {
        return bad("taste_drift and popularity_sigma must be non-negative");
    }
    if p.horizon_days == 0 {
        return bad("horizon_days must be positive");
    }
    crate::ingest::parse_timestamp(&p.reference_date).map_err(SynthError::Invalid)
}

/// Generates a corpus; identical parameters give identical corpora.
pub fn synth_corpus(p: &SynthParams) -> Result<SynthCorpus, SynthError> {
    let reference = validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let horizon_secs = i64::from(p.horizon_days) * 86_400;
    let start = reference - Duration::seconds(horizon_secs);

    // Cluster geometry: centroid plus a ring plane, orthonormal within each
    // cluster and across clusters when the dimension allows.
    let mut axes: Vec<Vec<f64>> = (0..3 * p.clusters)
        .map(|_| unit_gaussian(&mut rng, p.dim))
        .collect();
    if axes.len() <= p.dim {
        orthonormalize(&mut axes);
    } else {
        axes.chunks_mut(3).for_each(orthonormalize);
    }
    let geometry: Vec<&[Vec<f64>]> = axes.chunks(3).collect();

    let popularity = LogNormal::new(0.0, p.popularity_sigma).expect("valid lognormal");
    let jitter = Normal::new(0.0, 0.15 / (p.dim as f64).sqrt()).expect("valid normal");
    let ring_radius = 0.6;
    let mut jobs: Vec<Job> = Vec::with_capacity(p.clusters * p.jobs_per_cluster);
    let mut records = Vec::with_capacity(jobs.capacity());
    let mut embeddings = EmbeddingTable::default();
    for (c, basis) in geometry.iter().enumerate() {
        for n in 0..p.jobs_per_cluster {
            let angle = rng.random_range(0.0..TAU);
            // Posted up to 60 days before the simulated period opens.
            let posted = start - Duration::days(60)
                + Duration::seconds(rng.random_range(0..horizon_secs + 60 * 86_400));
            let expires = if rng.random_bool(p.expired_fraction) {
                let life = Duration::days(rng.random_range(20..90));
                Some(
                    (posted + life)
                        .min(reference - Duration::days(1))
                        .max(posted),
                )
            } else {
                None
            };
            let city = rng.random_range(0..CITIES.len());
            let job = Job {
                cluster: c,
                angle,
                popularity: popularity.sample(&mut rng),
                posted,
                expires,
                city,
                cold: false,
            };
            let id = format!("c{c:02}-j{n:05}");
            let mut v: Vec<f64> = (0..p.dim)
                .map(|d| {
                    basis[0][d]
                        + ring_radius * (angle.cos() * basis[1][d] + angle.sin() * basis[2][d])
                })
                .collect();
            v.iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
            embeddings
                .insert(id.clone(), v)
                .map_err(|e| SynthError::Invalid(e.to_string()))?;
            let location = p.with_locations.then(|| {
                let (lat, lon) = CITIES[city];
                GeoPoint {
                    lat: lat + rng.random_range(-0.1..0.1),
                    lon: lon + rng.random_range(-0.1..0.1),
                }
            });
            records.push(JobRecord {
                job_id: id,
                title: format!(
                    "{} {}",
                    SENIORITY[rng.random_range(0..SENIORITY.len())],
                    ROLES[c % ROLES.len()]
                ),
                category: category(c),
                location,
                posted_at: posted,
                status: if expires.is_some() {
                    JobStatus::Expired
                } else {
                    JobStatus::Active
                },
            });
            jobs.push(job);
        }
    }

    let mut active: Vec<usize> = (0..jobs.len())
        .filter(|&i| jobs[i].expires.is_none())
        .collect();
    active.shuffle(&mut rng);
    let n_cold = (p.cold_fraction * active.len() as f64).round() as usize;
    let mut cold_jobs = BTreeSet::new();
    for &i in &active[..n_cold] {
        jobs[i].cold = true;
        cold_jobs.insert(records[i].job_id.clone());
    }

    let by_cluster: Vec<Vec<usize>> = (0..p.clusters)
        .map(|c| {
            (0..jobs.len())
                .filter(|&i| jobs[i].cluster == c && !jobs[i].cold)
                .collect()
        })
        .collect();

    let applies_dist = Poisson::new(p.applies_per_user).expect("positive mean");
    let queries_dist = Poisson::new(p.queries_per_user).expect("positive mean");
    let emails_dist = Poisson::new(p.ignored_emails_per_user).expect("positive mean");

    let mut events = Vec::new();
    let mut users = Vec::with_capacity(p.users);
    let mut user_clusters = Vec::with_capacity(p.users);
    for n in 0..p.users {
        let user_id = format!("u{n:06}");
        let home = rng.random_range(0..p.clusters);
        let taste0 = rng.random_range(0.0..TAU);
        let drift = if p.taste_drift > 0.0 {
            rng.random_range(-p.taste_drift..=p.taste_drift)
        } else {
            0.0
        };
        let taste_at = move |t: DateTime<Utc>| {
            taste0 + drift * (t - start).num_seconds() as f64 / horizon_secs as f64
        };
        let city = rng.random_range(0..CITIES.len());
        let has_resume = rng.random_bool(0.8);
        let idle = rng.random_bool(p.idle_user_fraction);
        users.push(UserRecord {
            user_id: user_id.clone(),
            resume_category: has_resume.then(|| category(home)),
            location: p.with_locations.then(|| GeoPoint {
                lat: CITIES[city].0,
                lon: CITIES[city].1,
            }),
            registered: has_resume,
        });
        user_clusters.push((user_id.clone(), category(home)));
        if idle {
            continue;
        }

        // Picks a job open at `t`; `affinity` maps ring distance to a weight.
        let pick = |rng: &mut ChaCha8Rng,
                    t: DateTime<Utc>,
                    affinity: &dyn Fn(f64) -> f64,
                    taken: &BTreeSet<usize>| {
            let cluster = if p.clusters > 1 && rng.random_bool(p.noise) {
                let other = rng.random_range(0..p.clusters - 1);
                if other >= home {
                    other + 1
                } else {
                    other
                }
            } else {
                home
            };
            let taste = taste_at(t);
            let candidates: Vec<usize> = by_cluster[cluster]
                .iter()
                .copied()
                .filter(|&i| jobs[i].open_at(t) && !taken.contains(&i))
                .collect();
            let weights: Vec<f64> = candidates
                .iter()
                .map(|&i| {
                    let j = &jobs[i];
                    let fit = if cluster == home {
                        affinity(ring_distance(j.angle, taste))
                    } else {
                        1.0
                    };
                    let near = if p.with_locations && j.city == city {
                        2.0
                    } else {
                        1.0
                    };
                    j.popularity * fit * near
                })
                .collect();
            let index = WeightedIndex::new(&weights).ok()?;
            Some(candidates[index.sample(rng)])
        };
        let width = p.taste_width;
        let close = move |d: f64| (-(d * d) / (2.0 * width * width)).exp();
        let broad = move |d: f64| (-(d * d) / (8.0 * width * width)).exp();
        let far = move |d: f64| (-((PI - d) * (PI - d)) / (2.0 * width * width)).exp();
        let instant = |rng: &mut ChaCha8Rng| {
            start + Duration::seconds(rng.random_range(0..horizon_secs - 3600))
        };

        let n_applies = 1 + applies_dist.sample(&mut rng) as usize;
        let mut applied = BTreeSet::new();
        for _ in 0..n_applies {
            let t = instant(&mut rng);
            if let Some(i) = pick(&mut rng, t, &close, &applied) {
                applied.insert(i);
                events.push(event(
                    &user_id,
                    &records[i].job_id,
                    EventKind::Apply,
                    t,
                    None,
                ));
            }
        }
        for q in 0..queries_dist.sample(&mut rng) as usize {
            let t = instant(&mut rng);
            let clicks = if rng.random_bool(0.6) {
                1
            } else {
                rng.random_range(2..=3)
            };
            let mut seen = BTreeSet::new();
            for c in 0..clicks {
                if let Some(i) = pick(&mut rng, t, &broad, &seen) {
                    seen.insert(i);
                    let at = t + Duration::minutes(c);
                    events.push(event(
                        &user_id,
                        &records[i].job_id,
                        EventKind::Click,
                        at,
                        Some(format!("{user_id}-q{q}")),
                    ));
                }
            }
        }
        for _ in 0..emails_dist.sample(&mut rng) as usize {
            let t = instant(&mut rng);
            if let Some(i) = pick(&mut rng, t, &far, &applied) {
                events.push(event(
                    &user_id,
                    &records[i].job_id,
                    EventKind::EmailOpenNoClick,
                    t,
                    None,
                ));
            }
        }
    }
    events.sort_by(|a, b| {
        (a.timestamp, &a.user_id, &a.job_id, a.kind.as_str()).cmp(&(
            b.timestamp,
            &b.user_id,
            &b.job_id,
            b.kind.as_str(),
        ))
    });

    Ok(SynthCorpus {
        events,
        jobs: records,
        embeddings,
        users,
        cold_jobs,
        user_clusters,
        reference,
    })
}

fn event(
    user: &str,
    job: &str,
    kind: EventKind,
    timestamp: DateTime<Utc>,
    query_id: Option<String>,
) -> InteractionEvent {
    InteractionEvent {
        user_id: user.to_string(),
        job_id: job.to_string(),
        kind,
        timestamp,
        query_id,
    }
}

/// Writes the four corpus files into `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>, SynthError> {
        Ok(BufWriter::new(File::create(dir.join(name))?))
    };
    write_events(create(EVENTS_FILE)?, &corpus.events, RecordFormat::Csv)?;
    write_jobs(create(JOBS_FILE)?, &corpus.jobs)?;
    write_users(create(USERS_FILE)?, &corpus.users)?;
    let mut emb = create(EMBEDDINGS_FILE)?;
    write_embeddings(&mut emb, &corpus.embeddings)?;
    emb.flush()?;
    Ok(())
}

/// Fraction of `events` whose job lies in the acting user's home cluster.
pub fn within_cluster_fraction(corpus: &SynthCorpus, events: &[InteractionEvent]) -> f64 {
    use std::collections::HashMap;
    let home: HashMap<&str, &str> = corpus
        .user_clusters
        .iter()
        .map(|(u, c)| (u.as_str(), c.as_str()))
        .collect();
    let cat: HashMap<&str, &str> = corpus
        .jobs
        .iter()
        .map(|j| (j.job_id.as_str(), j.category.as_str()))
        .collect();
    if events.is_empty() {
        return 0.0;
    }
    let inside = events
        .iter()
        .filter(|e| home.get(e.user_id.as_str()) == cat.get(e.job_id.as_str()))
        .count();
    inside as f64 / events.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::embed_sim;

    fn small(seed: u64, noise: f64) -> SynthParams {
        SynthParams {
            clusters: 3,
            jobs_per_cluster: 40,
            users: 150,
            noise,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_confines_users() {
        let corpus = synth_corpus(&small(1, 0.0)).unwrap();
        assert!(!corpus.events.is_empty());
        assert_eq!(within_cluster_fraction(&corpus, &corpus.events), 1.0);
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(&synth_corpus(&small(5, 0.1)).unwrap(), a.path()).unwrap();
        write_corpus(&synth_corpus(&small(5, 0.1)).unwrap(), b.path()).unwrap();
        for name in [EVENTS_FILE, JOBS_FILE, EMBEDDINGS_FILE, USERS_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
        let c = synth_corpus(&small(6, 0.1)).unwrap();
        assert_ne!(c.events, synth_corpus(&small(5, 0.1)).unwrap().events);
    }

    #[test]
    fn noise_rate_is_observed() {
        let p = SynthParams {
            clusters: 5,
            jobs_per_cluster: 60,
            users: 1200,
            noise: 0.1,
            seed: 11,
            ..Default::default()
        };
        let corpus = synth_corpus(&p).unwrap();
        let engaged: Vec<_> = corpus
            .events
            .iter()
            .filter(|e| e.kind != EventKind::EmailOpenNoClick)
            .cloned()
            .collect();
        assert!(engaged.len() >= 10_000, "{}", engaged.len());
        let f = within_cluster_fraction(&corpus, &engaged);
        assert!((f - 0.9).abs() <= 0.03, "{f}");
    }

    #[test]
    fn embeddings_separate_clusters() {
        let corpus = synth_corpus(&small(2, 0.1)).unwrap();
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for a in corpus.jobs.iter().step_by(3) {
            for b in corpus.jobs.iter().step_by(7) {
                if a.job_id == b.job_id {
                    continue;
                }
                let s = embed_sim(
                    corpus.embeddings.get(&a.job_id).unwrap(),
                    corpus.embeddings.get(&b.job_id).unwrap(),
                );
                if a.category == b.category {
                    within.push(s)
                } else {
                    across.push(s)
                }
            }
        }
        let min_within = within.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_across = across.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min_within > max_across, "{min_within} vs {max_across}");
        assert!(min_within >= 0.4);
    }

    #[test]
    fn cold_jobs_have_no_events() {
        let corpus = synth_corpus(&small(3, 0.2)).unwrap();
        let active = corpus.jobs.iter().filter(|j| j.is_active()).count();
        assert_eq!(
            corpus.cold_jobs.len(),
            (0.2 * active as f64).round() as usize
        );
        assert!(corpus
            .events
            .iter()
            .all(|e| !corpus.cold_jobs.contains(&e.job_id)));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_corpus(&SynthParams {
            noise: 1.0,
            ..small(1, 0.0)
        })
        .is_err());
        assert!(synth_corpus(&SynthParams {
            clusters: 0,
            ..small(1, 0.0)
        })
        .is_err());
    }
}
