//! Job postings indexed by a dense, id-ordered position.

use std::collections::HashMap;

use chrono::{DateTime, Utc};

use crate::ingest::{in_window, JobRecord};

/// Dense index into a [`JobCatalog`]. Index order equals job-id order.
pub type JobIdx = usize;

#[derive(Debug, Clone, Default)]
pub struct JobCatalog {
    jobs: Vec<JobRecord>,
    index: HashMap<String, JobIdx>,
}

impl JobCatalog {
    /// Builds a catalog; duplicate ids keep the last record.
    pub fn new(jobs: impl IntoIterator<Item = JobRecord>) -> Self {
        let mut by_id: std::collections::BTreeMap<String, JobRecord> = Default::default();
        for j in jobs {
            by_id.insert(j.job_id.clone(), j);
        }
        let jobs: Vec<JobRecord> = by_id.into_values().collect();
        let index = jobs
            .iter()
            .enumerate()
            .map(|(i, j)| (j.job_id.clone(), i))
            .collect();
        JobCatalog { jobs, index }
    }

    /// Active jobs plus expired jobs posted within the window.
    pub fn windowed(&self, reference: &DateTime<Utc>, window_days: u32) -> Self {
        JobCatalog::new(
            self.jobs
                .iter()
                .filter(|j| j.is_active() || in_window(&j.posted_at, reference, window_days))
                .cloned(),
        )
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn index_of(&self, job_id: &str) -> Option<JobIdx> {
        self.index.get(job_id).copied()
    }

    pub fn job(&self, idx: JobIdx) -> &JobRecord {
        &self.jobs[idx]
    }

    pub fn get(&self, job_id: &str) -> Option<&JobRecord> {
        self.index_of(job_id).map(|i| &self.jobs[i])
    }

    pub fn id(&self, idx: JobIdx) -> &str {
        &self.jobs[idx].job_id
    }

    pub fn is_active(&self, idx: JobIdx) -> bool {
        self.jobs[idx].is_active()
    }

    pub fn jobs(&self) -> &[JobRecord] {
        &self.jobs
    }

    pub fn active_indices(&self) -> Vec<JobIdx> {
        (0..self.jobs.len())
            .filter(|&i| self.is_active(i))
            .collect()
    }
}
