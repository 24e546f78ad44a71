//! Matrix-factorization baseline trained by alternating least squares.
//!
//! Ratings are `+1` for an application and `-1` for a recommendation email
//! that was opened without clicking the job. The model predicts
//!
//! ```text
//! r(u, j) = mu + b_u + b_j + J_j . (U_u + |N(u)|^-1/2 * sum_{i in N(u)} Y_i)
//! ```
//!
//! where the implicit term is present only for models trained with click
//! histories. Training minimizes squared error over observed entries plus
//! `lambda` times the squared norm of every factor and bias; every block
//! update is an exact ridge solve, so the objective never increases.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{EventKind, Signal};

#[derive(Debug, thiserror::Error)]
pub enum MfError {
    #[error("ratings matrix is empty")]
    EmptyMatrix,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("non-finite value after {0}")]
    NonFinite(String),
    #[error("model dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sparse `+1 / -1` matrix with users and jobs indexed in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingsMatrix {
    users: Vec<String>,
    jobs: Vec<String>,
    by_user: Vec<Vec<(usize, f64)>>,
    by_job: Vec<Vec<(usize, f64)>>,
}

impl RatingsMatrix {
    /// Builds from `(user, job, value)` triples; later duplicates win.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str, f64)>) -> Self {
        let cells: BTreeMap<(&str, &str), f64> =
            entries.into_iter().map(|(u, j, v)| ((u, j), v)).collect();
        let users: Vec<String> = cells
            .keys()
            .map(|k| k.0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        let jobs: Vec<String> = cells
            .keys()
            .map(|k| k.1)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        let ui: HashMap<&str, usize> = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        let ji: HashMap<&str, usize> = jobs
            .iter()
            .enumerate()
            .map(|(i, j)| (j.as_str(), i))
            .collect();
        let mut by_user = vec![Vec::new(); users.len()];
        let mut by_job = vec![Vec::new(); jobs.len()];
        for ((u, j), v) in cells {
            let (u, j) = (ui[u], ji[j]);
            by_user[u].push((j, v));
            by_job[j].push((u, v));
        }
        RatingsMatrix {
            users,
            jobs,
            by_user,
            by_job,
        }
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn jobs(&self) -> &[String] {
        &self.jobs
    }

    pub fn nnz(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nnz() == 0
    }

    /// `(user index, job index, value)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.by_user
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&(j, v)| (u, j, v)))
    }

    pub fn get(&self, user: &str, job: &str) -> Option<f64> {
        let u = self.users.binary_search_by(|x| x.as_str().cmp(user)).ok()?;
        let j = self.jobs.binary_search_by(|x| x.as_str().cmp(job)).ok()?;
        self.by_user[u].iter().find(|e| e.0 == j).map(|e| e.1)
    }
}

/// Applies become `+1`, ignored emails `-1`; an application always wins.
/// Clicks are not ratings.
pub fn build_matrix(signals: &[Signal]) -> RatingsMatrix {
    let mut cells: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for s in signals {
        let v = match s.kind {
            EventKind::Apply => 1.0,
            EventKind::EmailOpenNoClick => -1.0,
            EventKind::Click => continue,
        };
        let cell = cells.entry((&s.user_id, &s.job_id)).or_insert(v);
        *cell = cell.max(v);
    }
    RatingsMatrix::from_entries(cells.into_iter().map(|((u, j), v)| (u, j, v)))
}

/// Per-user implicit item sets `N(u)` from click signals, restricted to jobs
/// known to the matrix.
pub fn implicit_sets(matrix: &RatingsMatrix, signals: &[Signal]) -> Vec<Vec<usize>> {
    let ui: HashMap<&str, usize> = matrix
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let ji: HashMap<&str, usize> = matrix
        .jobs
        .iter()
        .enumerate()
        .map(|(i, j)| (j.as_str(), i))
        .collect();
    let mut sets = vec![BTreeSet::new(); matrix.users.len()];
    for s in signals.iter().filter(|s| s.kind == EventKind::Click) {
        if let (Some(&u), Some(&j)) = (ui.get(s.user_id.as_str()), ji.get(s.job_id.as_str())) {
            sets[u].insert(j);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlsParams {
    pub k: usize,
    pub lambda: f64,
    pub iterations: usize,
    /// Fit implicit factors from click histories.
    pub implicit: bool,
}

impl Default for AlsParams {
    fn default() -> Self {
        AlsParams {
            k: 32,
            lambda: 0.1,
            iterations: 10,
            implicit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub users: Vec<String>,
    pub jobs: Vec<String>,
    pub k: usize,
    pub lambda: f64,
    pub mu: f64,
    pub user_factors: Vec<Vec<f64>>,
    pub user_bias: Vec<f64>,
    pub job_factors: Vec<Vec<f64>>,
    pub job_bias: Vec<f64>,
    pub implicit_factors: Vec<Vec<f64>>,
    user_index: HashMap<String, usize>,
    job_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Regularized objective after initialization and after every half-step.
    pub objective_trace: Vec<f64>,
    /// Observed-entry MSE after each full iteration.
    pub mse_trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `|A x - t|^2 + lambda |x|^2` for rows `(features, target)`.
fn ridge_solve(rows: &[(Vec<f64>, f64)], dim: usize, lambda: f64) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; dim];
    }
    let mut ata = DMatrix::<f64>::identity(dim, dim) * lambda;
    let mut atb = DVector::<f64>::zeros(dim);
    for (f, t) in rows {
        for a in 0..dim {
            atb[a] += f[a] * t;
            for b in 0..dim {
                ata[(a, b)] += f[a] * f[b];
            }
        }
    }
    let solved = match ata.clone().cholesky() {
        Some(ch) => ch.solve(&atb),
        // lambda = 0 with too few rows: minimum-norm least squares.
        None => ata
            .svd(true, true)
            .solve(&atb, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(dim)),
    };
    solved.iter().copied().collect()
}

impl FactorModel {
    fn new(users: Vec<String>, jobs: Vec<String>, k: usize, lambda: f64, mu: f64) -> Self {
        let user_index = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        let job_index = jobs
            .iter()
            .enumerate()
            .map(|(i, j)| (j.clone(), i))
            .collect();
        let (m, n) = (users.len(), jobs.len());
        FactorModel {
            users,
            jobs,
            k,
            lambda,
            mu,
            user_factors: vec![vec![0.0; k]; m],
            user_bias: vec![0.0; m],
            job_factors: vec![vec![0.0; k]; n],
            job_bias: vec![0.0; n],
            implicit_factors: vec![vec![0.0; k]; n],
            user_index,
            job_index,
        }
    }

    pub fn user_index(&self, user: &str) -> Option<usize> {
        self.user_index.get(user).copied()
    }

    pub fn job_index(&self, job: &str) -> Option<usize> {
        self.job_index.get(job).copied()
    }

    fn implicit_sum(&self, items: &[usize]) -> Option<Vec<f64>> {
        if items.is_empty() {
            return None;
        }
        let scale = (items.len() as f64).powf(-0.5);
        let mut acc = vec![0.0; self.k];
        for &i in items {
            for (a, y) in acc.iter_mut().zip(&self.implicit_factors[i]) {
                *a += y;
            }
        }
        Some(acc.into_iter().map(|x| x * scale).collect())
    }

    fn effective_user(&self, u: usize, items: &[usize]) -> Vec<f64> {
        match self.implicit_sum(items) {
            Some(s) => self.user_factors[u]
                .iter()
                .zip(&s)
                .map(|(a, b)| a + b)
                .collect(),
            None => self.user_factors[u].clone(),
        }
    }

    fn predict_idx(&self, u: usize, j: usize, items: &[usize]) -> f64 {
        if items.is_empty() {
            return self.mu
                + self.user_bias[u]
                + self.job_bias[j]
                + dot(&self.job_factors[j], &self.user_factors[u]);
        }
        let z = self.effective_user(u, items);
        self.mu + self.user_bias[u] + self.job_bias[j] + dot(&self.job_factors[j], &z)
    }

    fn indices(&self, user: &str, job: &str) -> Result<(usize, usize), MfError> {
        let u = self
            .user_index(user)
            .ok_or_else(|| MfError::UnknownUser(user.to_string()))?;
        let j = self
            .job_index(job)
            .ok_or_else(|| MfError::UnknownJob(job.to_string()))?;
        Ok((u, j))
    }

    /// `mu + b_u + b_j + J_j . U_u`
    pub fn predict_biased(&self, user: &str, job: &str) -> Result<f64, MfError> {
        let (u, j) = self.indices(user, job)?;
        Ok(self.predict_idx(u, j, &[]))
    }

    /// Prediction with the implicit term over `implicit` items. Items unknown
    /// to the model are skipped.
    pub fn predict_implicit(
        &self,
        user: &str,
        job: &str,
        implicit: &[&str],
    ) -> Result<f64, MfError> {
        let (u, j) = self.indices(user, job)?;
        let items = self.known_items(implicit);
        Ok(self.predict_idx(u, j, &items))
    }

    fn known_items(&self, implicit: &[&str]) -> Vec<usize> {
        let mut items: Vec<usize> = implicit
            .iter()
            .filter_map(|id| {
                let idx = self.job_index(id);
                if idx.is_none() {
                    log::warn!("implicit item {id:?} unknown to the model; skipped");
                }
                idx
            })
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }

    /// Top-`k` jobs for `user` among model jobs passing `eligible` and not in
    /// `exclude`. Ties order by job id.
    pub fn recommend(
        &self,
        user: &str,
        k: usize,
        exclude: &HashSet<&str>,
        implicit: &[&str],
        eligible: impl Fn(&str) -> bool,
    ) -> Result<Vec<(String, f64)>, MfError> {
        let u = self
            .user_index(user)
            .ok_or_else(|| MfError::UnknownUser(user.to_string()))?;
        let items = self.known_items(implicit);
        let mut scored: Vec<(usize, f64)> = (0..self.jobs.len())
            .filter(|&j| !exclude.contains(self.jobs[j].as_str()) && eligible(&self.jobs[j]))
            .map(|j| (j, self.predict_idx(u, j, &items)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(j, s)| (self.jobs[j].clone(), s))
            .collect())
    }

    fn all_finite(&self) -> bool {
        let vecs = self
            .user_factors
            .iter()
            .chain(&self.job_factors)
            .chain(&self.implicit_factors)
            .flatten();
        vecs.chain(&self.user_bias)
            .chain(&self.job_bias)
            .all(|x| x.is_finite())
    }

    /// Writes the header `m n k mu lambda`, then `user U.. b_u` rows,
    /// `job J.. b_j` rows and `job Y..` rows.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), MfError> {
        writeln!(
            w,
            "{} {} {} {} {}",
            self.users.len(),
            self.jobs.len(),
            self.k,
            self.mu,
            self.lambda
        )?;
        let row = |w: &mut W, id: &str, xs: &[f64], tail: Option<f64>| -> std::io::Result<()> {
            write!(w, "{id}")?;
            for x in xs.iter().chain(tail.as_ref()) {
                write!(w, " {x}")?;
            }
            writeln!(w)
        };
        for (u, id) in self.users.iter().enumerate() {
            row(&mut w, id, &self.user_factors[u], Some(self.user_bias[u]))?;
        }
        for (j, id) in self.jobs.iter().enumerate() {
            row(&mut w, id, &self.job_factors[j], Some(self.job_bias[j]))?;
        }
        for (j, id) in self.jobs.iter().enumerate() {
            row(&mut w, id, &self.implicit_factors[j], None)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, MfError> {
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let err = |line: usize, message: &str| MfError::Dump {
            line: line + 1,
            message: message.to_string(),
        };
        let header: Vec<&str> = lines
            .first()
            .ok_or_else(|| err(0, "missing header"))?
            .split_whitespace()
            .collect();
        if header.len() != 5 {
            return Err(err(0, "header needs m n k mu lambda"));
        }
        let (m, n, k): (usize, usize, usize) = (
            header[0].parse().map_err(|_| err(0, "bad m"))?,
            header[1].parse().map_err(|_| err(0, "bad n"))?,
            header[2].parse().map_err(|_| err(0, "bad k"))?,
        );
        let mu: f64 = header[3].parse().map_err(|_| err(0, "bad mu"))?;
        let lambda: f64 = header[4].parse().map_err(|_| err(0, "bad lambda"))?;
        if lines.len() != 1 + m + 2 * n {
            return Err(err(lines.len(), "unexpected number of rows"));
        }
        let parse_row = |i: usize, width: usize| -> Result<(String, Vec<f64>), MfError> {
            let mut parts = lines[i].split_whitespace();
            let id = parts.next().ok_or_else(|| err(i, "empty row"))?.to_string();
            let xs: Vec<f64> = parts
                .map(|t| t.parse::<f64>().map_err(|_| err(i, "bad number")))
                .collect::<Result<_, _>>()?;
            if xs.len() != width {
                return Err(err(i, "wrong row width"));
            }
            Ok((id, xs))
        };
        let mut users = Vec::with_capacity(m);
        let mut user_rows = Vec::with_capacity(m);
        for i in 1..=m {
            let (id, xs) = parse_row(i, k + 1)?;
            users.push(id);
            user_rows.push(xs);
        }
        let mut jobs = Vec::with_capacity(n);
        let mut job_rows = Vec::with_capacity(n);
        for i in (m + 1)..=(m + n) {
            let (id, xs) = parse_row(i, k + 1)?;
            jobs.push(id);
            job_rows.push(xs);
        }
        let mut model = FactorModel::new(users, jobs, k, lambda, mu);
        for (u, mut xs) in user_rows.into_iter().enumerate() {
            model.user_bias[u] = xs.pop().expect("width k + 1");
            model.user_factors[u] = xs;
        }
        for (j, mut xs) in job_rows.into_iter().enumerate() {
            model.job_bias[j] = xs.pop().expect("width k + 1");
            model.job_factors[j] = xs;
        }
        for j in 0..n {
            let i = m + n + 1 + j;
            let (id, xs) = parse_row(i, k)?;
            if id != model.jobs[j] {
                return Err(err(i, "implicit rows out of order"));
            }
            model.implicit_factors[j] = xs;
        }
        Ok(model)
    }
}

/// Regularized training objective over observed entries.
pub fn objective(model: &FactorModel, matrix: &RatingsMatrix, implicit: &[Vec<usize>]) -> f64 {
    let no_items: Vec<usize> = Vec::new();
    let sq: f64 = matrix
        .entries()
        .map(|(u, j, r)| {
            let items = implicit.get(u).unwrap_or(&no_items);
            (r - model.predict_idx(u, j, items)).powi(2)
        })
        .sum();
    let norms: f64 = model
        .user_factors
        .iter()
        .chain(&model.job_factors)
        .chain(&model.implicit_factors)
        .map(|v| dot(v, v))
        .sum::<f64>()
        + model
            .user_bias
            .iter()
            .chain(&model.job_bias)
            .map(|b| b * b)
            .sum::<f64>();
    sq + model.lambda * norms
}

pub fn observed_mse(model: &FactorModel, matrix: &RatingsMatrix, implicit: &[Vec<usize>]) -> f64 {
    let no_items: Vec<usize> = Vec::new();
    let (sum, n) = matrix.entries().fold((0.0, 0usize), |(s, n), (u, j, r)| {
        let items = implicit.get(u).unwrap_or(&no_items);
        (s + (r - model.predict_idx(u, j, items)).powi(2), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains the biased model. `implicit` supplies `N(u)` per matrix user and is
/// only used when `params.implicit` is set.
pub fn als_train(
    matrix: &RatingsMatrix,
    params: &AlsParams,
    implicit: Option<&[Vec<usize>]>,
    seed: u64,
) -> Result<(FactorModel, TrainReport), MfError> {
    if matrix.is_empty() {
        return Err(MfError::EmptyMatrix);
    }
    if params.k == 0 {
        return Err(MfError::InvalidParams("k must be at least 1".into()));
    }
    if !(params.lambda >= 0.0 && params.lambda.is_finite()) {
        return Err(MfError::InvalidParams(
            "lambda must be finite and non-negative".into(),
        ));
    }
    let k = params.k;
    let lambda = params.lambda;
    let mu = matrix.entries().map(|e| e.2).sum::<f64>() / matrix.nnz() as f64;
    let mut model = FactorModel::new(matrix.users.clone(), matrix.jobs.clone(), k, lambda, mu);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model
        .user_factors
        .iter_mut()
        .chain(model.job_factors.iter_mut())
        .chain(model.implicit_factors.iter_mut())
    {
        for x in v.iter_mut() {
            *x = rng.random_range(-0.01..=0.01);
        }
    }

    let empty: Vec<Vec<usize>> = vec![Vec::new(); matrix.users.len()];
    let sets: &[Vec<usize>] = match implicit {
        Some(s) if params.implicit => {
            if s.len() != matrix.users.len() {
                return Err(MfError::InvalidParams(
                    "implicit sets must cover every matrix user".into(),
                ));
            }
            s
        }
        _ => {
            // Implicit factors stay at zero for plain models.
            for v in &mut model.implicit_factors {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
            &empty
        }
    };

    let mut report = TrainReport::default();
    report.objective_trace.push(objective(&model, matrix, sets));
    let check = |model: &FactorModel, step: &str| {
        if model.all_finite() {
            Ok(())
        } else {
            Err(MfError::NonFinite(step.to_string()))
        }
    };

    for iter in 0..params.iterations {
        // Users: solve [U_u; b_u] with the implicit offset held fixed.
        let solved: Vec<Vec<f64>> = (0..matrix.users.len())
            .into_par_iter()
            .map(|u| {
                let offset = model.implicit_sum(&sets[u]);
                let rows: Vec<(Vec<f64>, f64)> = matrix.by_user[u]
                    .iter()
                    .map(|&(j, r)| {
                        let jf = &model.job_factors[j];
                        let off = offset.as_ref().map_or(0.0, |o| dot(jf, o));
                        let mut f = jf.clone();
                        f.push(1.0);
                        (f, r - mu - model.job_bias[j] - off)
                    })
                    .collect();
                ridge_solve(&rows, k + 1, lambda)
            })
            .collect();
        for (u, mut x) in solved.into_iter().enumerate() {
            model.user_bias[u] = x.pop().expect("k + 1");
            model.user_factors[u] = x;
        }
        check(&model, &format!("user step {iter}"))?;
        report.objective_trace.push(objective(&model, matrix, sets));

        // Jobs: solve [J_j; b_j] against effective user vectors.
        let effective: Vec<Vec<f64>> = (0..matrix.users.len())
            .map(|u| model.effective_user(u, &sets[u]))
            .collect();
        let solved: Vec<Vec<f64>> = (0..matrix.jobs.len())
            .into_par_iter()
            .map(|j| {
                let rows: Vec<(Vec<f64>, f64)> = matrix.by_job[j]
                    .iter()
                    .map(|&(u, r)| {
                        let mut f = effective[u].clone();
                        f.push(1.0);
                        (f, r - mu - model.user_bias[u])
                    })
                    .collect();
                ridge_solve(&rows, k + 1, lambda)
            })
            .collect();
        for (j, mut x) in solved.into_iter().enumerate() {
            model.job_bias[j] = x.pop().expect("k + 1");
            model.job_factors[j] = x;
        }
        check(&model, &format!("job step {iter}"))?;
        report.objective_trace.push(objective(&model, matrix, sets));

        if params.implicit {
            implicit_step(&mut model, matrix, sets);
            check(&model, &format!("implicit step {iter}"))?;
            report.objective_trace.push(objective(&model, matrix, sets));
        }
        report.mse_trace.push(observed_mse(&model, matrix, sets));
    }
    Ok((model, report))
}

/// Block coordinate pass over implicit factors, one item at a time.
fn implicit_step(model: &mut FactorModel, matrix: &RatingsMatrix, sets: &[Vec<usize>]) {
    let k = model.k;
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); matrix.jobs.len()];
    for (u, items) in sets.iter().enumerate() {
        for &i in items {
            holders[i].push(u);
        }
    }
    let scale: Vec<f64> = sets
        .iter()
        .map(|s| {
            if s.is_empty() {
                0.0
            } else {
                (s.len() as f64).powf(-0.5)
            }
        })
        .collect();
    // Running z_u = U_u + scale_u * sum Y.
    let mut z: Vec<Vec<f64>> = (0..matrix.users.len())
        .map(|u| model.effective_user(u, &sets[u]))
        .collect();
    for (i, holding) in holders.iter().enumerate() {
        if holding.is_empty() {
            model.implicit_factors[i] = vec![0.0; k];
            continue;
        }
        let yi = model.implicit_factors[i].clone();
        let mut rows = Vec::new();
        for &u in holding {
            let s = scale[u];
            let base: Vec<f64> = z[u].iter().zip(&yi).map(|(a, b)| a - s * b).collect();
            for &(j, r) in &matrix.by_user[u] {
                let jf = &model.job_factors[j];
                let target = r - model.mu - model.user_bias[u] - model.job_bias[j] - dot(jf, &base);
                rows.push((jf.iter().map(|x| x * s).collect::<Vec<f64>>(), target));
            }
        }
        let new = ridge_solve(&rows, k, model.lambda);
        for &u in holding {
            let s = scale[u];
            for a in 0..k {
                z[u][a] += s * (new[a] - yi[a]);
            }
        }
        model.implicit_factors[i] = new;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{dedupe, InteractionEvent};
    use chrono::{Duration, TimeZone, Utc};

    fn signal(u: &str, j: &str, kind: EventKind, day: i64) -> InteractionEvent {
        InteractionEvent {
            user_id: u.into(),
            job_id: j.into(),
            kind,
            timestamp: Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap() + Duration::days(day),
            query_id: None,
        }
    }

    #[test]
    fn matrix_signals_and_conflicts() {
        let m = build_matrix(&dedupe(&[signal("u", "j", EventKind::Apply, 0)]));
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get("u", "j"), Some(1.0));

        let m = build_matrix(&dedupe(&[
            signal("u", "j", EventKind::EmailOpenNoClick, 0),
            signal("u", "j", EventKind::Apply, 3),
            signal("u", "k", EventKind::EmailOpenNoClick, 0),
            signal("u", "c", EventKind::Click, 0),
        ]));
        assert_eq!(m.get("u", "j"), Some(1.0));
        assert_eq!(m.get("u", "k"), Some(-1.0));
        assert_eq!(m.get("u", "c"), None);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn rank_one_full_matrix_fits() {
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let entries: Vec<_> = ids
            .iter()
            .flat_map(|u| ids.iter().map(move |j| (u.as_str(), j.as_str(), 1.0)))
            .collect();
        let m = RatingsMatrix::from_entries(entries);
        let params = AlsParams {
            k: 1,
            lambda: 1e-6,
            iterations: 10,
            implicit: false,
        };
        let (model, report) = als_train(&m, &params, None, 1).unwrap();
        assert!(*report.mse_trace.last().unwrap() < 1e-6);
        assert!((model.predict_biased("0", "3").unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn heavy_regularization_shrinks_to_mean() {
        let m = RatingsMatrix::from_entries([
            ("a", "x", 1.0),
            ("a", "y", -1.0),
            ("b", "x", 1.0),
            ("b", "z", 1.0),
        ]);
        let params = AlsParams {
            k: 3,
            lambda: 1e9,
            iterations: 5,
            implicit: false,
        };
        let (model, _) = als_train(&m, &params, None, 2).unwrap();
        for u in ["a", "b"] {
            for j in ["x", "y", "z"] {
                assert!((model.predict_biased(u, j).unwrap() - model.mu).abs() < 1e-6);
            }
        }
        assert!((model.mu - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = RatingsMatrix::from_entries([
            ("a", "x", 1.0),
            ("a", "y", -1.0),
            ("b", "x", 1.0),
            ("c", "z", 1.0),
        ]);
        let params = AlsParams {
            k: 2,
            ..Default::default()
        };
        let (a, _) = als_train(&m, &params, None, 7).unwrap();
        let (b, _) = als_train(&m, &params, None, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_formulas() {
        let mut model =
            FactorModel::new(vec!["u".into()], vec!["a".into(), "b".into()], 2, 0.1, 0.2);
        assert_eq!(model.predict_biased("u", "a").unwrap(), 0.2);
        model.mu = 0.0;
        model.user_bias[0] = 0.1;
        model.job_bias[0] = -0.3;
        assert!((model.predict_biased("u", "a").unwrap() + 0.2).abs() < 1e-15);

        model.user_factors[0] = vec![0.5, -1.0];
        model.job_factors[0] = vec![2.0, 0.25];
        model.job_factors[1] = vec![-1.0, 1.0];
        let expected = 0.1 - 0.3 + (0.5 * 2.0 - 1.0 * 0.25);
        assert!((model.predict_biased("u", "a").unwrap() - expected).abs() < 1e-15);

        // zero implicit factor or empty set: identical to biased
        let biased = model.predict_biased("u", "a").unwrap();
        assert_eq!(
            model.predict_implicit("u", "a", &[]).unwrap().to_bits(),
            biased.to_bits()
        );
        assert_eq!(
            model.predict_implicit("u", "a", &["b"]).unwrap().to_bits(),
            biased.to_bits()
        );
        // unknown implicit item skipped
        assert_eq!(
            model
                .predict_implicit("u", "a", &["zzz"])
                .unwrap()
                .to_bits(),
            biased.to_bits()
        );

        model.implicit_factors[0] = vec![1.0, 0.0];
        model.implicit_factors[1] = vec![0.0, 2.0];
        let s = 1.0 / 2.0f64.sqrt();
        let z = [0.5 + s * 1.0, -1.0 + s * 2.0];
        let expected = 0.1 - 0.3 + 2.0 * z[0] + 0.25 * z[1];
        assert!((model.predict_implicit("u", "a", &["a", "b"]).unwrap() - expected).abs() < 1e-12);

        assert!(matches!(
            model.predict_biased("nobody", "a"),
            Err(MfError::UnknownUser(_))
        ));
        assert!(matches!(
            model.predict_biased("u", "nothing"),
            Err(MfError::UnknownJob(_))
        ));
    }

    #[test]
    fn recommend_ranks_and_excludes() {
        let mut model = FactorModel::new(
            vec!["u".into()],
            vec!["a".into(), "b".into(), "c".into()],
            1,
            0.1,
            0.0,
        );
        // all equal: id order
        let recs = model
            .recommend("u", 10, &HashSet::new(), &[], |_| true)
            .unwrap();
        assert_eq!(
            recs.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
        model.job_bias = vec![0.1, 0.3, 0.2];
        let exclude: HashSet<&str> = ["b"].into_iter().collect();
        let recs = model.recommend("u", 1, &exclude, &[], |_| true).unwrap();
        assert_eq!(recs, vec![("c".to_string(), 0.2)]);
        let recs = model
            .recommend("u", 5, &HashSet::new(), &[], |j| j != "c")
            .unwrap();
        assert_eq!(recs.len(), 2);
        assert!(matches!(
            model.recommend("v", 1, &HashSet::new(), &[], |_| true),
            Err(MfError::UnknownUser(_))
        ));
    }

    #[test]
    fn implicit_training_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut entries = Vec::new();
        let users: Vec<String> = (0..12).map(|i| format!("u{i:02}")).collect();
        let jobs: Vec<String> = (0..9).map(|i| format!("j{i}")).collect();
        for u in &users {
            for j in &jobs {
                if rng.random_bool(0.4) {
                    entries.push((
                        u.as_str(),
                        j.as_str(),
                        if rng.random_bool(0.6) { 1.0 } else { -1.0 },
                    ));
                }
            }
        }
        let m = RatingsMatrix::from_entries(entries);
        let sets: Vec<Vec<usize>> = (0..m.users().len())
            .map(|_| {
                (0..m.jobs().len())
                    .filter(|_| rng.random_bool(0.3))
                    .collect()
            })
            .collect();
        let params = AlsParams {
            k: 3,
            lambda: 0.05,
            iterations: 6,
            implicit: true,
        };
        let (model, report) = als_train(&m, &params, Some(&sets), 9).unwrap();
        assert_eq!(report.objective_trace.len(), 1 + 3 * 6);
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{w:?}");
        }
        assert!(model.implicit_factors.iter().flatten().any(|&y| y != 0.0));
    }

    #[test]
    fn dump_round_trip() {
        let m = RatingsMatrix::from_entries([("a", "x", 1.0), ("a", "y", -1.0), ("b", "x", 1.0)]);
        let (model, _) = als_train(
            &m,
            &AlsParams {
                k: 2,
                ..Default::default()
            },
            None,
            4,
        )
        .unwrap();
        let mut buf = Vec::new();
        model.write(&mut buf).unwrap();
        let back = FactorModel::read(buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn invalid_inputs() {
        let empty = RatingsMatrix::default();
        assert!(matches!(
            als_train(&empty, &AlsParams::default(), None, 0),
            Err(MfError::EmptyMatrix)
        ));
        let m = RatingsMatrix::from_entries([("a", "x", 1.0)]);
        let bad = AlsParams {
            k: 0,
            ..Default::default()
        };
        assert!(matches!(
            als_train(&m, &bad, None, 0),
            Err(MfError::InvalidParams(_))
        ));
    }

    #[test]
    fn zero_lambda_is_solvable() {
        let m = RatingsMatrix::from_entries([("a", "x", 1.0), ("a", "y", -1.0), ("b", "x", 1.0)]);
        let params = AlsParams {
            k: 4,
            lambda: 0.0,
            iterations: 3,
            implicit: false,
        };
        let (model, _) = als_train(&m, &params, None, 4).unwrap();
        assert!(model.all_finite());
    }
}
