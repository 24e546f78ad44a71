//! Hybrid job recommender built on a job-to-job graph.
//!
//! Behavioral co-statistics and content similarity are aggregated into a
//! directed, weighted job graph. Recommendations come from one- and two-hop
//! propagation for active users and from PageRank for everyone else. A
//! matrix-factorization baseline and an evaluation harness sit alongside.

pub mod catalog;
pub mod config;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod mf;
pub mod pipeline;
pub mod recommend;
pub mod scoring;
