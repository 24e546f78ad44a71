use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jobrec::catalog::JobCatalog;
use jobrec::config::EngineConfig;
use jobrec::eval::synth::{synth_corpus, write_corpus, SynthParams};
use jobrec::eval::{build_graph, connectivity_report, evaluate, EvalInputs, System};
use jobrec::pipeline::{self, BuildInputs, PipelineError, ServeInputs};
use jobrec::recommend::{build_profiles, Recommender};

#[derive(Parser)]
#[command(
    name = "jobrec",
    version,
    about = "Graph-based job recommendation pipeline"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// RFC 3339 reference date; overrides the configured one.
    #[arg(long, global = true)]
    reference_date: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the recommendation graph and write a model directory.
    Build {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        jobs: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print recommendations for one user.
    Recommend {
        #[command(flatten)]
        serve: ServeArgs,
        #[arg(long)]
        user: String,
    },
    /// Recommend for every id in a file and write one merged CSV.
    ServeBatch {
        #[command(flatten)]
        serve: ServeArgs,
        /// One user id per line.
        #[arg(long)]
        user_ids: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the matrix factorization baseline and write its dump.
    MfTrain {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit implicit click factors as well.
        #[arg(long)]
        implicit: bool,
    },
    /// Offline comparison of recommenders on a temporal holdout.
    Evaluate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        jobs: PathBuf,
        #[arg(long)]
        users: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "gbr,cf,mf")]
        systems: Vec<System>,
        /// Writes the structured report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic clustered corpus.
    Synth {
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 200)]
        jobs_per_cluster: usize,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report how many active jobs each edge-type subset connects.
    Connectivity {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        jobs: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Directory written by `build`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    users: PathBuf,
    /// Event log used for user histories.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

type Result<T> = std::result::Result<T, PipelineError>;

fn load_config(cli: &Cli) -> Result<EngineConfig> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::load(path).map_err(PipelineError::config)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(PipelineError::config)?;
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))
}

fn io_err(e: io::Error) -> PipelineError {
    PipelineError::internal(format!("writing output: {e}"))
}

struct ServeData {
    model: pipeline::Model,
    users: Vec<jobrec::ingest::UserRecord>,
    events: Vec<jobrec::ingest::InteractionEvent>,
    embeddings: Option<jobrec::ingest::EmbeddingTable>,
}

fn load_serve(args: &ServeArgs) -> Result<ServeData> {
    let model = pipeline::load_model(&args.model)?;
    let users = pipeline::load_users(&args.users)?.records;
    let events = match &args.events {
        Some(p) => pipeline::load_events(p)?.records,
        None => Vec::new(),
    };
    let embeddings = match &args.embeddings {
        Some(p) => Some(pipeline::load_embeddings(p)?.records),
        None => None,
    };
    Ok(ServeData {
        model,
        users,
        events,
        embeddings,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    let reference = cli.reference_date.as_deref();
    let mut stdout = io::stdout().lock();
    match &cli.command {
        Command::Build {
            events,
            jobs,
            embeddings,
            out,
        } => {
            let inputs = BuildInputs {
                events,
                jobs,
                embeddings: embeddings.as_deref(),
            };
            let manifest = pipeline::build(&config, &inputs, reference, out)?;
            writeln!(
                stdout,
                "nodes={} costat_edges={} content_edges={} digraph_edges={}",
                manifest.graph.nodes,
                manifest.graph.costat_edges,
                manifest.graph.content_edges,
                manifest.graph.digraph_edges
            )
            .map_err(io_err)?;
        }
        Command::Recommend { serve, user } => {
            if let Some(k) = serve.k {
                config.recommend.k = k;
            }
            config.validate().map_err(PipelineError::config)?;
            let data = load_serve(serve)?;
            let reference = data.model.manifest.reference()?;
            let profiles =
                build_profiles(&data.users, &data.events, &reference, config.window_days);
            let profile = profiles
                .get(user.as_str())
                .ok_or_else(|| PipelineError::input(format!("unknown user {user:?}")))?;
            let recommender = Recommender::new(
                &data.model.digraph,
                data.embeddings.as_ref(),
                config.recommend,
                reference,
            );
            let list = recommender.recommend(profile);
            for d in &list.diagnostics {
                log::info!("{d}");
            }
            for (rank, e) in list.entries.iter().enumerate() {
                writeln!(
                    stdout,
                    "{},{},{},{}",
                    rank + 1,
                    e.job_id,
                    e.score,
                    e.provenance.as_str()
                )
                .map_err(io_err)?;
            }
        }
        Command::ServeBatch {
            serve,
            user_ids,
            out,
        } => {
            if let Some(k) = serve.k {
                config.recommend.k = k;
            }
            config.validate().map_err(PipelineError::config)?;
            let data = load_serve(serve)?;
            let ids = pipeline::load_user_ids(user_ids)?;
            let inputs = ServeInputs {
                users: &data.users,
                events: &data.events,
                embeddings: data.embeddings.as_ref(),
            };
            let summary = pipeline::serve_batch(
                &data.model,
                &ids,
                &inputs,
                config.recommend,
                config.window_days,
                create(out)?,
            )?;
            let json = serde_json_string(&summary)?;
            writeln!(stdout, "{json}").map_err(io_err)?;
        }
        Command::MfTrain {
            events,
            out,
            implicit,
        } => {
            config.mf.implicit |= *implicit;
            let events = pipeline::load_events(events)?.records;
            let reference = pipeline::resolve_reference(reference, &config, &events)?;
            let (model, report) = pipeline::train_mf(&config, &events, &reference, config.seed)?;
            model.write(create(out)?).map_err(PipelineError::internal)?;
            writeln!(
                stdout,
                "users={} jobs={} k={} objective={} mse={}",
                model.users.len(),
                model.jobs.len(),
                model.k,
                report.objective_trace.last().copied().unwrap_or(f64::NAN),
                report.mse_trace.last().copied().unwrap_or(f64::NAN)
            )
            .map_err(io_err)?;
        }
        Command::Evaluate {
            train,
            jobs,
            users,
            embeddings,
            k,
            systems,
            json,
        } => {
            if let Some(k) = k {
                config.eval.k = *k;
            }
            config.validate().map_err(PipelineError::config)?;
            let events = pipeline::load_events(train)?.records;
            let catalog = JobCatalog::new(pipeline::load_jobs(jobs)?.records);
            let users = pipeline::load_users(users)?.records;
            let mut warnings = Vec::new();
            let table = pipeline::load_embeddings_optional(embeddings.as_deref(), &mut warnings)?;
            let inputs = EvalInputs {
                events: &events,
                jobs: &catalog,
                users: &users,
                embeddings: table.as_ref().map(|l| &l.records),
                reference: pipeline::resolve_reference(reference, &config, &events)?,
            };
            let report =
                evaluate(&inputs, &config, systems, config.seed).map_err(PipelineError::input)?;
            write!(stdout, "{}", report.to_text()).map_err(io_err)?;
            if let Some(path) = json {
                let mut w = create(path)?;
                writeln!(w, "{}", serde_json_string(&report)?).map_err(io_err)?;
                w.flush().map_err(io_err)?;
            }
        }
        Command::Synth {
            clusters,
            jobs_per_cluster,
            users,
            noise,
            out,
        } => {
            let mut params = SynthParams {
                clusters: *clusters,
                jobs_per_cluster: *jobs_per_cluster,
                users: *users,
                noise: *noise,
                ..Default::default()
            };
            if let Some(seed) = cli.seed {
                params.seed = seed;
            }
            if let Some(r) = reference {
                params.reference_date = r.to_string();
            }
            let corpus = synth_corpus(&params).map_err(PipelineError::config)?;
            write_corpus(&corpus, out).map_err(PipelineError::input)?;
            writeln!(
                stdout,
                "events={} jobs={} users={} cold_jobs={}",
                corpus.events.len(),
                corpus.jobs.len(),
                corpus.users.len(),
                corpus.cold_jobs.len()
            )
            .map_err(io_err)?;
        }
        Command::Connectivity {
            events,
            jobs,
            embeddings,
            json,
        } => {
            let events = pipeline::load_events(events)?.records;
            let catalog = JobCatalog::new(pipeline::load_jobs(jobs)?.records);
            let mut warnings = Vec::new();
            let table = pipeline::load_embeddings_optional(embeddings.as_deref(), &mut warnings)?;
            let reference = pipeline::resolve_reference(reference, &config, &events)?;
            let build = build_graph(
                &events,
                &catalog,
                table.as_ref().map(|l| &l.records),
                &reference,
                &config,
            )
            .map_err(PipelineError::internal)?;
            let active = build.multigraph.catalog().active_indices();
            let report = connectivity_report(&build.multigraph, &build.content, &active);
            if *json {
                writeln!(stdout, "{}", report.to_json()).map_err(io_err)?;
            } else {
                writeln!(stdout, "active jobs: {}", report.active_jobs).map_err(io_err)?;
                for (subset, fraction) in report.rows() {
                    writeln!(stdout, "{subset:<40} {fraction:.4}").map_err(io_err)?;
                }
            }
        }
    }
    stdout.flush().map_err(io_err)
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(PipelineError::internal)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
