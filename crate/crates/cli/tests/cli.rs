use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jobrec::pipeline::{self, BuildManifest, MANIFEST_FILE};
use jobrec::recommend::{build_profiles, classify_user, UserType};
use sha2::{Digest, Sha256};

fn jobrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jobrec"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = jobrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join("corpus");
    ok(&[
        "synth",
        "--clusters",
        "3",
        "--jobs-per-cluster",
        "25",
        "--users",
        "120",
        "--noise",
        "0.1",
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out
}

fn build(corpus: &Path, out: &Path) {
    ok(&[
        "build",
        "--events",
        s(&corpus.join("events.csv")),
        "--jobs",
        s(&corpus.join("jobs.csv")),
        "--embeddings",
        s(&corpus.join("embeddings.txt")),
        "--out",
        s(out),
    ]);
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let bytes = fs::read(&path).unwrap();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            hex::encode(Sha256::digest(&bytes)),
        );
    }
    out
}

#[test]
fn synth_and_build_reruns_are_byte_identical() {
    let mut synth_hashes = Vec::new();
    let mut build_hashes = Vec::new();
    for _ in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth(dir.path(), 11);
        let model = dir.path().join("model");
        build(&corpus, &model);
        synth_hashes.push(hash_dir(&corpus));
        build_hashes.push(hash_dir(&model));
    }
    assert_eq!(synth_hashes[0].len(), 4);
    assert_eq!(build_hashes[0].len(), 5);
    assert!(synth_hashes.windows(2).all(|w| w[0] == w[1]));
    assert!(build_hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn manifest_counts_match_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 3);
    let model = dir.path().join("model");
    build(&corpus, &model);
    let manifest: BuildManifest =
        serde_json::from_str(&fs::read_to_string(model.join(MANIFEST_FILE)).unwrap()).unwrap();
    let lines = |f: &str| fs::read_to_string(model.join(f)).unwrap().lines().count();
    assert_eq!(manifest.graph.digraph_edges, lines(pipeline::DIGRAPH_FILE));
    assert_eq!(manifest.graph.costat_edges, lines(pipeline::EDGES_FILE));
    assert_eq!(manifest.graph.nodes, lines(pipeline::NODES_FILE));
    assert!(manifest.graph.content_edges > 0);
    assert!(manifest.warnings.is_empty());
}

#[test]
fn missing_embeddings_build_behavioral_graph() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 3);
    let model = dir.path().join("model");
    let out = Command::new(env!("CARGO_BIN_EXE_jobrec"))
        .args([
            "build",
            "--events",
            s(&corpus.join("events.csv")),
            "--jobs",
            s(&corpus.join("jobs.csv")),
            "--embeddings",
            s(&dir.path().join("missing.txt")),
            "--out",
            s(&model),
        ])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("content edges disabled"));
    let manifest: BuildManifest =
        serde_json::from_str(&fs::read_to_string(model.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.graph.content_edges, 0);
    assert_eq!(manifest.warnings.len(), 1);
}

struct Served {
    summary: serde_json::Value,
    rows: Vec<(String, String)>,
}

fn serve(corpus: &Path, model: &Path, users: &Path, ids: &Path, out: &Path) -> Served {
    let stdout = ok(&[
        "serve-batch",
        "--model",
        s(model),
        "--users",
        s(users),
        "--events",
        s(&corpus.join("events.csv")),
        "--user-ids",
        s(ids),
        "--out",
        s(out),
    ]);
    let text = fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("user_id,rank,job_id,score,provenance"));
    let rows = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5);
            (f[0].to_string(), f[4].to_string())
        })
        .collect();
    Served {
        summary: serde_json::from_str(&stdout).unwrap(),
        rows,
    }
}

#[test]
fn anonymous_users_get_global_pagerank_only() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 5);
    let model = dir.path().join("model");
    build(&corpus, &model);
    let users = dir.path().join("anon.csv");
    fs::write(
        &users,
        "user_id,resume_category,lat,lon,registered\nanon1,,,,false\nanon2,,,,false\n",
    )
    .unwrap();
    let ids = dir.path().join("ids.txt");
    fs::write(&ids, "anon1\nanon2\n").unwrap();
    let served = serve(&corpus, &model, &users, &ids, &dir.path().join("out.csv"));
    assert_eq!(served.rows.len(), 30);
    assert!(served.rows.iter().all(|(_, p)| p == "global_pr"));
    assert_eq!(served.summary["by_user_type"]["anonymous"], 2);
}

#[test]
fn empty_id_file_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 5);
    let model = dir.path().join("model");
    build(&corpus, &model);
    let ids = dir.path().join("ids.txt");
    fs::write(&ids, "").unwrap();
    let served = serve(
        &corpus,
        &model,
        &corpus.join("users.csv"),
        &ids,
        &dir.path().join("out.csv"),
    );
    assert!(served.rows.is_empty());
    assert_eq!(served.summary["users_served"], 0);
}

#[test]
fn provenance_follows_user_classification() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 9);
    let model = dir.path().join("model");
    build(&corpus, &model);

    let users_path = dir.path().join("users.csv");
    let mut users_text = fs::read_to_string(corpus.join("users.csv")).unwrap();
    users_text.push_str("walkin,,,,false\n");
    fs::write(&users_path, &users_text).unwrap();
    let users = pipeline::load_users(&users_path).unwrap().records;
    let mut ids: Vec<String> = users.iter().map(|u| u.user_id.clone()).collect();
    ids.push("ghost".into());
    let ids_path = dir.path().join("ids.txt");
    fs::write(&ids_path, ids.join("\n")).unwrap();

    let served = serve(
        &corpus,
        &model,
        &users_path,
        &ids_path,
        &dir.path().join("out.csv"),
    );

    // replay the classification independently of the batch path
    let manifest: BuildManifest =
        serde_json::from_str(&fs::read_to_string(model.join(MANIFEST_FILE)).unwrap()).unwrap();
    let events = pipeline::load_events(&corpus.join("events.csv"))
        .unwrap()
        .records;
    let profiles = build_profiles(
        &users,
        &events,
        &manifest.reference().unwrap(),
        manifest.window_days,
    );
    let types: HashMap<&str, UserType> = profiles
        .iter()
        .map(|(id, p)| (id.as_str(), classify_user(p)))
        .collect();
    let mut expected: BTreeMap<&str, u64> = BTreeMap::new();
    for t in types.values() {
        let name = match t {
            UserType::Active => "active",
            UserType::PassiveOrNewWithProfile => "passive_or_new_with_profile",
            UserType::Anonymous => "anonymous",
        };
        *expected.entry(name).or_default() += 1;
    }
    assert!(
        expected.len() == 3,
        "corpus should mix all user types: {expected:?}"
    );
    for (name, count) in &expected {
        assert_eq!(served.summary["by_user_type"][name], *count, "{name}");
    }
    assert_eq!(served.summary["unknown_users"], 1);

    let mut behavioral: HashMap<&str, usize> = HashMap::new();
    for (user, prov) in &served.rows {
        match types[user.as_str()] {
            UserType::Anonymous => assert_eq!(prov, "global_pr"),
            UserType::PassiveOrNewWithProfile => {
                assert!(prov == "personalized_pr" || prov == "global_pr")
            }
            UserType::Active => {
                if prov == "level1" || prov == "level2" {
                    *behavioral.entry(user).or_default() += 1;
                }
            }
        }
    }
    // active users only fall back to PageRank when the graph yields too few
    for (user, prov) in &served.rows {
        if types[user.as_str()] == UserType::Active
            && (prov == "personalized_pr" || prov == "global_pr")
        {
            assert!(
                behavioral.get(user.as_str()).copied().unwrap_or(0) < 15,
                "{user}"
            );
        }
    }
}

#[test]
fn recommend_prints_ranked_lines() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 5);
    let model = dir.path().join("model");
    build(&corpus, &model);
    let out = ok(&[
        "recommend",
        "--model",
        s(&model),
        "--users",
        s(&corpus.join("users.csv")),
        "--events",
        s(&corpus.join("events.csv")),
        "--user",
        "u000001",
        "--k",
        "7",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[0], (i + 1).to_string());
        assert!(f[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn exit_codes_follow_error_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    let out = jobrec(&[
        "build",
        "--events",
        s(&missing),
        "--jobs",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[input]"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[weights]\nw9 = 1.0\n").unwrap();
    let out = jobrec(&[
        "--config",
        s(&cfg),
        "build",
        "--events",
        s(&missing),
        "--jobs",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));

    let out = jobrec(&["synth", "--clusters", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mf_train_evaluate_and_connectivity_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 2);
    let dump = dir.path().join("mf.txt");
    ok(&[
        "mf-train",
        "--events",
        s(&corpus.join("events.csv")),
        "--out",
        s(&dump),
    ]);
    let model =
        jobrec::mf::FactorModel::read(std::io::BufReader::new(fs::File::open(&dump).unwrap()))
            .unwrap();
    assert_eq!(model.k, 32);

    let json = dir.path().join("report.json");
    let text = ok(&[
        "evaluate",
        "--train",
        s(&corpus.join("events.csv")),
        "--jobs",
        s(&corpus.join("jobs.csv")),
        "--users",
        s(&corpus.join("users.csv")),
        "--embeddings",
        s(&corpus.join("embeddings.txt")),
        "--k",
        "10",
        "--systems",
        "gbr,cf",
        "--seed",
        "4",
    ]
    .into_iter()
    .chain(["--json", s(&json)])
    .collect::<Vec<_>>());
    assert!(text.contains("precision@10"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["systems"].as_array().unwrap().len(), 2);
    assert_eq!(report["seed"], 4);

    let conn = ok(&[
        "connectivity",
        "--events",
        s(&corpus.join("events.csv")),
        "--jobs",
        s(&corpus.join("jobs.csv")),
        "--embeddings",
        s(&corpus.join("embeddings.txt")),
        "--json",
    ]);
    let conn: serde_json::Value = serde_json::from_str(&conn).unwrap();
    assert!(conn.is_object());
}
