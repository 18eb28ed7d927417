use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqrank::numerics::checkpoint::{self, Dtype};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqrank"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn seqrank")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stderr),
        stdout(&o)
    );
    stdout(&o)
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn fixture_corpus() -> String {
    repo_path("fixtures/corpus").to_string_lossy().into_owned()
}

fn field<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= line in:\n{out}"))
}

const SMALL: &[&str] = &["--users", "20", "--pins", "120", "--topics", "6", "--horizon_days", "20"];

fn synth(dir: &Path, seed: &str) -> String {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--seed", seed, "--out", out];
    args.extend_from_slice(SMALL);
    ok(&args)
}

#[test]
fn bad_flag_prints_usage_and_exits_2() {
    let o = run(&["synth", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let o = run(&["train", "--corpus", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn invalid_value_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--n_users", "ten", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_same_seed_same_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "7");
    let b = synth(&tmp.path().join("b"), "7");
    let c = synth(&tmp.path().join("c"), "8");
    assert_eq!(field(&a, "digest"), field(&b, "digest"));
    assert_ne!(field(&a, "digest"), field(&c, "digest"));
    for f in ["corpus.jsonl", "pins.jsonl", "users.jsonl", "meta.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn train_writes_log_and_round_tripping_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let corpus = fixture_corpus();
    ok(&[
        "train", "--corpus", &corpus, "--out", out, "--loss", "dense_all_action", "--steps", "50", "--ranker_steps", "10",
        "--seed", "3",
    ]);
    let log = fs::read_to_string(tmp.path().join("metrics.log")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let (step, loss) = l.split_once(' ').unwrap();
            assert_eq!(step, format!("step={i}"));
            loss.strip_prefix("loss=").unwrap().parse().unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 50);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&losses[40..]) < mean(&losses[..10]), "{losses:?}");

    let bytes = fs::read(tmp.path().join("checkpoint.dsq")).unwrap();
    let store = checkpoint::decode(&bytes).unwrap();
    assert_eq!(checkpoint::encode(&store, Dtype::F64), bytes);
    assert!(store.iter().any(|p| p.name.starts_with("ranker/")));

    let conf = fs::read_to_string(tmp.path().join("run.conf")).unwrap();
    assert!(conf.lines().any(|l| l == "steps = 50"));
}

#[test]
fn pipeline_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = fixture_corpus();
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for run_dir in ["r1", "r2"] {
        let out = tmp.path().join(run_dir);
        let out = out.to_str().unwrap();
        ok(&["train", "--corpus", &corpus, "--out", out, "--steps", "15", "--ranker_steps", "15"]);
        reports.push(ok(&["eval", "--corpus", &corpus, "--out", out]));
        checkpoints.push(fs::read(Path::new(out).join("checkpoint.dsq")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(checkpoints[0], checkpoints[1]);
    let machine: Vec<&str> = reports[0].lines().filter(|l| l.matches(',').count() == 3).collect();
    assert!(machine.iter().any(|l| l.starts_with("recall@10,dense_all_action,")));
    assert!(machine.iter().any(|l| l.starts_with("ranker_auc,ranker,")));
}

#[test]
fn rank_sorts_candidates_by_score() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let corpus = fixture_corpus();
    ok(&["train", "--corpus", &corpus, "--out", out, "--steps", "5", "--ranker_steps", "5"]);
    let cands = tmp.path().join("cands");
    fs::write(&cands, "4\n40\n# comment\n\n90\n").unwrap();
    let text = ok(&[
        "rank", "--corpus", &corpus, "--out", out, "--user", "2", "--candidates", cands.to_str().unwrap(), "--tmask", "0",
    ]);
    let rows: Vec<(u32, f64)> = text
        .lines()
        .map(|l| {
            let (p, s) = l.split_once(' ').unwrap();
            (p.parse().unwrap(), s.parse().unwrap())
        })
        .collect();
    let mut ids: Vec<u32> = rows.iter().map(|r| r.0).collect();
    ids.sort();
    assert_eq!(ids, vec![4, 40, 90]);
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(rows.iter().all(|r| r.1 > 0.0 && r.1 < 1.0));

    let o = run(&[
        "rank", "--corpus", &corpus, "--out", out, "--user", "9999", "--candidates", cands.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plan_named_reproduces_table() {
    let graph = repo_path("fixtures/ranking_model.graph");
    let text = ok(&["plan", "--graph", graph.to_str().unwrap(), "--mode", "named"]);
    let rows: Vec<(String, f64)> = text
        .lines()
        .filter(|l| l.starts_with("plan="))
        .map(|l| {
            let mut label = String::new();
            let mut pct = f64::NAN;
            for kv in l.split_whitespace() {
                let (k, v) = kv.split_once('=').unwrap();
                match k {
                    "plan" => label = v.to_string(),
                    "increase_pct" => pct = v.parse().unwrap(),
                    _ => {}
                }
            }
            (label, pct)
        })
        .collect();
    let expected = [300.0, 400.0, 250.0, 150.0, 10.0];
    assert_eq!(rows.len(), 5, "{text}");
    for ((label, got), want) in rows.iter().zip(expected) {
        assert!((got - want).abs() <= 0.1 * want, "{label}: {got} vs {want}");
    }
}

#[test]
fn plan_search_finds_mixed_plan() {
    let graph = repo_path("fixtures/ranking_model.graph");
    let text = ok(&["plan", "--graph", graph.to_str().unwrap(), "--mode", "search", "--transfer", "overhead=8,bw=1000"]);
    assert_eq!(field(&text, "matches_plan"), "e");
    assert!(field(&text, "mode").starts_with("Exhaustive"));
}

#[test]
fn plan_rejects_malformed_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g");
    fs::write(&g, "node a other 1 - 0\nedge a b\n").unwrap();
    let o = run(&["plan", "--graph", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_precedence_flag_over_file_over_default() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    // n_users: file and flag; n_pins: file only; n_topics: default only.
    fs::write(&conf, "# three-way fixture\nn_users = 20\nn_pins = 90\nhorizon_days = 10\n").unwrap();
    let out = tmp.path().join("c");
    let text = ok(&[
        "synth", "--config", conf.to_str().unwrap(), "--n_users", "12", "--out", out.to_str().unwrap(),
    ]);
    assert!(text.starts_with("users=12 pins=90 "), "{text}");
    let meta = fs::read_to_string(out.join("meta.json")).unwrap();
    assert!(meta.contains("\"n_topics\": 16"), "{meta}");
    assert!(meta.contains("\"horizon_days\": 10"), "{meta}");

    fs::write(&conf, "n_users = 20\nbogus = 1\n").unwrap();
    let o = run(&["synth", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck", "--coords", "40"]);
    assert_eq!(text.lines().last(), Some("ok"));
}
