mod common;

use std::collections::HashSet;

use common::*;
use serde_json::{json, Value};

#[test]
fn pretrain_writes_checkpoint_and_one_loss_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 12);
    let config = write_config(
        dir.path(),
        "run.conf",
        &["corpus = corpus.jsonl", "out = out", "dim = 8", "pretrain_epochs = 4"],
    );
    assert_ok(&progemb(dir.path(), &config, &["pretrain"]));
    assert!(dir.path().join("out/checkpoint.bin").is_file());
    let lines = read_lines(&dir.path().join("out/pretrain_loss.jsonl"));
    assert_eq!(lines[0]["format"], "loss-curve");
    assert_eq!(lines.len() - 1, 4);
    for (i, row) in lines[1..].iter().enumerate() {
        assert_eq!(row["epoch"], i + 1);
        assert!(row["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn missing_corpus_exits_with_io_code_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.conf", &["corpus = nowhere/corpus.jsonl"]);
    let out = progemb(dir.path(), &config, &["pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/corpus.jsonl"));
}

#[test]
fn missing_config_flag_is_a_validation_error() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_progemb"))
        .arg("bench")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.conf", &["batchsize = 4"]);
    let out = progemb(dir.path(), &config, &["bench"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
}

#[test]
fn pretrain_is_deterministic_with_the_fallback_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10);
    let config = write_config(
        dir.path(),
        "run.conf",
        &["corpus = corpus.jsonl", "dim = 8", "pretrain_epochs = 3", "optimizer = sgd", "seed = 9"],
    );
    assert_ok(&progemb(dir.path(), &config, &["--out", "a", "pretrain"]));
    assert_ok(&progemb(dir.path(), &config, &["--out", "b", "pretrain"]));
    let a = std::fs::read(dir.path().join("a/pretrain_loss.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/pretrain_loss.jsonl")).unwrap();
    assert_eq!(a, b);
    let a = std::fs::read(dir.path().join("a/checkpoint.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b/checkpoint.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mining_twenty_passages_yields_five_distinct_negatives_each() {
    let dir = tempfile::tempdir().unwrap();
    pretrain_and_mine(dir.path());
    let passages = read_lines(&dir.path().join("base/passages.jsonl"));
    assert_eq!(passages.len() - 1, 20);
    let rows = read_lines(&dir.path().join("base/dataset.jsonl"));
    assert_eq!(rows[0]["format"], "dataset");
    let rows = &rows[1..];
    assert_eq!(rows.len(), 20);
    let ids: HashSet<&str> = passages[1..].iter().map(|p| p["id"].as_str().unwrap()).collect();
    for r in rows {
        let negs: Vec<&str> = r["negative_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        assert_eq!(negs.len(), 5);
        let unique: HashSet<&str> = negs.iter().copied().collect();
        assert_eq!(unique.len(), 5);
        assert!(!unique.contains(r["positive_id"].as_str().unwrap()));
        assert!(negs.iter().all(|n| ids.contains(n)));
        assert_eq!(r["provenance"]["judge"], "none");
    }
}

#[test]
fn always_relevant_judge_leaves_no_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = pretrain_and_mine(dir.path());
    lines.push("judge = always".into());
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir.path(), "judged.conf", &refs);
    assert_ok(&progemb(dir.path(), &config, &["--out", "judged", "mine"]));
    let rows = read_lines(&dir.path().join("judged/dataset.jsonl"));
    assert_eq!(rows.len() - 1, 20);
    assert!(rows[1..].iter().all(|r| r["negative_ids"].as_array().unwrap().is_empty()));
    let audit = read_lines(&dir.path().join("judged/mining_audit.jsonl"));
    assert_eq!(audit.len() - 1, 100);
    assert!(audit[1..].iter().all(|a| a["action"] == "removed"));
}

#[test]
fn zero_mining_depth_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.conf",
        &["corpus = corpus.jsonl", "checkpoint = ck.bin", "out = out", "mine_k = 0"],
    );
    let out = progemb(dir.path(), &config, &["mine"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mine_k"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn finetune_with_zero_epochs_copies_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = pretrain_and_mine(dir.path());
    lines.push("finetune_epochs = 0".into());
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir.path(), "ft.conf", &refs);
    assert_ok(&progemb(dir.path(), &config, &["--out", "ft", "finetune"]));
    let before = std::fs::read(dir.path().join("base/checkpoint.bin")).unwrap();
    let after = std::fs::read(dir.path().join("ft/checkpoint.bin")).unwrap();
    assert_eq!(before, after);
    assert_eq!(read_lines(&dir.path().join("ft/finetune_audit.jsonl")).len(), 1);
}

#[test]
fn finetune_audit_replays_the_momentum_recurrence() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = pretrain_and_mine(dir.path());
    lines.extend(["finetune_epochs = 3", "batch_size = 6", "alpha = 0.3", "beta = 0.2"].map(String::from));
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir.path(), "ft.conf", &refs);
    assert_ok(&progemb(dir.path(), &config, &["--out", "ft", "finetune"]));
    let audit = read_lines(&dir.path().join("ft/finetune_audit.jsonl"));
    let (alpha, beta) = (audit[0]["alpha"].as_f64().unwrap(), audit[0]["beta"].as_f64().unwrap());
    let rows = &audit[1..];
    // 20 examples in batches of 6 is 4 steps per epoch
    assert_eq!(rows.len(), 3 * 4);
    let mut bias = 0.0;
    for (s, row) in rows.iter().enumerate() {
        let f = |k: &str| row[k].as_f64().unwrap();
        assert_eq!(row["step"], s);
        assert!((f("bias_used") - bias).abs() < 1e-12, "step {s}");
        // the batch mean is recoverable from the threshold column
        let mean = f("sigma") + beta;
        bias = alpha * mean + (1.0 - alpha) * bias;
        assert!((f("bias") - bias).abs() < 1e-12, "step {s}: {} vs {bias}", f("bias"));
    }
}

#[test]
fn loss_mode_flag_is_recorded_in_the_audit_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = pretrain_and_mine(dir.path());
    lines.push("finetune_epochs = 1".into());
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir.path(), "ft.conf", &refs);
    for mode in ["infonce", "progressive"] {
        let out_dir = format!("ft-{mode}");
        assert_ok(&progemb(dir.path(), &config, &["--loss-mode", mode, "--out", &out_dir, "finetune"]));
        let audit = read_lines(&dir.path().join(out_dir).join("finetune_audit.jsonl"));
        assert_eq!(audit[0]["loss_mode"], mode);
        if mode == "infonce" {
            assert!(audit[1..].iter().all(|r| r["mean_weight"] == 1.0));
        }
    }
    let out = progemb(dir.path(), &config, &["--loss-mode", "focal", "finetune"]);
    assert_eq!(out.status.code(), Some(1));
}

/// Writes a three-word checkpoint whose words embed to the unit axes.
fn axis_checkpoint(path: &std::path::Path) {
    use progemb_core::checkpoint::Checkpoint;
    use progemb_core::encoder::ToyEncoder;
    use progemb_core::tokenizer::Vocabulary;

    let words = ["[PAD]", "[MASK]", "[UNK]", "a", "b", "c"].map(String::from).to_vec();
    let vocab = Vocabulary::from_words(words).unwrap();
    let mut table = vec![0.0; 6 * 3];
    for (row, axis) in [(3, 0), (4, 1), (5, 2)] {
        table[row * 3 + axis] = 1.0;
    }
    // reserved rows point somewhere harmless but nonzero
    for row in 0..3 {
        table[row * 3] = 1.0;
    }
    let identity = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let enc = ToyEncoder::from_parts(6, 3, table, identity).unwrap();
    Checkpoint::new(enc, None, vocab).unwrap().save(path).unwrap();
}

fn eval_fixture(dir: &std::path::Path, queries: &[(&str, &str)], qrels: &[(&str, &str, u32)]) -> std::path::PathBuf {
    axis_checkpoint(&dir.join("axes.bin"));
    let gallery = [("d1", "a"), ("d2", "a b"), ("d3", "b"), ("d4", "c")];
    write_lines(
        &dir.join("gallery.jsonl"),
        json!({"format": "corpus", "version": 1}),
        &gallery
            .iter()
            .map(|(id, text)| json!({"id": id, "text": text, "source_doc": id}))
            .collect::<Vec<_>>(),
    );
    write_lines(
        &dir.join("queries.jsonl"),
        json!({"format": "queries", "version": 1}),
        &queries.iter().map(|(id, text)| json!({"id": id, "text": text})).collect::<Vec<_>>(),
    );
    write_lines(
        &dir.join("qrels.jsonl"),
        json!({"format": "qrels", "version": 1}),
        &qrels
            .iter()
            .map(|(q, d, g)| json!({"query_id": q, "doc_id": d, "grade": g}))
            .collect::<Vec<_>>(),
    );
    write_config(
        dir,
        "eval.conf",
        &[
            "checkpoint = axes.bin",
            "gallery = gallery.jsonl",
            "queries = queries.jsonl",
            "qrels = qrels.jsonl",
            "out = ev",
            "recall_ks = 1,10",
        ],
    )
}

fn lines_of_kind<'a>(lines: &'a [Value], kind: &str) -> Vec<&'a Value> {
    lines.iter().filter(|l| l["kind"] == kind).collect()
}

#[test]
fn hand_built_two_query_fixture_matches_hand_computed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    // q1 = axis a: ranking d1 (1.0), d2 (0.707), then d3, d4 tied at 0 in id order.
    // q2 = axis c: ranking d4 (1.0), then d1, d2, d3 tied at 0 in id order.
    let config = eval_fixture(
        dir.path(),
        &[("q1", "a"), ("q2", "c")],
        &[("q1", "d2", 1), ("q2", "d4", 2), ("q2", "d3", 1)],
    );
    assert_ok(&progemb(dir.path(), &config, &["evaluate"]));
    let lines = read_lines(&dir.path().join("ev/metrics.jsonl"));
    assert_eq!(lines[0]["format"], "metrics");
    let rows = lines_of_kind(&lines, "query");
    assert_eq!(rows.len(), 2);

    let inv_log2 = |x: f64| 1.0 / x.log2();
    let q1 = rows.iter().find(|r| r["query_id"] == "q1").unwrap();
    let q2 = rows.iter().find(|r| r["query_id"] == "q2").unwrap();
    let expected = [
        // (row, ndcg, mrr, map, recall@1, recall@10)
        (q1, inv_log2(3.0), 0.5, 0.5, 0.0, 1.0),
        (
            q2,
            (3.0 + inv_log2(5.0)) / (3.0 + inv_log2(3.0)),
            1.0,
            (1.0 + 2.0 / 4.0) / 2.0,
            0.5,
            1.0,
        ),
    ];
    for (row, ndcg, mrr, map, r1, r10) in expected {
        let close = |k: &str, v: f64| (row[k].as_f64().unwrap() - v).abs() < 1e-12;
        assert!(close("ndcg", ndcg), "{row}");
        assert!(close("mrr", mrr), "{row}");
        assert!(close("map", map), "{row}");
        assert!((row["recall"][0].as_f64().unwrap() - r1).abs() < 1e-12);
        assert!((row["recall"][1].as_f64().unwrap() - r10).abs() < 1e-12);
    }
    let summary = lines_of_kind(&lines, "summary")[0];
    let mean_ndcg = (inv_log2(3.0) + (3.0 + inv_log2(5.0)) / (3.0 + inv_log2(3.0))) / 2.0;
    assert!((summary["ndcg"].as_f64().unwrap() - mean_ndcg).abs() < 1e-12);
    assert!((summary["map"].as_f64().unwrap() - 0.625).abs() < 1e-12);
    assert!(dir.path().join("ev/gallery.emb").is_file());
}

#[test]
fn identity_queries_score_perfect_ndcg() {
    let dir = tempfile::tempdir().unwrap();
    let config = eval_fixture(
        dir.path(),
        &[("qa", "a"), ("qab", "a b"), ("qb", "b"), ("qc", "c")],
        &[("qa", "d1", 1), ("qab", "d2", 1), ("qb", "d3", 1), ("qc", "d4", 1)],
    );
    assert_ok(&progemb(dir.path(), &config, &["evaluate"]));
    let lines = read_lines(&dir.path().join("ev/metrics.jsonl"));
    let summary = lines_of_kind(&lines, "summary")[0];
    assert_eq!(summary["queries"], 4);
    assert!((summary["ndcg"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn query_without_qrels_is_listed_as_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let config = eval_fixture(dir.path(), &[("q1", "a"), ("lonely", "b")], &[("q1", "d1", 1)]);
    assert_ok(&progemb(dir.path(), &config, &["evaluate"]));
    let lines = read_lines(&dir.path().join("ev/metrics.jsonl"));
    let excluded = lines_of_kind(&lines, "excluded");
    assert_eq!(excluded.len(), 1);
    assert_eq!(excluded[0]["query_id"], "lonely");
    assert_eq!(lines_of_kind(&lines, "summary")[0]["queries"], 1);
}

fn small_bench(dir: &std::path::Path, repeats: usize, noise: f64) -> Vec<Value> {
    let lines = [
        format!("bench_repeats = {repeats}"),
        format!("bench_noise_rate = {noise}"),
        "bench_gallery = 120".into(),
        "bench_train_queries = 60".into(),
        "bench_heldout_queries = 20".into(),
        "bench_epochs = 2".into(),
        "out = bench".into(),
    ];
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir, "bench.conf", &refs);
    assert_ok(&progemb(dir, &config, &["bench"]));
    read_lines(&dir.join("bench/bench.jsonl"))
}

#[test]
fn bench_with_one_seed_writes_two_runs_and_a_delta() {
    let dir = tempfile::tempdir().unwrap();
    let lines = small_bench(dir.path(), 1, 0.0);
    let runs = lines_of_kind(&lines, "run");
    assert_eq!(runs.len(), 2);
    let modes: HashSet<&str> = runs.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, HashSet::from(["progressive", "infonce"]));
    let delta = lines_of_kind(&lines, "delta");
    assert_eq!(delta.len(), 1);
    let r1 = |l: &Value| l["metrics"]["recall"][0].as_f64().unwrap();
    let by_mode = |m: &str| runs.iter().find(|r| r["mode"] == m).unwrap();
    let expected = r1(by_mode("progressive")) - r1(by_mode("infonce"));
    assert!((r1(delta[0]) - expected).abs() < 1e-12);
}

#[test]
fn bench_summary_means_match_per_seed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let lines = small_bench(dir.path(), 5, 0.2);
    assert_eq!(lines_of_kind(&lines, "run").len(), 10);
    let summaries = lines_of_kind(&lines, "summary");
    assert_eq!(summaries.len(), 3);
    for s in summaries {
        let mode = s["mode"].as_str().unwrap();
        assert_eq!(s["seeds"], 5);
        let rows: Vec<&Value> = if mode == "delta" {
            lines_of_kind(&lines, "delta")
        } else {
            lines_of_kind(&lines, "run").into_iter().filter(|r| r["mode"] == mode).collect()
        };
        assert_eq!(rows.len(), 5);
        for key in ["ndcg", "mrr", "map"] {
            let mean = rows.iter().map(|r| r["metrics"][key].as_f64().unwrap()).sum::<f64>() / 5.0;
            assert!((s["metrics"][key].as_f64().unwrap() - mean).abs() < 1e-12, "{mode} {key}");
        }
        for i in 0..3 {
            let mean = rows
                .iter()
                .map(|r| r["metrics"]["recall"][i].as_f64().unwrap())
                .sum::<f64>()
                / 5.0;
            assert!((s["metrics"]["recall"][i].as_f64().unwrap() - mean).abs() < 1e-12);
        }
    }
}
