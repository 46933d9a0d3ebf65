#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub const TOPICS: [&str; 5] = [
    "rivers flood the green valley",
    "stars burn in the night sky",
    "bread rises in a warm oven",
    "ships sail across the grey sea",
    "birds migrate south in winter",
];

pub fn write_lines(path: &Path, header: Value, rows: &[Value]) {
    let mut text = header.to_string();
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// Parsed lines of a JSONL file, header first.
pub fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// `n` single-paragraph documents with distinct wording, two sentences each.
pub fn corpus_rows(n: usize) -> Vec<Value> {
    (0..n)
        .map(|i| {
            let topic = TOPICS[i % TOPICS.len()];
            json!({
                "id": format!("d{i:02}"),
                "text": format!("The {topic} in story {i}. More words about {topic} and tale {i}."),
                "source_doc": format!("d{i:02}"),
            })
        })
        .collect()
}

pub fn write_corpus(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    write_lines(&path, json!({"format": "corpus", "version": 1}), &corpus_rows(n));
    path
}

pub fn write_config(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

pub fn progemb(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progemb"))
        .current_dir(dir)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Pretrains on a 20-document corpus and mines a dataset from it, both in
/// `dir`. Returns the config lines used, for later stages to extend.
pub fn pretrain_and_mine(dir: &Path) -> Vec<String> {
    write_corpus(dir, 20);
    let mut lines: Vec<String> = [
        "corpus = corpus.jsonl",
        "out = base",
        "dim = 8",
        "pretrain_epochs = 2",
        "max_chars = 1000",
        "optimizer = sgd",
        "lr = 0.1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir, "base.conf", &refs);
    assert_ok(&progemb(dir, &config, &["pretrain"]));
    lines.push("checkpoint = base/checkpoint.bin".into());
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let config = write_config(dir, "base.conf", &refs);
    assert_ok(&progemb(dir, &config, &["mine"]));
    lines.push("dataset = base/dataset.jsonl".into());
    lines.push("passages = base/passages.jsonl".into());
    lines
}
