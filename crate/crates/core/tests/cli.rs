mod common;

use std::fs;
use std::path::Path;

use common::*;
use fisher_probe::data::Example;
use fisher_probe::fim::{lambda_max, ScoredRow};
use fisher_probe::probe::{DeltaStats, OverlapReport, PairedRecord};

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(p: &Path) -> Vec<T> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["train", "score", "pairs", "synthetic", "serve", "FISHER_PROBE_THREADS"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn synthetic_training_is_accurate_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let out = run(&["train", "--synthetic", "--seed", "3", "--out", s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let acc: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(acc >= 0.95, "{stdout}");
    assert!(run(&["train", "--synthetic", "--seed", "3", "--out", s(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let report_a = fs::read(dir.path().join("a.ckpt.report.json")).unwrap();
    let report_b = fs::read(dir.path().join("b.ckpt.report.json")).unwrap();
    assert_eq!(report_a, report_b);
}

#[test]
fn missing_embedding_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tsv");
    fs::write(&data, "pos\tgood movie\nneg\tbad movie\n").unwrap();
    let missing = dir.path().join("no-such-vectors.txt");
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--embeddings",
        s(&missing),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-vectors.txt"));
}

#[test]
fn bad_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, "not a checkpoint").unwrap();
    let out = run(&[
        "score",
        "--checkpoint",
        s(&ckpt),
        "--synthetic",
        "--out",
        s(&dir.path().join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scoring_the_synthetic_set() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(run(&["train", "--synthetic", "--out", s(&ckpt)]).status.success());
    let plain = dir.path().join("plain.jsonl");
    let out = run(&["score", "--checkpoint", s(&ckpt), "--synthetic", "--out", s(&plain)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("median"));
    let rows: Vec<ScoredRow> = read_jsonl(&plain);
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.top_eigenvector.is_none()));

    let sorted = dir.path().join("sorted.jsonl");
    let out = run(&[
        "score", "--checkpoint", s(&ckpt), "--synthetic", "--sort", "--top-eigvec", "--out",
        s(&sorted),
    ]);
    assert!(out.status.success());
    let rows: Vec<ScoredRow> = read_jsonl(&sorted);
    assert!(rows.windows(2).all(|w| w[0].lambda_max >= w[1].lambda_max));
    for r in &rows {
        let v = r.top_eigenvector.as_ref().unwrap();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-10);
    }
}

#[test]
fn score_exit_code_reflects_failures() {
    let fx = text_fixture(1);
    let data = fx.dir.path().join("d.jsonl");
    fs::write(
        &data,
        "{\"id\":\"a\",\"text\":\"good movie\",\"label\":\"pos\"}\n{\"id\":\"b\",\"text\":\"  \",\"label\":\"neg\"}\n",
    )
    .unwrap();
    let out_path = fx.dir.path().join("o.jsonl");
    let out = run(&[
        "score", "--checkpoint", s(&fx.checkpoint), "--embeddings", s(&fx.embeddings), "--data",
        s(&data), "--out", s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(read_jsonl::<ScoredRow>(&out_path).len(), 1);
}

fn write_pairs(path: &Path, pairs: &[(&str, &str)]) {
    let mut text = String::new();
    for (i, (a, b)) in pairs.iter().enumerate() {
        text.push_str(
            &serde_json::json!({
                "id": format!("p{i}"),
                "original_text": a,
                "perturbed_text": b,
                "original_label": "pos",
                "perturbed_label": "neg",
            })
            .to_string(),
        );
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn identical_pairs_summarise_to_zero() {
    let fx = text_fixture(2);
    let pairs = fx.dir.path().join("pairs.jsonl");
    write_pairs(&pairs, &[("good movie", "good movie"), ("the plot was boring", "the plot was boring")]);
    let out_dir = fx.dir.path().join("out");
    let out = run(&[
        "pairs", "--checkpoint", s(&fx.checkpoint), "--embeddings", s(&fx.embeddings), "--pairs",
        s(&pairs), "--out-dir", s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: DeltaStats = serde_json::from_slice(&fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!((stats.mean, stats.std), (0.0, 0.0));
    let hist = fs::read_to_string(out_dir.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("bin_left,bin_right,mass_a,mass_b\n"));
    assert_eq!(hist.lines().count(), 51);
}

#[test]
fn pair_deltas_match_direct_scoring() {
    let fx = text_fixture(3);
    let texts = [("the best movie", "the worst movie"), ("great acting !", "awful acting !")];
    let pairs = fx.dir.path().join("pairs.jsonl");
    write_pairs(&pairs, &texts);
    let base = fx.dir.path().join("base.jsonl");
    let data = fx.dir.path().join("base_data.tsv");
    fs::write(&data, "pos\tgood film\nneg\tbad plot\npos\tfun movie\n").unwrap();
    assert!(run(&[
        "score", "--checkpoint", s(&fx.checkpoint), "--embeddings", s(&fx.embeddings), "--data",
        s(&data), "--out", s(&base),
    ])
    .status
    .success());
    let out_dir = fx.dir.path().join("out");
    let out = run(&[
        "pairs", "--checkpoint", s(&fx.checkpoint), "--embeddings", s(&fx.embeddings), "--pairs",
        s(&pairs), "--out-dir", s(&out_dir), "--overlap", s(&base),
    ]);
    assert!(out.status.success());

    let lam = |t: &str| lambda_max(&fx.clf, &Example::text("x", t, 0)).unwrap().lambda_max;
    let deltas: Vec<f64> = texts.iter().map(|(a, b)| lam(b) - lam(a)).collect();
    let records: Vec<PairedRecord> = read_jsonl(&out_dir.join("pairs.jsonl"));
    for (r, d) in records.iter().zip(&deltas) {
        assert_eq!(r.delta, *d);
        assert!((r.delta - (r.lambda_perturbed - r.lambda_original)).abs() <= 1e-12);
    }
    let mean = (deltas[0] + deltas[1]) / 2.0;
    let std = (((deltas[0] - mean).powi(2) + (deltas[1] - mean).powi(2)) / 2.0).sqrt();
    let stats: DeltaStats = serde_json::from_slice(&fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(stats.mean, mean);
    assert_eq!(stats.std, std);
    let overlap: OverlapReport =
        serde_json::from_slice(&fs::read(out_dir.join("overlap.json")).unwrap()).unwrap();
    assert!((0.0..=100.0).contains(&overlap.overlap_percent));
    assert!(out_dir.join("delta_histogram.csv").exists());
}

#[test]
fn synthetic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synthetic", "--out-dir", s(dir.path()), "--n-per-class", "150", "--seed", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("spearman"));
    let points = fs::read_to_string(dir.path().join("points.csv")).unwrap();
    assert_eq!(points.lines().next().unwrap(), "x1,x2,label,lambda_max,boundary_distance");
    assert_eq!(points.lines().count(), 301);
    let top = fs::read_to_string(dir.path().join("top20_eigvec.csv")).unwrap();
    let rows: Vec<Vec<f64>> = top
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    for r in rows {
        assert!(((r[2] * r[2] + r[3] * r[3]).sqrt() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn threads_variable_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(run(&["train", "--synthetic", "--epochs", "20", "--out", s(&ckpt)]).status.success());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let path = dir.path().join(format!("t{threads}.jsonl"));
        let out = bin()
            .env("FISHER_PROBE_THREADS", threads)
            .args(["score", "--checkpoint", s(&ckpt), "--synthetic", "--out", s(&path)])
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(fs::read(path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
