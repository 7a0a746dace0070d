use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tvqa_core::data::{load_checkpoint, load_dataset, read_records, FeatureStore, Tagging};
use tvqa_core::training::evaluate;

fn tvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvqa"))
        .args(args)
        .env_remove("TVQA_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn assert_one_line_error(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("tvqa-error: {kind}: ")), "{err}");
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Corpus {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(tvqa(&[
            "synth",
            "--out-dir",
            s(&root.join("c")),
            "--groups",
            "40",
            "--train",
            "30",
            "--seed",
            "3",
        ]));
        Corpus { _dir: dir, root }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join("c").join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> (PathBuf, String) {
        let ckpt = self.root.join(out);
        let (cfg, data, val, feats) = (
            self.file("synthetic.cfg"),
            self.file("train.jsonl"),
            self.file("val.jsonl"),
            self.file("features.fgrd"),
        );
        let mut args = vec![
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--val-data",
            s(&val),
            "--features",
            s(&feats),
            "--out",
            s(&ckpt),
            "--set",
            "max_epochs=3",
            "--set",
            "patience=3",
            "--set",
            "log_wall_time=false",
        ];
        args.extend_from_slice(extra);
        ok(tvqa(&args));
        let log = std::fs::read_to_string(format!("{}.log", ckpt.display())).unwrap();
        (ckpt, log)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn same_seed_same_log() {
    let c = Corpus::new();
    let (_, a) = c.train("a.ckpt", &[]);
    let (_, b) = c.train("b.ckpt", &["--jobs", "3"]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
    assert!(
        a.lines().all(|l| l.split('\t').count() == 5 && l.ends_with("\t-")),
        "{a}"
    );
    let (_, other) = c.train("c.ckpt", &["--set", "seed=9"]);
    assert_ne!(a, other);
}

#[test]
fn seed_environment_variable_wins_over_config() {
    let c = Corpus::new();
    let (_, nine) = c.train("a.ckpt", &["--set", "seed=9"]);
    let ckpt = c.root.join("env.ckpt");
    let run = Command::new(env!("CARGO_BIN_EXE_tvqa"))
        .args([
            "train",
            "--config",
            s(&c.file("synthetic.cfg")),
            "--data",
            s(&c.file("train.jsonl")),
            "--val-data",
            s(&c.file("val.jsonl")),
            "--features",
            s(&c.file("features.fgrd")),
            "--out",
            s(&ckpt),
            "--set",
            "max_epochs=3",
            "--set",
            "patience=3",
            "--set",
            "log_wall_time=false",
        ])
        .env("TVQA_SEED", "9")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", stderr(&run));
    assert_eq!(
        std::fs::read_to_string(format!("{}.log", ckpt.display())).unwrap(),
        nine
    );
}

#[test]
fn eval_matches_the_library() {
    let c = Corpus::new();
    let (ckpt, _) = c.train("m.ckpt", &[]);
    let val = c.file("val.jsonl");
    let feats = c.file("features.fgrd");
    let out = ok(tvqa(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&val),
        "--features",
        s(&feats),
    ]));

    let model = load_checkpoint(&ckpt).unwrap().model;
    let groups = load_dataset(&val, &model.vocab, Tagging::Given).unwrap();
    let ev = evaluate(&model, &groups, &FeatureStore::load(&feats).unwrap(), 1).unwrap();
    let mut lines = out.lines();
    assert_eq!(
        lines.next().unwrap(),
        format!("accuracy\t{:.4}\t{}/{}", ev.accuracy(), ev.correct, ev.total)
    );
    assert!(lines.next().unwrap().starts_with("answers=4\t"));
    assert_eq!(ev.total, 10);
}

fn predict(ckpt: &Path, feats: &Path, input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_tvqa"))
        .args(["predict", "--checkpoint", s(ckpt), "--features", s(feats)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn predict_agrees_with_eval_and_accepts_one_candidate() {
    let c = Corpus::new();
    let (ckpt, _) = c.train("m.ckpt", &[]);
    let feats = c.file("features.fgrd");
    let model = load_checkpoint(&ckpt).unwrap().model;
    let store = FeatureStore::load(&feats).unwrap();
    let (_, mut record) = read_records(c.file("val.jsonl")).unwrap().remove(0);
    let line = serde_json_line(&record);

    let out = ok(predict(&ckpt, &feats, &line));
    let choice: usize = out
        .lines()
        .next()
        .unwrap()
        .strip_prefix("choice\t")
        .unwrap()
        .parse()
        .unwrap();
    let group = record.to_group(&model.vocab, Tagging::Given, "g".into()).unwrap();
    let probs = tvqa_core::training::predictions(&model, &[group], &store, 1).unwrap();
    let best = (0..probs[0].len()).fold(0, |b, i| if probs[0][i] > probs[0][b] { i } else { b });
    assert_eq!(choice, best);
    let ps: Vec<f64> = out
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ps.len(), 4);
    assert!(ps.iter().all(|&p| (0.0..=1.0).contains(&p)));

    record.answers.truncate(1);
    record.answers[0].is_correct = false;
    let out = ok(predict(&ckpt, &feats, &serde_json_line(&record)));
    assert!(out.starts_with("choice\t0\n0\t"), "{out}");
    assert_eq!(out.lines().count(), 2);

    assert_one_line_error(&predict(&ckpt, &feats, "{not json"), "parse");
}

fn serde_json_line(r: &tvqa_core::data::GroupRecord) -> String {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.jsonl");
    tvqa_core::data::write_records(&p, std::slice::from_ref(r)).unwrap();
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn attention_dump_files() {
    let c = Corpus::new();
    let (ckpt, _) = c.train("m.ckpt", &[]);
    let dump = c.root.join("dump");
    let (_, first) = read_records(c.file("val.jsonl")).unwrap().remove(0);
    let id = first.id.clone().unwrap();
    ok(tvqa(&[
        "attn-dump",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&c.file("val.jsonl")),
        "--features",
        s(&c.file("features.fgrd")),
        "--group-id",
        &id,
        "--out-dir",
        s(&dump),
    ]));
    for i in 0..4 {
        let csv = std::fs::read_to_string(dump.join(format!("candidate{i}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "region_row,region_col,att_q,att_a,att_combined");
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        assert_eq!(rows.len(), 4);
        let cells: Vec<(usize, usize)> = rows
            .iter()
            .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
            .collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let total: f64 = rows.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");

        let pgm = std::fs::read(dump.join(format!("candidate{i}_combined.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), b"P5\n2 2\n255\n".len() + 4);
    }
    let pos = std::fs::read_to_string(dump.join("pos_weights.csv")).unwrap();
    assert_eq!(pos.lines().count(), 8);

    let missing = tvqa(&[
        "attn-dump",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&c.file("val.jsonl")),
        "--features",
        s(&c.file("features.fgrd")),
        "--group-id",
        "nope",
        "--out-dir",
        s(&dump),
    ]);
    assert_one_line_error(&missing, "usage");
}

#[test]
fn gradcheck_table_and_negative_control() {
    let out = ok(tvqa(&["gradcheck", "--seed", "2"]));
    let names: Vec<&str> = out
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(names.len(), 21);
    for block in [
        "embedding",
        "pos_weights",
        "conv3.filter",
        "vision.weight",
        "lambda1",
        "qi.bias",
        "bn.gamma",
        "qia.weight",
    ] {
        assert!(names.contains(&block), "{block} missing from\n{out}");
    }
    assert!(out.lines().skip(1).all(|l| l.ends_with("PASS")));

    let bad = tvqa(&["gradcheck", "--seed", "2", "--corrupt-op", "conv1d"]);
    assert_one_line_error(&bad, "check");
    assert!(stdout(&bad).contains("FAIL"));
    assert_one_line_error(&tvqa(&["gradcheck", "--corrupt-op", "nonsense"]), "usage");
}

#[test]
fn failures_are_single_prefixed_lines() {
    let o = tvqa(&["train", "--features", "f", "--out", "o"]);
    assert_one_line_error(&o, "usage");
    assert!(stderr(&o).contains("--data"));
    assert_eq!(o.status.code(), Some(2));

    assert_one_line_error(
        &tvqa(&[
            "eval",
            "--checkpoint",
            "/nonexistent/ckpt",
            "--data",
            "d",
            "--features",
            "f",
        ]),
        "io",
    );
    assert_one_line_error(
        &tvqa(&[
            "train",
            "--data",
            "d",
            "--features",
            "f",
            "--out",
            "o",
            "--set",
            "nokey=1",
        ]),
        "config",
    );
    assert_one_line_error(
        &tvqa(&["synth", "--out-dir", "x", "--groups", "5", "--train", "5"]),
        "usage",
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_one_line_error(
        &tvqa(&["eval", "--checkpoint", s(&junk), "--data", "d", "--features", "f"]),
        "format",
    );
}
