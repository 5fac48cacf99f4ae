use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("mcmklr-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcmklr")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(kind: &str, n: usize, seed: u64, out: &Path) {
    let n = n.to_string();
    let seed = seed.to_string();
    let test_out = out.with_extension("test");
    let mut args = vec!["generate", "--kind", kind, "--n", &n, "--seed", &seed, "--out", s(out)];
    if kind == "fig1" {
        args.extend(["--n-test", "50", "--test-out", s(&test_out)]);
    }
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--data", "x", "--sigma", "1", "--lambda", "1e-3"]), 1);
    assert_eq!(code(&["bench-scaling", "--sizes", ""]), 1);
    assert_eq!(code(&["bench-scaling", "--sizes", "64", "--reps", "2"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn invalid_parameters_exit_1() {
    let dir = Scratch::new("params");
    let data = dir.path("train.txt");
    generate("checkerboard", 200, 1, &data);
    let model = dir.path("m.bin");
    let base = ["train", "--data", s(&data), "--out", s(&model), "--sigma", "8"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        code(&a)
    };
    assert_eq!(with(&["--lambda", "1e-3", "--beta", "0.7"]), 1);
    assert_eq!(with(&["--lambda", "-1"]), 1);
    assert_eq!(with(&["--lambda", "1e-3", "--delta", "1.5"]), 1);
    assert_eq!(with(&["--lambda", "1e-3", "--levels", "4,4"]), 1);
    assert!(!model.exists());
}

#[test]
fn data_errors_exit_2() {
    let dir = Scratch::new("data");
    let bad = dir.path("bad.txt");
    fs::write(&bad, "1 1:0.5\n0 2:abc\n").unwrap();
    let model = dir.path("m.bin");
    let args = |data: &Path| {
        vec![
            "train".to_string(),
            "--data".into(),
            s(data).into(),
            "--sigma".into(),
            "8".into(),
            "--lambda".into(),
            "1e-3".into(),
            "--out".into(),
            s(&model).into(),
        ]
    };
    let c = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        code(&refs)
    };
    assert_eq!(c(args(&bad)), 2);
    assert_eq!(c(args(&dir.path("missing.txt"))), 2);

    // three labels without --multiclass
    let blobs = dir.path("blobs.txt");
    generate("blobs", 90, 1, &blobs);
    assert_eq!(c(args(&blobs)), 2);

    // exact solver beyond the dense cap
    let big = dir.path("big.txt");
    generate("checkerboard", 5000, 1, &big);
    let mut v = args(&big);
    v.extend(["--solver".into(), "exact".into()]);
    assert_eq!(c(v), 2);

    // a corrupt model file
    fs::write(&model, b"not a model").unwrap();
    assert_eq!(code(&["predict", "--model", s(&model), "--data", s(&blobs)]), 2);
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = Scratch::new("binary");
    let (train, test) = (dir.path("train.txt"), dir.path("test.txt"));
    generate("checkerboard", 3000, 1, &train);
    generate("checkerboard", 500, 2, &test);
    let (model, report) = (dir.path("m.bin"), dir.path("r.jsonl"));
    let o = run(&[
        "train", "--data", s(&train), "--sigma", "512", "--lambda", "1e-4",
        "--out", s(&model), "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let lines: Vec<serde_json::Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let summary = lines.last().unwrap();
    assert_eq!(summary["type"], "summary");
    assert!(lines[..lines.len() - 1].iter().all(|l| l["type"] == "iteration"));

    let preds = dir.path("p.txt");
    assert_eq!(code(&["predict", "--model", s(&model), "--data", s(&test), "--out", s(&preds)]), 0);
    let text = fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().count(), 500);
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let label: f64 = parts.next().unwrap().parse().unwrap();
        let score: f64 = parts.next().unwrap().parse().unwrap();
        assert!(label == 0.0 || label == 1.0);
        assert!(score.is_finite());
    }

    let o = run(&["eval", "--model", s(&model), "--data", s(&test)]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let auc: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("auc "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(auc > 0.95, "{out}");
}

#[test]
fn multiclass_round_trip() {
    let dir = Scratch::new("multi");
    let data = dir.path("blobs.txt");
    generate("blobs", 600, 3, &data);
    let model = dir.path("m.bin");
    let o = run(&[
        "train", "--data", s(&data), "--sigma", "2", "--lambda", "1e-4",
        "--multiclass", "--scale", "--out", s(&model), "--jobs", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["eval", "--model", s(&model), "--data", s(&data)]);
    let out = String::from_utf8(o.stdout).unwrap();
    for key in ["accuracy", "macro_f1", "mcc"] {
        let v: f64 = out
            .lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap_or_else(|| panic!("{key} missing in {out}"))
            .trim()
            .parse()
            .unwrap();
        assert!(v >= 0.99, "{key} = {v}");
    }
}

#[test]
fn training_is_deterministic() {
    let dir = Scratch::new("det");
    let data = dir.path("d.txt");
    generate("fig1", 400, 5, &data);
    let (a, b) = (dir.path("a.bin"), dir.path("b.bin"));
    for out in [&a, &b] {
        let o = run(&["train", "--data", s(&data), "--sigma", "128", "--lambda", "1e-4", "--out", s(out)]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let (g1, g2) = (dir.path("g1.txt"), dir.path("g2.txt"));
    generate("checkerboard", 50, 9, &g1);
    generate("checkerboard", 50, 9, &g2);
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
}

#[test]
fn banana_style_flags_accepted() {
    let dir = Scratch::new("banana");
    let data = dir.path("d.txt");
    generate("fig1", 300, 2, &data);
    let model = dir.path("m.bin");
    let o = run(&[
        "train", "--data", s(&data), "--sigma", "8", "--lambda", "1e-3",
        "--levels", "auto:2", "--h", "1", "--out", s(&model),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_prints_a_row_per_size() {
    let o = run(&["bench-scaling", "--sizes", "256,512", "--iters", "2"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 3, "{out}");
}
