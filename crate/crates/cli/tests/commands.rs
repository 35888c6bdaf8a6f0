use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synergynet"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, v: &Value) {
    fs::write(path, v.to_string()).unwrap();
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    /// A 16×16 dataset and a small run config next to it.
    fn new(count: usize, epochs: usize, batch_size: usize) -> Fixture {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let spec = json!({
            "image_size": 16, "num_classes": 3, "shapes_per_image": [1, 2],
            "min_shape_radius": 2, "max_shape_radius": 4, "count": count, "seed": 3
        });
        write(&dir.join("spec.json"), &spec);
        ok(&[
            "synth",
            "--spec",
            s(&dir.join("spec.json")),
            "--out",
            s(&dir.join("data")),
        ]);
        let cfg = json!({
            "model": {"num_classes": 3, "encoder_channels": [4, 8], "dim": 8, "K": 8, "h_s": 2, "h_h": 2, "seed": 4},
            "epochs": epochs, "batch_size": batch_size, "train_data": "data", "seed": 5
        });
        write(&dir.join("run.json"), &cfg);
        Fixture { _tmp: tmp, dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

#[test]
fn synth_reports_counts_and_is_idempotent() {
    let f = Fixture::new(24, 1, 6);
    let out = ok(&["synth", "--spec", s(&f.path("spec.json")), "--out", s(&f.path("again"))]);
    let rec = &lines(&out)[0];
    assert_eq!(rec["count"], 24);
    let pixels: u64 = rec["class_pixels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(pixels, 24 * 256);
    assert_eq!(tree(&f.path("data")), tree(&f.path("again")));
    ok(&["synth", "--spec", s(&f.path("spec.json")), "--out", s(&f.path("again"))]);
    assert_eq!(tree(&f.path("data")), tree(&f.path("again")));
}

#[test]
fn train_then_eval_never_loses_to_the_untrained_model() {
    // the first hundred or so steps predict mostly background, which scores
    // below an untrained model's scattered guesses; train well past that
    let f = Fixture::new(96, 15, 8);
    let out = ok(&["train", "--config", s(&f.path("run.json")), "--out", s(&f.path("out"))]);
    let records = lines(&out);
    assert_eq!(records.len(), 15);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i + 1);
        for k in ["total", "seg", "quant", "codebook_perplexity", "val_dsc"] {
            assert!(r[k].is_f64(), "{k} missing from {r}");
        }
    }
    let log = fs::read_to_string(f.path("out/log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 15);

    let eval = |epoch: usize, name: &str| {
        let ckpt = f.path(&format!("out/checkpoints/epoch_{epoch:03}"));
        let report = f.path(name);
        let out = ok(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&f.path("data")),
            "--report",
            s(&report),
        ]);
        assert_eq!(lines(&out).len(), 1);
        read(&report)
    };
    let before = eval(0, "before.json");
    let after = eval(15, "after.json");
    assert_eq!(before["step"], 0);
    assert_eq!(after["step"], 15 * 12);
    let (b, a) = (
        before["mean_dsc"].as_f64().unwrap(),
        after["mean_dsc"].as_f64().unwrap(),
    );
    assert!(a >= b, "trained {a} < untrained {b}");
    for k in [
        "mean_hd95",
        "mean_iou",
        "mean_se",
        "mean_sp",
        "mean_acc",
        "classes",
        "cases",
        "codebook",
    ] {
        assert!(!after[k].is_null(), "{k} missing from report");
    }
}

#[test]
fn single_value_sweep_equals_train_plus_eval() {
    let f = Fixture::new(24, 2, 6);
    ok(&[
        "ablate",
        "--axis",
        "K",
        "--values",
        "8",
        "--config",
        s(&f.path("run.json")),
        "--out",
        s(&f.path("sweep")),
    ]);
    ok(&[
        "train",
        "--config",
        s(&f.path("run.json")),
        "--out",
        s(&f.path("direct")),
    ]);
    let report = f.path("direct.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&f.path("direct/checkpoints/epoch_002")),
        "--data",
        s(&f.path("data")),
        "--report",
        s(&report),
    ]);
    assert_eq!(read(&f.path("sweep/K_8/eval.json")), read(&report));
    let sweep = tree(&f.path("sweep/K_8/checkpoints"));
    assert_eq!(sweep, tree(&f.path("direct/checkpoints")));
    let table = read(&f.path("sweep/ablation.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 1);
    assert!(table["reference_order"].is_null());
}

#[test]
fn parallel_sweep_matches_sequential() {
    let f = Fixture::new(24, 1, 6);
    let cfg = f.path("run.json");
    ok(&[
        "ablate",
        "--axis",
        "heads",
        "--values",
        "2s2h,4s0h",
        "--config",
        s(&cfg),
        "--out",
        s(&f.path("seq")),
    ]);
    ok(&[
        "ablate",
        "--axis",
        "heads",
        "--values",
        "2s2h,4s0h",
        "--config",
        s(&cfg),
        "--out",
        s(&f.path("par")),
        "--parallel",
    ]);
    assert_eq!(tree(&f.path("seq")), tree(&f.path("par")));
}

#[test]
fn exit_codes() {
    let f = Fixture::new(24, 1, 6);
    // validation: unknown subcommand, missing file, unknown key, bad axis
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        run(&["train", "--config", "/nonexistent.json", "--out", "x"])
            .status
            .code(),
        Some(1)
    );
    let mut cfg = read(&f.path("run.json"));
    cfg["learning_rate"] = json!(0.1);
    write(&f.path("typo.json"), &cfg);
    let out = run(&["train", "--config", s(&f.path("typo.json")), "--out", s(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = run(&[
        "ablate",
        "--axis",
        "width",
        "--config",
        s(&f.path("run.json")),
        "--out",
        s(&f.path("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K, dim, heads, fusion, depth"));
    let mut cfg = read(&f.path("run.json"));
    cfg["lr"] = json!(0.0);
    write(&f.path("zero.json"), &cfg);
    assert_eq!(
        run(&["train", "--config", s(&f.path("zero.json")), "--out", s(&f.path("o"))])
            .status
            .code(),
        Some(1)
    );

    // numeric failure: a huge step sends the loss to infinity
    let mut cfg = read(&f.path("run.json"));
    cfg["lr"] = json!(1e12);
    cfg["epochs"] = json!(3);
    write(&f.path("blowup.json"), &cfg);
    let out = run(&[
        "train",
        "--config",
        s(&f.path("blowup.json")),
        "--out",
        s(&f.path("blowup")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // tolerance failure
    let out = run(&["gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(lines(&out).iter().any(|r| r["passed"] == false));
    assert_eq!(run(&["gradcheck"]).status.code(), Some(0));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_reads_a_strict_config() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("g.json");
    write(
        &p,
        &json!({"dim": 4, "h_s": 1, "h_h": 4, "fusion": "plain", "instances": 1}),
    );
    let out = ok(&["gradcheck", "--config", s(&p)]);
    assert!(lines(&out).iter().all(|r| r["passed"] == true));
    write(&p, &json!({"heads": 4}));
    assert_eq!(run(&["gradcheck", "--config", s(&p)]).status.code(), Some(1));
}
