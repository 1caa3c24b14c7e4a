use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gridseq"));
    c.env("RUST_LOG", "warn");
    c
}

fn feeder(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/feeders").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, episodes: &str) -> PathBuf {
    let out = dir.join("data");
    let r = run(&[
        "gen-data",
        "--feeder",
        p(&feeder("ieee13.feeder")),
        "--episodes",
        episodes,
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    out.join("dataset.jsonl")
}

fn train_small(dataset: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--dataset",
        p(dataset),
        "--feeder",
        p(&feeder("ieee13.feeder")),
        "--q",
        "2",
        "--K",
        "3",
        "--steps",
        "12",
        "--batch",
        "8",
        "--embed-dim",
        "8",
        "--layers",
        "1",
        "--heads",
        "2",
        "--checkpoint-every",
        "5",
        "--out",
        p(out),
    ])
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn same_outputs(a: &Path, b: &Path) {
    let (ma, mb) = (manifest(a), manifest(b));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["config"].as_object().unwrap().len(), mb["config"].as_object().unwrap().len());
    for name in ma["outputs"].as_object().unwrap().keys() {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["gen-data", "--episodes", "3", "--out", "x"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["eval", "--mode", "greedy"])), 2);
    assert_eq!(code(&run(&["gen-data", "--episodes", "many"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn validation_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = |n: &str| d.join(n);

    let bad = o("bad.feeder");
    fs::write(&bad, "[meta]\nhorizon = 2\n[cells]\n0 load=-5\n[switches]\n[sources]\n").unwrap();
    assert_eq!(code(&run(&["oracle", "--feeder", p(&bad), "--out", p(&o("a"))])), 3);
    assert_eq!(
        code(&run(&["oracle", "--feeder", p(&o("missing.feeder")), "--out", p(&o("a"))])),
        4
    );
    let big = feeder("synth240.feeder");
    let r = run(&["oracle", "--feeder", p(&big), "--isolate-switches", "all", "--out", p(&o("b"))]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("guard"));
    let r = run(&["oracle", "--feeder", p(&big), "--isolate-switches", "99", "--out", p(&o("b"))]);
    assert_eq!(code(&r), 3);
    let r = bin()
        .env("GRIDSEQ_THREADS", "0")
        .args(["oracle", "--feeder", p(&feeder("ieee13.feeder")), "--out", p(&o("c"))])
        .output()
        .unwrap();
    assert_eq!(code(&r), 3);

    let ds = gen(d, "30");
    let r = run(&[
        "train",
        "--dataset",
        p(&ds),
        "--feeder",
        p(&feeder("synth123.feeder")),
        "--out",
        p(&o("t")),
    ]);
    assert_eq!(code(&r), 3, "dataset / feeder hash mismatch");

    let r = run(&[
        "train",
        "--dataset",
        p(&ds),
        "--feeder",
        p(&feeder("ieee13.feeder")),
        "--steps",
        "20",
        "--batch",
        "4",
        "--embed-dim",
        "8",
        "--layers",
        "1",
        "--heads",
        "2",
        "--lr",
        "1e200",
        "--clip",
        "0",
        "--warmup",
        "0",
        "--out",
        p(&o("blow")),
    ]);
    assert_eq!(code(&r), 4);
    assert!(String::from_utf8_lossy(&r.stderr).contains("non-finite gradient"));

    assert_eq!(code(&train_small(&ds, &o("tr"))), 0);
    let ckpt = o("tr").join("checkpoint.json");
    let other = feeder("synth123.feeder");
    let eval = |extra: &[&str], out: &str| {
        let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--trials", "1", "--out"];
        args.push(p(&o(out)).to_string().leak());
        args.extend_from_slice(extra);
        run(&args)
    };
    assert_eq!(code(&eval(&["--feeder", p(&other)], "e1")), 3);
    assert_eq!(code(&eval(&["--feeder", p(&other), "--zero-shot"], "e2")), 3, "shape mismatch is still invalid");
    assert_eq!(code(&eval(&["--feeder", p(&feeder("ieee13.feeder")), "--bin-edges", "5,1"], "e3")), 2);
    let r = run(&[
        "contingency",
        "--checkpoint",
        p(&ckpt),
        "--feeder",
        p(&feeder("ieee13.feeder")),
        "--isolate-switches",
        "1,17",
        "--out",
        p(&o("c1")),
    ]);
    assert_eq!(code(&r), 3, "unknown switch id");
}

#[test]
fn commands_write_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ds = gen(d, "40");
    assert_eq!(fs::read_to_string(&ds).unwrap().lines().count(), 41);
    let tr = d.join("tr");
    assert_eq!(code(&train_small(&ds, &tr)), 0);
    for f in ["checkpoint.json", "checkpoint-000005.json", "checkpoint-000010.json", "loss.csv", "manifest.json"] {
        assert!(tr.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(tr.join("loss.csv")).unwrap().lines().count(), 13);
    let m = manifest(&tr);
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["steps"], 12);
    assert_eq!(m["config"]["K"], 3);
    assert!(m["dataset_hash"].is_string() && m["feeder_hash"].is_string());

    let ckpt = tr.join("checkpoint.json");
    let ev = d.join("ev");
    let r = run(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--feeder",
        p(&feeder("ieee13.feeder")),
        "--trials",
        "1",
        "--bins",
        "4",
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_trials"], 1);
    assert_eq!(report["trials"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(csv.starts_with("Average Return,Std. Return,APR,SDPR,# Opt. Sols.\n"));
    let hist = fs::read_to_string(ev.join("histogram.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(hist.lines().count(), 5);
    assert_eq!(total, 1);
    assert!(manifest(&ev)["checkpoint_hash"].is_string());

    let ct = d.join("ct");
    let r = run(&[
        "contingency",
        "--checkpoint",
        p(&ckpt),
        "--feeder",
        p(&feeder("ieee13.feeder")),
        "--isolate-switches",
        "all",
        "--isolate-cell",
        "3",
        "--trials",
        "2",
        "--out",
        p(&ct),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ct.join("scenarios.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["report"]["apr"], 0.0);
    assert!(ct.join("s1-sw0-1-2-3.dot").exists());
    assert!(fs::read_to_string(ct.join("s2-sw2-3.dot")).unwrap().starts_with("graph \"ieee13\""));

    let orc = d.join("orc");
    assert_eq!(code(&run(&["oracle", "--feeder", p(&feeder("ieee13.feeder")), "--out", p(&orc)])), 0);
    let o: serde_json::Value = serde_json::from_str(&fs::read_to_string(orc.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(o["actions"], serde_json::json!([0, 2, 3]));
    assert!((o["optimal_power"].as_f64().unwrap() - 3006.509).abs() < 1e-9);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (da, db) = (gen(&a, "50"), gen(&b, "50"));
    same_outputs(&a.join("data"), &b.join("data"));
    assert_eq!(code(&train_small(&da, &a.join("tr"))), 0);
    assert_eq!(code(&train_small(&db, &b.join("tr"))), 0);
    same_outputs(&a.join("tr"), &b.join("tr"));
    for dir in [&a, &b] {
        let ckpt = dir.join("tr/checkpoint.json");
        let r = run(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--feeder",
            p(&feeder("ieee13.feeder")),
            "--trials",
            "5",
            "--mode",
            "sample",
            "--seed",
            "3",
            "--out",
            p(&dir.join("ev")),
        ]);
        assert_eq!(code(&r), 0);
    }
    same_outputs(&a.join("ev"), &b.join("ev"));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[gen-data]\nfeeder = {:?}\nepisodes = 9\nseed = 2\n\n[oracle]\nisolate-cell = 3\n",
            feeder("ieee13.feeder").to_str().unwrap()
        ),
    )
    .unwrap();
    let out = d.join("data");
    let r = run(&["--config", p(&cfg), "gen-data", "--episodes", "4", "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let m = manifest(&out);
    assert_eq!(m["config"]["episodes"], 4);
    assert_eq!(m["config"]["seed"], 2);
    assert_eq!(fs::read_to_string(out.join("dataset.jsonl")).unwrap().lines().count(), 5);

    let orc = d.join("orc");
    let r = run(&["--config", p(&cfg), "oracle", "--feeder", p(&feeder("ieee13.feeder")), "--out", p(&orc)]);
    assert_eq!(code(&r), 0);
    let flagged = d.join("flagged");
    let r = run(&["oracle", "--feeder", p(&feeder("ieee13.feeder")), "--isolate-cell", "3", "--out", p(&flagged)]);
    assert_eq!(code(&r), 0);
    let plain = d.join("plain");
    assert_eq!(code(&run(&["oracle", "--feeder", p(&feeder("ieee13.feeder")), "--out", p(&plain)])), 0);
    let read = |dir: &Path| fs::read(dir.join("oracle.json")).unwrap();
    assert_eq!(read(&orc), read(&flagged));
    assert_ne!(read(&orc), read(&plain));

    fs::write(&cfg, "[gen-data]\nepisodez = 3\n").unwrap();
    assert_eq!(code(&run(&["--config", p(&cfg), "gen-data", "--out", p(&out)])), 3);
}
