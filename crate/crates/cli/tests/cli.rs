use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = include_str!("../../../configs/toy.toml");

fn sst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sst")).args(args).output().expect("binary runs")
}

fn toy(dir: &Path) -> PathBuf {
    let p = dir.join("toy.toml");
    fs::write(&p, TOY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_history_checkpoint_and_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let out = tmp.path().join("run");
    let o = sst(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["history.jsonl", "checkpoint.bin", "report.json", "config.toml"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for k in ["epoch", "train_loss", "val_loss", "elapsed_ms"] {
        assert!(first.get(k).is_some(), "history line lacks {k}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["model"], "sst");
    assert!(report["router"]["mean_long"].is_number());
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 1"));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = sst(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["checkpoint.bin", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn eval_reloads_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let run = tmp.path().join("run");
    assert!(sst(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let ev = tmp.path().join("eval");
    let ck = run.join("checkpoint.bin");
    let o = sst(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // same parameters, same test split
    assert_eq!(
        fs::read_to_string(run.join("report.json")).unwrap(),
        fs::read_to_string(ev.join("report.json")).unwrap()
    );
    let forecast = fs::read_to_string(ev.join("forecast.csv")).unwrap();
    assert_eq!(forecast.lines().next().unwrap(), "window,origin,step,variate,forecast,truth");
    assert!(forecast.lines().count() > 8);
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let o = sst(&["eval", "--config", s(&cfg), "--out", s(&tmp.path().join("nothing"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn set_overrides_file_and_last_wins() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let out = tmp.path().join("run");
    let o = sst(&[
        "train", "--config", s(&cfg), "--set", "window=7", "--set", "window=5", "--set", "max_epochs=1", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("window = 5"), "{resolved}");
    assert_eq!(fs::read_to_string(out.join("history.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let out = tmp.path().join("x");
    for args in [
        vec!["train", "--config", s(&cfg), "--set", "no_such_key=1", "--out", s(&out)],
        vec!["train", "--config", s(&cfg), "--set", "lwt.bogus=1", "--out", s(&out)],
        vec!["train", "--config", s(&cfg), "--set", "kind=resnet", "--out", s(&out)],
        vec!["train", "--config", "/nonexistent/cfg.toml", "--out", s(&out)],
    ] {
        let o = sst(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:"));
    }
}

#[test]
fn data_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "date,a\n2020-01-01 00:00:00,1.0\n2020-01-01 01:00:00,oops\n").unwrap();
    let out = tmp.path().join("x");
    let path_set = format!("data.path={}", serde_json::to_string(s(&bad)).unwrap());
    let o = sst(&["train", "--config", s(&cfg), "--set", &path_set, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy(tmp.path());
    let out = tmp.path().join("x");
    let o = sst(&[
        "train", "--config", s(&cfg), "--set", "kind=\"dlinear\"", "--set", "lr=1e200", "--set", "max_epochs=3",
        "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

fn fake_report(dir: &Path, name: &str, model: &str, mse: f64) -> PathBuf {
    let d = dir.join(name);
    fs::create_dir_all(&d).unwrap();
    let body = format!(
        r#"{{"model": "{model}", "lookback": 196, "horizon": 96, "windows": 12, "mse": {mse}, "mae": {}}}"#,
        mse.sqrt()
    );
    fs::write(d.join("report.json"), body).unwrap();
    d
}

#[test]
fn report_sorts_by_mse_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = fake_report(tmp.path(), "a", "mambaformer_pi", 0.25);
    let b = fake_report(tmp.path(), "b", "sst", 0.125);
    let out = tmp.path().join("cmp");
    let o1 = sst(&["report", s(&a), s(&b), "--out", s(&out)]);
    assert!(o1.status.success(), "{}", stderr(&o1));
    let text = String::from_utf8(o1.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("sst") && lines[2].contains("mambaformer_pi"), "{text}");
    let o2 = sst(&["report", s(&b), s(&a)]);
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), text);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_of_one_run() {
    let tmp = TempDir::new().unwrap();
    let a = fake_report(tmp.path(), "a", "dlinear", 0.5);
    let o = sst(&["report", s(&a)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("0.500000"));
}

#[test]
fn malformed_report_exits_3() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("broken");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("report.json"), "{\"model\": 3}").unwrap();
    assert_eq!(sst(&["report", s(&d)]).status.code(), Some(3));
    assert_eq!(sst(&["report", s(&tmp.path().join("absent"))]).status.code(), Some(3));
}

#[test]
fn bench_writes_records_and_slopes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bench");
    let o = sst(&[
        "bench", "--set", "lengths=[64, 128, 256, 512]", "--set", "models=[\"sst\", \"patched_transformer\"]", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = fs::read_to_string(out.join("scaling.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
    let rec: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(rec["L"], 64);
    assert_eq!(rec["status"], "ok");
    assert!(rec["forward_backward_ms"].as_f64().unwrap() > 0.0);
    let slopes: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("slopes.json")).unwrap()).unwrap();
    assert_eq!(slopes.as_array().unwrap().len(), 2);
    assert!(slopes[0]["slope"].is_number());
    let csv = fs::read_to_string(out.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "model,L,forward_backward_ms,peak_bytes,ok");
}

#[test]
fn bench_rejects_too_few_trials() {
    let tmp = TempDir::new().unwrap();
    let o = sst(&["bench", "--set", "trials=2", "--out", s(&tmp.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_writes_series_and_components() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("syn");
    let o = sst(&["synth", "--set", "length=300", "--seed", "9", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let series = fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 301);
    let comps = fs::read_to_string(out.join("components.csv")).unwrap();
    assert_eq!(comps.lines().next().unwrap(), "t,trend,seasonal,spikes,noise,value");
    // components add up to the value column
    for line in comps.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((v[0] + v[1] + v[2] + v[3] - v[4]).abs() < 1e-12);
    }
    let again = tmp.path().join("syn2");
    assert!(sst(&["synth", "--set", "length=300", "--seed", "9", "--out", s(&again)]).status.success());
    assert_eq!(series, fs::read_to_string(again.join("series.csv")).unwrap());
}
