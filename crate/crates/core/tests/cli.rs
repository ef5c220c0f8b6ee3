use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cogrnn::checkpoint::Checkpoint;
use cogrnn::experiment::ExperimentConfig;
use cogrnn::trainer::Trainer;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cogrnn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogrnn"))
        .args(args)
        .env("LAPLACE_RL_OUT", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, trials: usize) -> PathBuf {
    let text = fs::read_to_string(configs().join("smoke.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["train"]["n_trials"] = trials.into();
    v["seeds"] = serde_json::json!([0]);
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn only_run_dir(root: &Path, stem: &str) -> PathBuf {
    let mut d: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(&format!("{stem}-")))
        .collect();
    assert_eq!(d.len(), 1, "{d:?}");
    d.pop().unwrap()
}

#[test]
fn train_eval_analyze_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", 120);
    let out = tmp.path().join("out");
    let o = cogrnn(&out, &["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(&out, "tiny");
    let seed = run.join("seed0");
    let curve = fs::read_to_string(seed.join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "trial,reward,length,policy_loss,value_loss,entropy,seed,config_hash");
    assert_eq!(lines.count(), 120);
    assert!(seed.join("ckpt-0000100.json").exists());
    let ck = seed.join("ckpt-0000120.json");
    assert!(ck.exists());
    assert!(run.join("config.json").exists());

    let o = cogrnn(&out, &["eval", "--checkpoint", ck.to_str().unwrap(), "--scales", "1,2", "--n-trials", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = fs::read_to_string(seed.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(eval.starts_with("scale,n_trials,accuracy,out_of_range,config_hash"));
    assert_eq!(fs::read_to_string(seed.join("trials.csv")).unwrap().lines().count(), 61);

    let o = cogrnn(&out, &["analyze", "psychometric", "--run", seed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let psy = fs::read_to_string(seed.join("psychometric.csv")).unwrap();
    assert!(psy.starts_with("scale,interval,n,n_long,p_long,ci_low,ci_high,n_timeout"));

    let o = cogrnn(&out, &["analyze", "time-cells", "--run", seed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(seed.join("cellstats.csv")).unwrap().starts_with("unit,class,peak,std,r2"));

    let o = cogrnn(&out, &["analyze", "curves", "--run", run.to_str().unwrap(), "--window", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 121);

    let hash = ExperimentConfig::load(&cfg, &[]).unwrap().hash();
    for f in [
        seed.join("curve.csv"),
        seed.join("eval.csv"),
        seed.join("trials.csv"),
        seed.join("psychometric.csv"),
        seed.join("cellstats.csv"),
        run.join("curves.csv"),
    ] {
        let text = fs::read_to_string(&f).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",config_hash"), "{}", f.display());
        assert!(text.lines().skip(1).all(|l| l.ends_with(&hash)), "{}", f.display());
    }
}

#[test]
fn eval_writes_psychometric_points() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ps.json", 30);
    let out = tmp.path().join("out");
    assert!(cogrnn(&out, &["train", "--config", cfg.to_str().unwrap()]).status.success());
    let seed = only_run_dir(&out, "ps").join("seed0");
    let dest = tmp.path().join("ev");
    let o = cogrnn(
        &out,
        &["eval", "--checkpoint", seed.join("ckpt-0000030.json").to_str().unwrap(), "--scales", "1,2,4", "--n-trials", "40", "--out", dest.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dest.join("eval.csv")).unwrap().lines().count(), 4);
    let psy = fs::read_to_string(dest.join("psychometric.csv")).unwrap();
    // six intervals per scale
    assert_eq!(psy.lines().count(), 1 + 18);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "rep.json", 80);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert!(cogrnn(out, &["train", "--config", cfg.to_str().unwrap(), "--seed", "4"]).status.success());
    }
    let ra = only_run_dir(&a, "rep").join("seed4");
    let rb = only_run_dir(&b, "rep").join("seed4");
    for f in ["curve.csv", "ckpt-0000080.json", "activity.bin", "activity.json"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn overrides_change_hash_and_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ov.json", 20);
    let out = tmp.path().join("o");
    let o = cogrnn(&out, &["train", "--config", cfg.to_str().unwrap(), "--override", "train.lr=0.0005"]);
    assert!(o.status.success());
    let run = only_run_dir(&out, "ov");
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["train"]["lr"], 0.0005);
    let plain = ExperimentConfig::load(&cfg, &[]).unwrap();
    assert_ne!(echo["config_hash"].as_str().unwrap(), plain.hash());
}

#[test]
fn configuration_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", 20);
    let o = cogrnn(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--override", "train.gamma=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.gamma"));

    let o = cogrnn(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--override", "memory.k=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("memory"));

    let o = cogrnn(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--override", "core.kind=gru"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("core.kind"));

    let o = cogrnn(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_checkpoint_exits_2_and_missing_activity_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("broken.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = cogrnn(tmp.path(), &["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = cogrnn(tmp.path(), &["analyze", "time-cells", "--run", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("activity.bin"));
}

#[test]
fn sweep_runs_grid_and_survives_failures() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "sw.json", 15);
    let manifest = tmp.path().join("m.json");
    fs::write(
        &manifest,
        r#"{"runs": [{"config": "sw.json", "seed": 9, "overrides": ["train.gamma=7"]}],
            "grids": [{"config": "sw.json", "seeds": [0, 1], "axes": {"train.lr": [0.001, 0.002]}}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = cogrnn(&out, &["sweep", "--manifest", manifest.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(3));
    let index: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("sweep-m.json")).unwrap()).unwrap();
    assert_eq!(index.len(), 5);
    assert_eq!(index.iter().filter(|e| e["status"] == "ok").count(), 4);
    assert!(index[0]["error"].as_str().unwrap().contains("train.gamma"));

    let empty = tmp.path().join("empty.json");
    fs::write(&empty, "{}").unwrap();
    let o = cogrnn(&out, &["sweep", "--manifest", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn checkpoint_resume_continues_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(tmp.path(), "ck.json", 60), &[]).unwrap();
    let mut whole = Trainer::new(&cfg.env, &cfg.agent_spec(), &cfg.train, 2).unwrap();
    let full = whole.run(|_, _| Ok(())).unwrap();

    let short = cogrnn::trainer::TrainConfig {
        n_trials: 25,
        ..cfg.train.clone()
    };
    let mut first = Trainer::new(&cfg.env, &cfg.agent_spec(), &short, 2).unwrap();
    first.run(|_, _| Ok(())).unwrap();
    let path = tmp.path().join("mid.json");
    Checkpoint::capture(&cfg, &first).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().trainer().unwrap();
    let rest = resumed.run(|_, _| Ok(())).unwrap();
    assert_eq!(rest.first().unwrap().trial, 26);
    assert_eq!(&full[25..], &rest[..]);
    assert_eq!(whole.agent.params, resumed.agent.params);
}

#[test]
fn checkpoint_rejects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(tmp.path(), "t.json", 3), &[]).unwrap();
    let mut t = Trainer::new(&cfg.env, &cfg.agent_spec(), &cfg.train, 0).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let text = Checkpoint::capture(&cfg, &t).to_json().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = 99.into();
    assert!(Checkpoint::from_json(&v.to_string()).unwrap_err().to_string().contains("format_version"));
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config"]["train"]["lr"] = 0.5.into();
    assert!(Checkpoint::from_json(&v.to_string()).unwrap_err().to_string().contains("hash"));
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["state"]["params"]["params"][0]["shape"] = serde_json::json!([1, 1]);
    let ck = Checkpoint::from_json(&v.to_string()).unwrap();
    assert!(ck.agent().is_err());
}
