use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "world": {"n_train": 4, "n_val": 2, "image_w": 128, "image_h": 128},
  "train": {"iterations": 6, "crop_size": 48}
}"#;

fn bbd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbd")).args(args).env_remove("BBD_SEED").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let (data, cache) = (root.join("data"), root.join("cache"));

    ok(bbd(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    ok(bbd(&["attn-cache", "--config", s(&cfg), "--data", s(&data), "--out", s(&cache)]));
    let again = ok(bbd(&["attn-cache", "--config", s(&cfg), "--data", s(&data), "--out", s(&cache)]));
    assert!(again.contains("up to date"), "{again}");

    let sup = root.join("sup");
    ok(bbd(&["train", "--config", s(&cfg), "--data", s(&data), "--strategy", "supervised", "--out", s(&sup)]));
    let log = std::fs::read_to_string(sup.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iter,crop_idx,strategy,scale,agreement,passed,loss,api_calls_cum\n"));
    assert!(log.lines().skip(1).all(|l| l.ends_with(",0")), "supervised made API calls");
    assert!(sup.join("config.json").exists() && sup.join("inputs.json").exists());

    let runs: Vec<_> = ["a", "b"].iter().map(|n| root.join(n)).collect();
    for r in &runs {
        let args = ["train", "--config", s(&cfg), "--data", s(&data), "--cache", s(&cache), "--strategy", "atgc", "--out", s(r)];
        ok(bbd(&args));
    }
    for f in ["train_log.csv", "checkpoint.bin", "eval.csv"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }

    let ev = root.join("ev");
    ok(bbd(&["eval", "--checkpoint", s(&runs[0].join("checkpoint.bin")), "--data", s(&data), "--out", s(&ev)]));
    let csv = std::fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mIoU,"));

    let sw = root.join("sweep");
    ok(bbd(&["sweep", "--config", s(&cfg), "--data", s(&data), "--out", s(&sw)]));
    assert_eq!(std::fs::read_to_string(sw.join("sweep.csv")).unwrap().lines().count(), 1 + 8 * 13);

    let co = root.join("corr");
    ok(bbd(&["correlate", "--config", s(&cfg), "--data", s(&data), "--cache", s(&cache), "--crops", "5", "--out", s(&co)]));
    assert_eq!(std::fs::read_to_string(co.join("correlation.csv")).unwrap().lines().count(), 6);

    let ab = root.join("ablate");
    let args = ["ablate-tau", "--config", s(&cfg), "--data", s(&data), "--cache", s(&cache), "--taus", "0,0.7,0.9", "--out", s(&ab)];
    ok(bbd(&args));
    assert_eq!(std::fs::read_to_string(ab.join("ablate_tau.csv")).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"train": {"tua": 0.5}}"#).unwrap();
    assert_eq!(bbd(&["gen-data", "--config", s(&bad), "--out", s(&root.join("x"))]).status.code(), Some(2));

    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = s(&root.join("t")).to_string();
    let conflict = bbd(&["train", "--config", s(&cfg), "--strategy", "naive", "--fixed-scale", "0.5", "--out", &out]);
    assert_eq!(conflict.status.code(), Some(2));

    let data = root.join("data");
    ok(bbd(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let missing = bbd(&["train", "--config", s(&cfg), "--data", s(&data), "--strategy", "atgc", "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));

    std::fs::write(data.join("train/gt_00001.brf1"), b"BRF1").unwrap();
    let corrupt = bbd(&["train", "--config", s(&cfg), "--data", s(&data), "--strategy", "supervised", "--out", &out]);
    assert_eq!(corrupt.status.code(), Some(3));

    let remote = bbd(&["train", "--config", s(&cfg), "--strategy", "naive", "--api", "http://127.0.0.1:9", "--out", &out]);
    assert_eq!(remote.status.code(), Some(5));

    let quota = root.join("quota.json");
    std::fs::write(&quota, r#"{"world": {"n_train": 2, "n_val": 1, "image_w": 128, "image_h": 128}, "train": {"iterations": 3, "crop_size": 48}, "api": {"max_calls": 2}}"#).unwrap();
    assert_eq!(bbd(&["train", "--config", s(&quota), "--strategy", "naive", "--out", &out]).status.code(), Some(4));
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let st = Command::new(env!("CARGO_BIN_EXE_bbd"))
            .args(["train", "--config", s(&cfg), "--strategy", "supervised", "--out", s(&out)])
            .env("BBD_SEED", seed)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read_to_string(out.join("config.json")).unwrap()
    };
    assert!(run("7", "a").contains("\"seed\": 7"));
    let bad = Command::new(env!("CARGO_BIN_EXE_bbd"))
        .args(["train", "--config", s(&cfg), "--out", s(&dir.path().join("c"))])
        .env("BBD_SEED", "x")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}
