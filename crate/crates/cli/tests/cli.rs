use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const QUICK: &str = r#"
[arch]
preset = "toy"

[data]
kind = "tiny_images"
n = 160

[plan]
warmup_epochs = 1

[optim]
epochs = 2
batch_size = 32
milestones = [1]

[teacher_optim]
epochs = 1
batch_size = 32
milestones = []

[run]
seed = 3
mode = "blockkd"
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blockkd"));
    c.env_remove("BKD_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn blockkd")
}

fn write_config(dir: &Path, name: &str, out_dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!("{QUICK}out_dir = {:?}\n{extra}", out_dir.to_str().unwrap());
    fs::write(&path, text).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn metrics(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect::<Vec<_>>()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let j = rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn scratch_run_writes_outputs_without_distillation_terms() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("scratch");
    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--mode", "scratch"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "timing.csv", "student.bkdc", "config.resolved"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(!out.join("teacher.bkdc").exists());
    let rows = metrics(&out);
    assert_eq!(rows.len(), 1 + 3);
    for c in ["L_distill", "L_cross"] {
        assert!(column(&rows, c).iter().all(|&v| v == 0.0), "{c} nonzero");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");

    let missing = run(&["train", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[arch]\npreset = \"toy\"\n[data]\nkind = \"tiny_images\"\n[run]\nbogus = 1\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", bad.to_str().unwrap()])), 2);

    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    assert_eq!(code(&run(&["train", "--config", cfg.to_str().unwrap(), "--stones", "1,9"])), 2);
    assert_eq!(code(&run(&["train", "--config", cfg.to_str().unwrap(), "--mode", "sideways"])), 2);

    let idx = tmp.path().join("idx.toml");
    let text = QUICK.replace("kind = \"tiny_images\"", "kind = \"idx\"\ntrain_path = \"/no/such/train\"\ntest_path = \"/no/such/test\"");
    fs::write(&idx, format!("{text}out_dir = {:?}\n", out.to_str().unwrap())).unwrap();
    assert_eq!(code(&run(&["train", "--config", idx.to_str().unwrap()])), 2);

    let ckpt = write_config(tmp.path(), "k.toml", &out, "teacher_checkpoint = \"/no/such/teacher.bkdc\"\n");
    assert_ne!(code(&run(&["train", "--config", ckpt.to_str().unwrap()])), 0);
}

#[test]
fn theory_checks_are_deterministic_and_validate_seeds() {
    let tmp = TempDir::new().unwrap();
    let zero = run(&["theory", "--check", "hightemp", "--seeds", "0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&zero), 2);
    assert_eq!(code(&run(&["theory", "--check", "nope", "--out", tmp.path().to_str().unwrap()])), 2);

    let mut bytes = Vec::new();
    for k in ["a", "b"] {
        let dir = tmp.path().join(k);
        let o = run(&["theory", "--check", "hightemp", "--seeds", "4", "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push(fs::read(dir.join("hightemp.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.remove(0)).unwrap();
    assert!(text.starts_with("seed,tau,exact_norm,approx_norm,rel_err"));
    assert_eq!(text.lines().count(), 1 + 4 * 5);
}

#[test]
fn teach_then_train_from_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("t").join("teacher.bkdc");
    let extra = format!("teacher_checkpoint = {:?}\n", ckpt.to_str().unwrap());
    let cfg = write_config(tmp.path(), "c.toml", &tmp.path().join("teach"), &extra);
    let o = run(&["teach", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&ckpt).unwrap();
    assert_eq!(code(&run(&["teach", "--config", cfg.to_str().unwrap()])), 0);
    assert_eq!(first, fs::read(&ckpt).unwrap());
    assert!(tmp.path().join("teach").join("teacher_metrics.csv").exists());

    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("teach").join("student.bkdc").exists());
    assert!(!tmp.path().join("teach").join("teacher.bkdc").exists());
}

#[test]
fn blockkd_without_stones_matches_kd() {
    let tmp = TempDir::new().unwrap();
    let kd = write_config(tmp.path(), "kd.toml", &tmp.path().join("kd"), "");
    let bk = write_config(tmp.path(), "bk.toml", &tmp.path().join("bk"), "");
    assert_eq!(code(&run(&["train", "--config", kd.to_str().unwrap(), "--mode", "kd", "--stones", ""])), 0);
    assert_eq!(code(&run(&["train", "--config", bk.to_str().unwrap(), "--mode", "blockkd", "--stones", "none"])), 0);
    assert_eq!(
        fs::read(tmp.path().join("kd").join("metrics.csv")).unwrap(),
        fs::read(tmp.path().join("bk").join("metrics.csv")).unwrap()
    );
}

#[test]
fn resolved_config_replays_the_run() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let cfg = write_config(tmp.path(), "c.toml", &first, "");
    assert_eq!(code(&run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "8", "--stones", "2,3"])), 0);

    let resolved = fs::read_to_string(first.join("config.resolved")).unwrap();
    let second = tmp.path().join("second");
    let replay = tmp.path().join("replay.toml");
    fs::write(&replay, resolved.replace(first.to_str().unwrap(), second.to_str().unwrap())).unwrap();
    let o = run(&["train", "--config", replay.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(first.join("metrics.csv")).unwrap(), fs::read(second.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(first.join("student.bkdc")).unwrap(), fs::read(second.join("student.bkdc")).unwrap());
}

#[test]
fn output_root_prefixes_relative_dirs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, format!("{QUICK}out_dir = \"rel/run\"\n")).unwrap();
    let o = bin()
        .env("BKD_OUT", tmp.path())
        .args(["train", "--config", cfg.to_str().unwrap(), "--mode", "scratch"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("rel/run/metrics.csv").exists());
}

#[test]
fn compare_summarizes_each_variant() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("cmp");
    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    let o = run(&["compare", "--config", cfg.to_str().unwrap(), "--grid", "scratch,stones-2-3", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let summary = csv::Reader::from_path(out.join("summary.csv")).unwrap().into_records().count();
    let cells = csv::Reader::from_path(out.join("cells.csv")).unwrap().into_records().count();
    assert_eq!((summary, cells), (2, 4));
    assert!(out.join("stones-2-3").join("seed4").join("metrics.csv").exists());

    assert_eq!(code(&run(&["compare", "--config", cfg.to_str().unwrap(), "--grid", "nonsense"])), 2);
}
