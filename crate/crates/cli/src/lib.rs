//! Commands behind the `blockkd` binary. Each returns a `Result`; the binary
//! maps configuration errors to exit code 2 and everything else to 1.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use blockkd::checkpoint::{load_checkpoint_for, save_checkpoint, CheckpointMeta};
use blockkd::config::ExperimentConfig;
use blockkd::data::Dataset;
use blockkd::nn::CompositeNet;
use blockkd::theory::{hightemp_suite, pull_suite, taylor_suite, SuiteOutcome};
use blockkd::train::{
    train_run, train_teacher, write_metrics_csv, write_timing_csv, EpochRow, TrainMode, TrainReport,
};
use blockkd::{Error, Result};

pub mod compare;

pub const OUT_ENV: &str = "BKD_OUT";

pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        2
    } else {
        1
    }
}

/// Relative output directories resolve against `$BKD_OUT` when it is set.
pub fn output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// `"1,3"` → `[1, 3]`; empty or `none` → no stones.
pub fn parse_stones(text: &str) -> Result<Vec<usize>> {
    let t = text.trim();
    if t.is_empty() || t == "none" {
        return Ok(Vec::new());
    }
    t.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad stone index '{s}' in '{text}'"))))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub stones: Option<Vec<usize>>,
    pub mode: Option<TrainMode>,
}

/// Apply command-line overrides and re-validate.
pub fn apply_overrides(cfg: &ExperimentConfig, o: &TrainOverrides) -> Result<ExperimentConfig> {
    let mut cfg = cfg.clone();
    if let Some(seed) = o.seed {
        cfg.run.seed = seed;
    }
    if let Some(stones) = &o.stones {
        cfg.plan.stones = Some(stones.clone());
    }
    if let Some(mode) = o.mode {
        cfg.run.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn write_run_csvs(dir: &Path, rows: &[EpochRow], n_blocks: usize) -> Result<()> {
    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), rows, n_blocks)?;
    write_timing_csv(BufWriter::new(File::create(dir.join("timing.csv"))?), rows)?;
    Ok(())
}

/// Teacher for a distillation run: the configured checkpoint, or one
/// trained here with `[teacher_optim]` and the run seed. Returned frozen.
pub fn obtain_teacher(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<(CompositeNet, Option<Vec<EpochRow>>)> {
    let arch = cfg.spec()?.teacher_arch();
    match &cfg.run.teacher_checkpoint {
        Some(path) => {
            let (net, _) = load_checkpoint_for(path, &arch)?;
            Ok((net.freeze(), None))
        }
        None => {
            let (net, rows) = train_teacher(&arch, cfg.teacher_optim(), train, test, cfg.run.seed)?;
            Ok((net.freeze(), Some(rows)))
        }
    }
}

pub struct TrainOutput {
    pub dir: PathBuf,
    pub report: TrainReport,
}

/// Train one student and write `metrics.csv`, `timing.csv`,
/// `student.bkdc` and `config.resolved`. A teacher trained in-run is saved
/// as `teacher.bkdc` next to them.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    cfg.check_teacher_input()?;
    let resolved = cfg.resolved()?;
    let dir = output_dir(&cfg.run.out_dir);
    let spec = cfg.spec()?;
    let plan = cfg.distill_plan()?;
    let (train, test) = cfg.data.load(cfg.run.seed)?;
    create_dir(&dir)?;
    write_text(&dir.join("config.resolved"), &resolved.to_toml())?;

    let teacher = match cfg.run.mode {
        TrainMode::Scratch => None,
        _ => {
            let (t, rows) = obtain_teacher(cfg, &train, &test)?;
            if let Some(rows) = rows {
                let meta = CheckpointMeta { seed: cfg.run.seed, epoch: rows.len() as u64 - 1 };
                save_checkpoint(&t, &dir.join("teacher.bkdc"), meta)?;
            }
            Some(t)
        }
    };
    let report = train_run(&spec, cfg.run.mode, &plan, &cfg.optim, teacher.as_ref(), &train, &test, cfg.run.seed)?;
    write_run_csvs(&dir, &report.rows, report.n_blocks)?;
    let meta = CheckpointMeta { seed: cfg.run.seed, epoch: cfg.optim.epochs as u64 };
    save_checkpoint(&report.student, &dir.join("student.bkdc"), meta)?;
    Ok(TrainOutput { dir, report })
}

/// Where `teach` writes the teacher: `run.teacher_checkpoint` if set,
/// otherwise `teacher.bkdc` in the output directory.
pub fn teacher_path(cfg: &ExperimentConfig) -> PathBuf {
    match &cfg.run.teacher_checkpoint {
        Some(p) => p.clone(),
        None => output_dir(&cfg.run.out_dir).join("teacher.bkdc"),
    }
}

pub struct TeachOutput {
    pub checkpoint: PathBuf,
    pub rows: Vec<EpochRow>,
}

/// Train the teacher with the task loss and save it along with its metrics.
pub fn run_teach(cfg: &ExperimentConfig) -> Result<TeachOutput> {
    cfg.validate()?;
    let (train, test) = cfg.data.load(cfg.run.seed)?;
    let arch = cfg.spec()?.teacher_arch();
    let path = teacher_path(cfg);
    let dir = output_dir(&cfg.run.out_dir);
    create_dir(&dir)?;
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let (net, rows) = train_teacher(&arch, cfg.teacher_optim(), &train, &test, cfg.run.seed)?;
    write_metrics_csv(BufWriter::new(File::create(dir.join("teacher_metrics.csv"))?), &rows, 0)?;
    let meta = CheckpointMeta { seed: cfg.run.seed, epoch: cfg.teacher_optim().epochs as u64 };
    save_checkpoint(&net, &path, meta)?;
    Ok(TeachOutput { checkpoint: path, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoryCheck {
    HighTemp,
    Taylor,
    Pull,
}

impl std::str::FromStr for TheoryCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hightemp" => Ok(TheoryCheck::HighTemp),
            "taylor" => Ok(TheoryCheck::Taylor),
            "pull" => Ok(TheoryCheck::Pull),
            other => Err(Error::Config(format!("unknown check '{other}' (expected hightemp, taylor or pull)"))),
        }
    }
}

impl TheoryCheck {
    pub fn name(self) -> &'static str {
        match self {
            TheoryCheck::HighTemp => "hightemp",
            TheoryCheck::Taylor => "taylor",
            TheoryCheck::Pull => "pull",
        }
    }
}

/// Run a theory suite over seeds `0..seeds` and write `<check>.csv` into
/// `out_dir`. Threshold violations are reported in the outcome, not as
/// errors.
pub fn run_theory(check: TheoryCheck, seeds: u64, out_dir: &Path) -> Result<(SuiteOutcome, PathBuf)> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let outcome = match check {
        TheoryCheck::HighTemp => hightemp_suite(seeds)?,
        TheoryCheck::Taylor => taylor_suite(seeds)?,
        TheoryCheck::Pull => pull_suite(seeds)?,
    };
    let dir = output_dir(out_dir);
    create_dir(&dir)?;
    let path = dir.join(format!("{}.csv", check.name()));
    outcome.write_csv(BufWriter::new(File::create(&path)?))?;
    Ok((outcome, path))
}

/// Stones of a plan as a display string: `2-3`, or `none`.
pub fn stones_label(stones: &BTreeSet<usize>) -> String {
    if stones.is_empty() {
        "none".into()
    } else {
        stones.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
    }
}
