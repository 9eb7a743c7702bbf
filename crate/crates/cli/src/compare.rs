//! Ablation grids over objective terms and stone subsets.
//!
//! A variant is named by what it trains with:
//!
//! - `scratch`: task loss only
//! - `kd`: `L^S_task + L^S_distill`
//! - `kd+<term>+…` with terms from `stone_task`, `stone_distill`, `cross`:
//!   block-wise run with only those stone terms on top of `kd`
//! - `blockkd`: the configured plan
//! - `stones-<i>-<j>` or `stones-none`: every term, only those stones
//!
//! Named grids expand to lists of variants; see [`grid_variants`].

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use blockkd::config::ExperimentConfig;
use blockkd::stones::ObjectiveTerms;
use blockkd::train::{train_run, TrainMode};
use blockkd::{Error, Result};

use crate::{obtain_teacher, output_dir, stones_label, write_run_csvs};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub mode: TrainMode,
    /// Replaces the configured stone set when present.
    pub stones: Option<Vec<usize>>,
    /// Replaces the configured objective terms when present.
    pub terms: Option<ObjectiveTerms>,
}

const TERM_NAMES: [&str; 3] = ["stone_task", "stone_distill", "cross"];

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        let v = |mode, stones, terms| Ok(Variant { name: name.to_string(), mode, stones, terms });
        match name {
            "scratch" => return v(TrainMode::Scratch, None, None),
            "kd" => return v(TrainMode::Kd, Some(Vec::new()), None),
            "blockkd" => return v(TrainMode::BlockKd, None, None),
            _ => {}
        }
        if let Some(rest) = name.strip_prefix("stones-") {
            let stones = if rest == "none" {
                Vec::new()
            } else {
                rest.split('-')
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("bad stone list in variant '{name}'"))))
                    .collect::<Result<Vec<usize>>>()?
            };
            return v(TrainMode::BlockKd, Some(stones), Some(ObjectiveTerms::default()));
        }
        if let Some(rest) = name.strip_prefix("kd+") {
            let mut terms = ObjectiveTerms { student_distill: true, stone_task: false, stone_distill: false, cross: false };
            for part in rest.split('+') {
                match part {
                    "stone_task" => terms.stone_task = true,
                    "stone_distill" => terms.stone_distill = true,
                    "cross" => terms.cross = true,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown term '{other}' in variant '{name}' (expected one of {TERM_NAMES:?})"
                        )))
                    }
                }
            }
            return v(TrainMode::BlockKd, None, Some(terms));
        }
        Err(Error::Config(format!("unknown variant '{name}'")))
    }

    /// Config for one cell of the grid.
    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.run.mode = self.mode;
        cfg.run.seed = seed;
        if let Some(s) = &self.stones {
            cfg.plan.stones = Some(s.clone());
        }
        if let Some(t) = self.terms {
            cfg.plan.student_distill = t.student_distill;
            cfg.plan.stone_task = t.stone_task;
            cfg.plan.stone_distill = t.stone_distill;
            cfg.plan.cross = t.cross;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named grids:
///
/// - `objectives`: `kd`, `kd+stone_distill`, `kd+stone_distill+cross`,
///   `kd+stone_task+stone_distill+cross`
/// - `stones`: `stones-none`, `stones-2-3`, `stones-1-2-3` (for three
///   blocks; in general the last two stones and all stones)
/// - `trend`: `scratch`, `kd`, `blockkd`
///
/// Anything else in the comma-separated list is a single variant name.
/// Duplicates are dropped, first occurrence wins.
pub fn grid_variants(grid: &str, n_blocks: usize) -> Result<Vec<Variant>> {
    let mut names: Vec<String> = Vec::new();
    for item in grid.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "objectives" => names.extend(
                ["kd", "kd+stone_distill", "kd+stone_distill+cross", "kd+stone_task+stone_distill+cross"]
                    .map(String::from),
            ),
            "stones" => {
                let all: Vec<String> = (1..=n_blocks).map(|i| i.to_string()).collect();
                let tail = all[n_blocks.saturating_sub(2)..].join("-");
                names.extend(["stones-none".to_string(), format!("stones-{tail}"), format!("stones-{}", all.join("-"))]);
            }
            "trend" => names.extend(["scratch", "kd", "blockkd"].map(String::from)),
            other => names.push(other.to_string()),
        }
    }
    let mut seen = BTreeSet::new();
    names.retain(|n| seen.insert(n.clone()));
    if names.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    names.iter().map(|n| Variant::parse(n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub test_acc: f64,
    pub ms_per_batch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub mode: TrainMode,
    pub stones: String,
    pub terms: ObjectiveTerms,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub ms_mean: f64,
    pub ms_std: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub dir: PathBuf,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
    /// Test accuracy of each seed's teacher, empty when loaded from disk or
    /// unused.
    pub teacher_acc: Vec<(u64, f64)>,
    pub seconds: f64,
}

impl CompareOutput {
    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every variant for seeds `run.seed .. run.seed + seeds`. Each seed
/// shares one dataset and one teacher across its variants. Cells write to
/// `<out>/<variant>/seed<k>/`; the summary goes to `<out>/summary.csv` and
/// per-cell results to `<out>/cells.csv`.
pub fn run_compare(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: u64,
    mut progress: impl FnMut(&str),
) -> Result<CompareOutput> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    base.validate()?;
    let cells_cfg: Vec<Vec<ExperimentConfig>> = (0..seeds)
        .map(|k| variants.iter().map(|v| v.apply(base, base.run.seed + k)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    for c in cells_cfg.iter().flatten() {
        c.check_teacher_input()?;
    }
    let dir = output_dir(&base.run.out_dir);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;

    let started = Instant::now();
    let spec = base.spec()?;
    let mut cells = Vec::new();
    let mut teacher_acc = Vec::new();
    for row in &cells_cfg {
        let seed = row[0].run.seed;
        let (train, test) = row[0].data.load(seed)?;
        let teacher = if variants.iter().any(|v| v.mode != TrainMode::Scratch) {
            let (t, rows) = obtain_teacher(&row[0], &train, &test)?;
            if let Some(rows) = rows {
                let acc = rows.last().expect("initial row").test_acc;
                progress(&format!("seed {seed}: teacher test acc {acc:.4}"));
                teacher_acc.push((seed, acc));
            }
            Some(t)
        } else {
            None
        };
        for (v, cfg) in variants.iter().zip(row) {
            let plan = cfg.distill_plan()?;
            let report = train_run(&spec, cfg.run.mode, &plan, &cfg.optim, teacher.as_ref(), &train, &test, seed)?;
            let cdir = cell_dir(&dir, &v.name, seed);
            std::fs::create_dir_all(&cdir)?;
            write_run_csvs(&cdir, &report.rows, report.n_blocks)?;
            std::fs::write(cdir.join("config.resolved"), cfg.resolved()?.to_toml())?;
            let cell = Cell {
                variant: v.name.clone(),
                seed,
                test_acc: report.final_test_acc(),
                ms_per_batch: report.mean_ms_per_batch(),
            };
            progress(&format!(
                "seed {seed}: {:<36} test acc {:.4}  {:.2} ms/batch",
                v.name, cell.test_acc, cell.ms_per_batch
            ));
            cells.push(cell);
        }
    }

    let summary = variants
        .iter()
        .zip(&cells_cfg[0])
        .map(|(v, cfg)| -> Result<SummaryRow> {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.variant == v.name).collect();
            let (acc_mean, acc_std) = mean_std(&mine.iter().map(|c| c.test_acc).collect::<Vec<_>>());
            let (ms_mean, ms_std) = mean_std(&mine.iter().map(|c| c.ms_per_batch).collect::<Vec<_>>());
            let plan = blockkd::train::plan_for_mode(cfg.run.mode, &cfg.distill_plan()?);
            Ok(SummaryRow {
                variant: v.name.clone(),
                mode: cfg.run.mode,
                stones: stones_label(plan.active_stones()),
                terms: plan.terms,
                runs: mine.len(),
                acc_mean,
                acc_std,
                ms_mean,
                ms_std,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_summary(BufWriter::new(File::create(dir.join("summary.csv"))?), &summary)?;
    write_cells(BufWriter::new(File::create(dir.join("cells.csv"))?), &cells)?;
    Ok(CompareOutput { dir, cells, summary, teacher_acc, seconds: started.elapsed().as_secs_f64() })
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "mode",
        "stones",
        "student_distill",
        "stone_task",
        "stone_distill",
        "cross",
        "runs",
        "test_acc_mean",
        "test_acc_std",
        "ms_per_batch_mean",
        "ms_per_batch_std",
    ])?;
    for r in rows {
        let distill_on = r.mode != TrainMode::Scratch;
        let stones_on = r.mode == TrainMode::BlockKd && r.stones != "none";
        w.write_record([
            r.variant.clone(),
            r.mode.to_string(),
            r.stones.clone(),
            (distill_on && r.terms.student_distill).to_string(),
            (stones_on && r.terms.stone_task).to_string(),
            (stones_on && r.terms.stone_distill).to_string(),
            (stones_on && r.terms.cross).to_string(),
            r.runs.to_string(),
            format!("{:.6}", r.acc_mean),
            format!("{:.6}", r.acc_std),
            format!("{:.4}", r.ms_mean),
            format!("{:.4}", r.ms_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_cells<W: Write>(out: W, cells: &[Cell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "seed", "test_acc", "ms_per_batch"])?;
    for c in cells {
        w.write_record([c.variant.clone(), c.seed.to_string(), c.test_acc.to_string(), format!("{:.4}", c.ms_per_batch)])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary as aligned text for the terminal.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<36} {:>6} {:>18} {:>16}\n", "variant", "stones", "test acc", "ms/batch");
    for r in rows {
        s.push_str(&format!(
            "{:<36} {:>6} {:>9.4} ± {:<6.4} {:>7.2} ± {:<6.2}\n",
            r.variant, r.stones, r.acc_mean, r.acc_std, r.ms_mean, r.ms_std
        ));
    }
    s
}

/// Location of a cell's outputs.
pub fn cell_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join(variant).join(format!("seed{seed}"))
}
