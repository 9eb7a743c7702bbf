//! Experiment configuration.
//!
//! One TOML file fully determines a run:
//!
//! ```toml
//! [arch]
//! preset = "toy"
//!
//! [data]
//! kind = "tiny_images"
//! classes = 4
//! n = 2000
//! noise = 0.5
//!
//! [plan]
//! temperature = 4.0
//! stones = [1, 2, 3]
//!
//! [optim]
//! epochs = 60
//! milestones = [38, 45, 53]
//!
//! [run]
//! seed = 0
//! mode = "blockkd"
//! out_dir = "runs/toy"
//! ```
//!
//! Every field except `[arch]` has a default. [`ExperimentConfig::resolved`]
//! fills them all in and expands presets, so the written `config.resolved`
//! replays the run without depending on defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_idx_like, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_TEMPERATURE;
use crate::nn::{ArchSpec, NetSpec};
use crate::stones::{DistillPlan, ObjectiveTerms};
use crate::train::{OptimConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Named architecture; mutually exclusive with the explicit fields.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<NetSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student: Option<NetSpec>,
}

impl ArchConfig {
    pub fn spec(&self) -> Result<ArchSpec> {
        let explicit = [self.input.is_some(), self.classes.is_some(), self.teacher.is_some(), self.student.is_some()];
        match &self.preset {
            Some(name) if explicit.iter().any(|&e| e) => Err(Error::Config(format!(
                "[arch] sets preset '{name}' together with explicit fields; use one or the other"
            ))),
            Some(name) => ArchSpec::preset(name),
            None => match (self.input, self.classes, &self.teacher, &self.student) {
                (Some(input), Some(classes), Some(t), Some(s)) => {
                    Ok(ArchSpec { input, classes, teacher: t.clone(), student: s.clone() })
                }
                _ => Err(Error::Config(
                    "[arch] needs either a preset or all of input, classes, teacher, student".into(),
                )),
            },
        }
    }

    fn explicit(spec: &ArchSpec) -> ArchConfig {
        ArchConfig {
            preset: None,
            input: Some(spec.input),
            classes: Some(spec.classes),
            teacher: Some(spec.teacher.clone()),
            student: Some(spec.student.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `blobs`, `rings`, `tiny_images`, or `idx` for files on disk.
    pub kind: String,
    pub classes: usize,
    pub n: usize,
    pub noise: f64,
    pub channels: usize,
    /// Generator seed; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// Per-channel standardization with training-set statistics.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: "tiny_images".into(),
            classes: 4,
            n: 2000,
            noise: 0.5,
            channels: 1,
            seed: None,
            train_path: None,
            test_path: None,
            standardize: false,
        }
    }
}

impl DataConfig {
    fn is_idx(&self) -> bool {
        self.kind == "idx"
    }

    fn check(&self) -> Result<()> {
        if self.is_idx() {
            for (key, path) in [("train_path", &self.train_path), ("test_path", &self.test_path)] {
                match path {
                    None => return Err(Error::Config(format!("[data] kind = \"idx\" needs {key}"))),
                    Some(p) if !p.is_file() => {
                        return Err(Error::Config(format!("[data] {key} {} does not exist", p.display())))
                    }
                    _ => {}
                }
            }
            Ok(())
        } else {
            self.kind.parse::<SynthKind>().map(|_| ())
        }
    }

    /// Build or load the train and test splits.
    pub fn load(&self, run_seed: u64) -> Result<(Dataset, Dataset)> {
        self.check()?;
        let (train, test) = if self.is_idx() {
            let train = load_idx_like(self.train_path.as_deref().expect("checked"))?;
            let test = load_idx_like(self.test_path.as_deref().expect("checked"))?;
            (train, test)
        } else {
            let kind: SynthKind = self.kind.parse()?;
            gen_synthetic(kind, self.classes, self.n, self.seed.unwrap_or(run_seed), self.noise, self.channels)?
        };
        if self.standardize {
            let (mean, std) = train.channel_stats();
            Ok((train.standardize(&mean, &std)?, test.standardize(&mean, &std)?))
        } else {
            Ok((train, test))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Active stones, 1-based. All stones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stones: Option<Vec<usize>>,
    pub warmup_epochs: usize,
    pub student_distill: bool,
    pub stone_task: bool,
    pub stone_distill: bool,
    pub cross: bool,
    pub cross_coefficients: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        let terms = ObjectiveTerms::default();
        PlanConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            stones: None,
            warmup_epochs: 0,
            student_distill: terms.student_distill,
            stone_task: terms.stone_task,
            stone_distill: terms.stone_distill,
            cross: terms.cross,
            cross_coefficients: true,
        }
    }
}

impl PlanConfig {
    pub fn plan(&self, n_blocks: usize) -> Result<DistillPlan> {
        let mut plan = DistillPlan::new(n_blocks, self.temperature)?;
        if let Some(stones) = &self.stones {
            let keep: BTreeSet<usize> = stones.iter().copied().collect();
            if keep.len() != stones.len() {
                return Err(Error::Config(format!("duplicate stone index in {stones:?}")));
            }
            plan = plan.prune_stones(&keep)?;
        }
        plan.alpha = self.alpha;
        plan.beta = self.beta;
        plan.gamma = self.gamma;
        plan.warmup_epochs = self.warmup_epochs;
        plan.terms = ObjectiveTerms {
            student_distill: self.student_distill,
            stone_task: self.stone_task,
            stone_distill: self.stone_distill,
            cross: self.cross,
        };
        plan.cross_coefficients = self.cross_coefficients;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub out_dir: PathBuf,
    /// Frozen teacher to distill from. Without it, distillation runs train
    /// their own teacher first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 0, mode: TrainMode::BlockKd, out_dir: PathBuf::from("runs/default"), teacher_checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Teacher optimizer settings; `[optim]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_optim: Option<OptimConfig>,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    /// Static checks, including that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        let spec = self.arch.spec()?;
        crate::nn::validate_pair(&spec)?;
        self.plan.plan(spec.blocks())?;
        self.optim.validate()?;
        if let Some(t) = &self.teacher_optim {
            t.validate()?;
        }
        self.data.check()?;
        if !self.data.is_idx() && self.data.classes != spec.classes {
            return Err(Error::Config(format!(
                "[data] has {} classes but the architecture has {}",
                self.data.classes, spec.classes
            )));
        }
        Ok(())
    }

    /// A distillation run that names a teacher checkpoint needs the file to
    /// exist before training starts. `teach` writes it instead.
    pub fn check_teacher_input(&self) -> Result<()> {
        match &self.run.teacher_checkpoint {
            Some(p) if self.run.mode != TrainMode::Scratch && !p.is_file() => {
                Err(Error::Config(format!("teacher checkpoint {} does not exist", p.display())))
            }
            _ => Ok(()),
        }
    }

    pub fn spec(&self) -> Result<ArchSpec> {
        self.arch.spec()
    }

    pub fn distill_plan(&self) -> Result<DistillPlan> {
        self.plan.plan(self.spec()?.blocks())
    }

    pub fn teacher_optim(&self) -> &OptimConfig {
        self.teacher_optim.as_ref().unwrap_or(&self.optim)
    }

    /// Every default made explicit: preset expanded, stone list and data
    /// seed filled in.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let spec = self.spec()?;
        let mut out = self.clone();
        out.arch = ArchConfig::explicit(&spec);
        let plan = self.distill_plan()?;
        out.plan.stones = Some(plan.active_stones().iter().copied().collect());
        if !out.data.is_idx() {
            out.data.seed = Some(self.data.seed.unwrap_or(self.run.seed));
        }
        out.teacher_optim = Some(self.teacher_optim().clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[arch]\npreset = \"toy\"\n";

    #[test]
    fn defaults_follow_the_steady_weights() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let plan = cfg.distill_plan().unwrap();
        assert_eq!((plan.alpha, plan.beta, plan.gamma), (1.0, 1.0, 1.0));
        assert_eq!(plan.active_stones().len(), 3);
        assert_eq!(cfg.optim, OptimConfig::default());
        assert_eq!(cfg.run.mode, TrainMode::BlockKd);
    }

    #[test]
    fn resolved_round_trips_and_is_fixed_point() {
        let cfg = ExperimentConfig::from_toml(
            "[arch]\npreset = \"tiny-nonuniform\"\n[plan]\nstones = [3, 2]\ntemperature = 2.5\n[run]\nseed = 7\nmode = \"kd\"\n",
        )
        .unwrap();
        let r = cfg.resolved().unwrap();
        let text = r.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved().unwrap(), r);
        assert_eq!(back.spec().unwrap(), cfg.spec().unwrap());
        assert_eq!(back.distill_plan().unwrap(), cfg.distill_plan().unwrap());
        assert_eq!(r.data.seed, Some(7));
        assert_eq!(r.plan.stones, Some(vec![2, 3]));
    }

    #[test]
    fn rejects_bad_input() {
        let bad = [
            "",
            "[arch]\npreset = \"nope\"\n",
            "[arch]\npreset = \"toy\"\nclasses = 4\n",
            "[arch]\npreset = \"toy\"\n[plan]\ntemperature = 0.0\n",
            "[arch]\npreset = \"toy\"\n[plan]\nbeta = -1.0\n",
            "[arch]\npreset = \"toy\"\n[plan]\nstones = [4]\n",
            "[arch]\npreset = \"toy\"\n[plan]\nstones = [2, 2]\n",
            "[arch]\npreset = \"toy\"\n[data]\nkind = \"cifar\"\n",
            "[arch]\npreset = \"toy\"\n[data]\nclasses = 3\n",
            "[arch]\npreset = \"toy\"\n[data]\nkind = \"idx\"\ntrain_path = \"/nonexistent/a\"\ntest_path = \"/nonexistent/b\"\n",
            "[arch]\npreset = \"toy\"\n[run]\nmode = \"fast\"\n",
            "[arch]\npreset = \"toy\"\n[optim]\nbatch_size = 1\n",
            "[arch]\npreset = \"toy\"\ntypo = 1\n",
        ];
        for text in bad {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(err.is_config(), "{text:?} gave {err}");
        }
    }

    #[test]
    fn missing_teacher_checkpoint_matters_only_for_distillation() {
        let text = "[arch]\npreset = \"toy\"\n[run]\nteacher_checkpoint = \"/nonexistent/t.bkdc\"\n";
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        assert!(cfg.check_teacher_input().unwrap_err().is_config());
        cfg.run.mode = TrainMode::Scratch;
        assert!(cfg.check_teacher_input().is_ok());
    }

    #[test]
    fn explicit_arch_matches_preset() {
        let spec = ArchSpec::preset("toy").unwrap();
        let cfg = ExperimentConfig { arch: ArchConfig::explicit(&spec), ..ExperimentConfig::from_toml(MINIMAL).unwrap() };
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.spec().unwrap(), spec);
    }

    #[test]
    fn data_seed_defaults_to_run_seed() {
        let mut cfg = ExperimentConfig::from_toml("[arch]\npreset = \"mlp\"\n[data]\nkind = \"blobs\"\nn = 40\n").unwrap();
        let (a, _) = cfg.data.load(3).unwrap();
        cfg.data.seed = Some(3);
        let (b, _) = cfg.data.load(99).unwrap();
        assert_eq!(a.samples.to_vec(), b.samples.to_vec());
    }
}
