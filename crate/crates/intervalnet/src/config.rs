//! Experiment configuration: a flat TOML key set mirroring the training
//! hyperparameters plus benchmark selection. Unknown keys are rejected, and
//! referenced paths are checked before training starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, ContinualBenchmark};
use crate::embedding::Nesting;
use crate::error::{Error, Result};
use crate::hypernet::Mode;
use crate::target_net::TargetArch;
use crate::trainer::TrainConfig;

fn default_kappa_floor() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_true() -> bool {
    true
}

/// One experiment, parsed from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "split_mnist" | "permuted_mnist" | "synthetic" | "synthetic_shared"
    pub benchmark: String,
    /// "til" | "dil" | "cil"
    pub mode: String,
    /// Directory holding IDX files (MNIST benchmarks only).
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,

    pub beta: f64,
    #[serde(default = "default_kappa_floor")]
    pub kappa_floor: f64,
    pub gamma: f64,
    /// Embedding dimension M.
    pub m: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Iterations per task.
    pub iterations: usize,
    /// "cos" | "tanh" | "none"
    pub nesting: String,
    #[serde(default)]
    pub relaxed: bool,
    /// Cap on train samples per task (quick runs); full sets when absent.
    #[serde(default)]
    pub subset_cap: Option<usize>,

    /// Hidden layer widths of the target network.
    pub target_hidden: Vec<usize>,
    /// Hidden layer widths of the hypernetwork.
    pub hnet_hidden: Vec<usize>,

    /// Task count (permuted / synthetic streams).
    #[serde(default)]
    pub tasks: Option<usize>,
    /// Synthetic stream shape.
    #[serde(default)]
    pub classes_per_task: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub separation: Option<f64>,
    #[serde(default)]
    pub n_per_class: Option<usize>,

    /// Write a checkpoint after every task (final checkpoint always).
    #[serde(default = "default_true")]
    pub checkpoint_every_task: bool,

    /// Simple ablation sweeps: rerun the experiment once per value of the
    /// named field, each into its own subdirectory.
    #[serde(default)]
    pub sweep_key: Option<String>,
    #[serde(default)]
    pub sweep_values: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn mode_enum(&self) -> Result<Mode> {
        match self.mode.as_str() {
            "til" => Ok(Mode::Til),
            "dil" => Ok(Mode::Dil),
            "cil" => Ok(Mode::Cil),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn nesting_enum(&self) -> Result<Nesting> {
        match self.nesting.as_str() {
            "cos" => Ok(Nesting::Cos),
            "tanh" => Ok(Nesting::Tanh),
            "none" => Ok(Nesting::None),
            other => Err(Error::Config(format!("unknown nesting {other:?}"))),
        }
    }

    /// Checks enum fields, paths, and benchmark-specific requirements.
    pub fn validate(&self) -> Result<()> {
        self.mode_enum()?;
        self.nesting_enum()?;
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        if !(0.0 < self.kappa_floor && self.kappa_floor < 1.0) {
            return Err(Error::Config("kappa_floor must lie in (0, 1)".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        match self.benchmark.as_str() {
            "split_mnist" | "permuted_mnist" => {
                let dir = self.data_dir.as_ref().ok_or_else(|| {
                    Error::Config(format!("{} requires data_dir", self.benchmark))
                })?;
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "data_dir {} is not a directory",
                        dir.display()
                    )));
                }
                if self.benchmark == "permuted_mnist" && self.tasks.is_none() {
                    return Err(Error::Config("permuted_mnist requires tasks".into()));
                }
            }
            "synthetic" | "synthetic_shared" => {
                for (name, missing) in [
                    ("tasks", self.tasks.is_none()),
                    ("dim", self.dim.is_none()),
                    ("separation", self.separation.is_none()),
                    ("n_per_class", self.n_per_class.is_none()),
                ] {
                    if missing {
                        return Err(Error::Config(format!(
                            "{} requires {name}",
                            self.benchmark
                        )));
                    }
                }
                if self.benchmark == "synthetic" && self.classes_per_task.is_none() {
                    return Err(Error::Config("synthetic requires classes_per_task".into()));
                }
            }
            other => return Err(Error::Config(format!("unknown benchmark {other:?}"))),
        }
        if self.sweep_key.is_some() != self.sweep_values.is_some() {
            return Err(Error::Config(
                "sweep_key and sweep_values must be given together".into(),
            ));
        }
        if let Some(key) = &self.sweep_key {
            if !matches!(key.as_str(), "beta" | "gamma" | "lr") {
                return Err(Error::Config(format!(
                    "sweep_key must be one of beta/gamma/lr, got {key:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            mode: self.mode_enum()?,
            beta: self.beta,
            kappa_floor: self.kappa_floor,
            lr: self.lr,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: self.batch_size,
            iterations: self.iterations,
            gamma: self.gamma,
            m: self.m,
            nesting: self.nesting_enum()?,
            seed: self.seed,
            relaxed: self.relaxed,
        })
    }

    /// Builds the configured task stream.
    pub fn build_benchmark(&self) -> Result<ContinualBenchmark> {
        match self.benchmark.as_str() {
            "split_mnist" => {
                let dir = self.data_dir.as_ref().unwrap();
                let (train, test) = data::idx::load_mnist_dir(dir)?;
                data::split_tasks(
                    (train.images, &train.labels),
                    (test.images, &test.labels),
                    &data::default_split_pairs(),
                    self.mode_enum()? == Mode::Dil,
                    self.subset_cap,
                )
            }
            "permuted_mnist" => {
                let dir = self.data_dir.as_ref().unwrap();
                let (train, test) = data::idx::load_mnist_dir(dir)?;
                data::permuted_tasks(
                    (train.images, &train.labels),
                    (test.images, &test.labels),
                    self.tasks.unwrap(),
                    self.seed,
                    self.subset_cap,
                )
            }
            "synthetic" => Ok(data::synthetic::synthetic_gaussian_tasks(
                self.tasks.unwrap(),
                self.classes_per_task.unwrap(),
                self.dim.unwrap(),
                self.separation.unwrap(),
                self.n_per_class.unwrap(),
                self.seed,
            )),
            "synthetic_shared" => Ok(data::synthetic::synthetic_shared_solution_tasks(
                self.tasks.unwrap(),
                self.dim.unwrap(),
                self.separation.unwrap(),
                self.n_per_class.unwrap(),
                self.seed,
            )),
            other => Err(Error::Config(format!("unknown benchmark {other:?}"))),
        }
    }

    /// Target architecture implied by the benchmark and hidden widths.
    pub fn target_arch(&self, benchmark: &ContinualBenchmark) -> TargetArch {
        let out_dim = match &benchmark.head {
            crate::target_net::HeadLayout::Shared => benchmark.tasks[0].classes.len(),
            crate::target_net::HeadLayout::MultiHead { classes_per_task } => {
                classes_per_task.iter().sum()
            }
        };
        let mut sizes = vec![benchmark.input_dim];
        sizes.extend_from_slice(&self.target_hidden);
        sizes.push(out_dim);
        TargetArch::new(sizes, benchmark.head.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_toml() -> String {
        r#"
            benchmark = "synthetic_shared"
            mode = "dil"
            output_dir = "/tmp/run"
            seed = 7
            beta = 0.01
            gamma = 1.0
            m = 8
            iterations = 100
            nesting = "cos"
            target_hidden = [16]
            hnet_hidden = [16]
            tasks = 2
            dim = 4
            separation = 8.0
            n_per_class = 50
        "#
        .to_string()
    }

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(&synth_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.mode_enum().unwrap(), Mode::Dil);
        assert_eq!(cfg.kappa_floor, 0.5); // default
        assert_eq!(cfg.batch_size, 128); // default
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = synth_toml() + "\nnot_a_key = 3\n";
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_data_dir_rejected() {
        let mut cfg = ExperimentConfig::from_toml(&synth_toml()).unwrap();
        cfg.benchmark = "split_mnist".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.data_dir = Some(PathBuf::from("/definitely/not/here"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_roundtrip_is_stable() {
        let cfg = ExperimentConfig::from_toml(&synth_toml()).unwrap();
        let text = cfg.to_toml();
        let cfg2 = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn benchmark_and_arch_assembly() {
        let cfg = ExperimentConfig::from_toml(&synth_toml()).unwrap();
        let b = cfg.build_benchmark().unwrap();
        assert_eq!(b.num_tasks(), 2);
        let arch = cfg.target_arch(&b);
        assert_eq!(arch.layer_sizes, vec![4, 16, 2]);
    }
}
