//! Versioned JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use distlab_core::analysis::DEFAULT_EPSILON;
use distlab_core::dataset::{
    fetch_mnist, load_idx_with_classes, resolve_base_url, subsample, ChecksumTable, Dataset,
};
use distlab_core::distortion::DistortConfig;
use distlab_core::model::ModelConfig;
use distlab_core::training::{MutationSpec, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

const FULL_TRAIN: usize = 60_000;
const FULL_TEST: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Files {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Fetch {
        #[serde(default)]
        base_url: Option<String>,
        dest_dir: PathBuf,
        #[serde(default)]
        offline: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FullScale {
    #[serde(rename = "FULL")]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeskScale {
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scale {
    Full(FullScale),
    Desk(DeskScale),
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSource,
    pub scale: Scale,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distort: DistortConfig,
    /// Mutants compared against the reference trainer.
    #[serde(default)]
    pub mutation_pool: Vec<MutationSpec>,
    /// Drop mutants whose accuracy already gives them away before running
    /// the distortion pipeline on them.
    #[serde(default = "default_true")]
    pub screen_pool: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub coverage_threshold: f64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()
            .with_context(|| format!("invalid config file {}", path.display()))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Files {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataSource::Fetch { dest_dir, .. } => fix(dest_dir),
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if let Scale::Desk(d) = self.scale {
            if d.train_n == 0 || d.train_n > FULL_TRAIN || d.test_n == 0 || d.test_n > FULL_TEST {
                bail!(
                    "desk scale needs 1 <= train_n <= {FULL_TRAIN} and 1 <= test_n <= {FULL_TEST}"
                );
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        self.distort.validate()?;
        for m in &self.mutation_pool {
            m.operator.validate()?;
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            bail!("epsilon {} must be positive", self.epsilon);
        }
        Ok(())
    }

    /// Applies the command-line overrides that every subcommand shares.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(lambda) = o.lambda {
            self.distort.lambda = lambda;
        }
        if let Some(eps) = o.epsilon {
            self.epsilon = eps;
        }
        if o.offline {
            if let DataSource::Fetch { offline, .. } = &mut self.data {
                *offline = true;
            }
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    /// Loads training and test data, subsetting them at desk scale.
    pub fn load_data(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let c = self.model.num_classes;
        let (ls, ts) = match &self.data {
            DataSource::Files {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                load_idx_with_classes(train_images, train_labels, c)?,
                load_idx_with_classes(test_images, test_labels, c)?,
            ),
            DataSource::Fetch {
                base_url,
                dest_dir,
                offline,
            } => {
                let url = resolve_base_url(base_url.as_deref());
                let files = fetch_mnist(&url, dest_dir, *offline, &ChecksumTable::mnist())?;
                (
                    load_idx_with_classes(&files.train_images, &files.train_labels, c)?,
                    load_idx_with_classes(&files.test_images, &files.test_labels, c)?,
                )
            }
        };
        if ls.input_dim() != self.model.input_dim || ts.input_dim() != self.model.input_dim {
            bail!(
                "data has D={} (test D={}) but the model expects D={}",
                ls.input_dim(),
                ts.input_dim(),
                self.model.input_dim
            );
        }
        match self.scale {
            Scale::Full(_) => Ok((ls, ts)),
            Scale::Desk(d) => {
                let ls = subsample(&ls, d.train_n.min(ls.len()), d.seed)?;
                let ts = subsample(&ts, d.test_n.min(ts.len()), d.seed.wrapping_add(1))?;
                Ok((ls, ts))
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub offline: bool,
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "data": {"kind": "fetch", "dest_dir": "mnist"},
        "scale": {"train_n": 100, "test_n": 50, "seed": 3},
        "model": {"input_dim": 784, "hidden_dim": 64, "num_classes": 10},
        "output_dir": "out"
    }"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.distort, DistortConfig::default());
        assert_eq!(cfg.epsilon, 0.2);
        assert!(cfg.screen_pool);
    }

    #[test]
    fn full_scale_parses() {
        let text = MINIMAL.replace(r#"{"train_n": 100, "test_n": 50, "seed": 3}"#, r#""FULL""#);
        let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.scale, Scale::Full(FullScale::Full));
    }

    #[test]
    fn rejects_bad_schema_and_oversized_subsets() {
        let mut cfg: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.schema_version = 2;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.scale = Scale::Desk(DeskScale {
            train_n: 60_001,
            test_n: 10,
            seed: 0,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.apply_overrides(&Overrides {
            seed: Some(9),
            lambda: Some(1e6),
            epsilon: Some(0.3),
            offline: true,
            out: Some("elsewhere".into()),
        });
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.distort.lambda, 1e6);
        assert_eq!(cfg.epsilon, 0.3);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(matches!(cfg.data, DataSource::Fetch { offline: true, .. }));
    }
}
