//! Run configuration file. Every section and key is optional; unknown keys
//! are rejected so a typo cannot silently change a benchmark.

use std::path::PathBuf;

use serde::Deserialize;

use super::CliError;
use crate::costcal::{CostParams, DEFAULT_GPUS_PER_NODE};
use crate::datapipe::{CropMode, DEFAULT_RATIOS, DEFAULT_TARGET_DEPTH};
use crate::hpgrid::{HyperAxis, HyperSpace, Scalar, DEFAULT_BASE_LR, DEFAULT_EPOCHS, DEFAULT_PER_REPLICA_BATCH};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DMIS_OUT_DIR";
pub const FALLBACK_OUT_DIR: &str = "dmis-out";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One key per axis, each a list of values, in declaration order.
    pub grid: Option<toml::Table>,
    pub training: TrainingConfig,
    pub topology: TopologyConfig,
    pub cost: Option<CostParams>,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub per_replica_batch: u64,
    pub base_lr: f64,
    pub epochs: u64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            per_replica_batch: DEFAULT_PER_REPLICA_BATCH,
            base_lr: DEFAULT_BASE_LR,
            epochs: DEFAULT_EPOCHS,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: usize,
    pub gpus_per_node: usize,
    pub gpu_memory_gib: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            nodes: 1,
            gpus_per_node: DEFAULT_GPUS_PER_NODE,
            gpu_memory_gib: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub dims: [usize; 3],
    pub seed: u64,
    pub workers: usize,
    pub ratios: [f64; 3],
    pub crop: CropMode,
    pub target_depth: Option<usize>,
    pub blobs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 16,
            dims: [16, 16, 16],
            seed: 0,
            workers: 1,
            ratios: DEFAULT_RATIOS,
            crop: CropMode::Leading,
            target_depth: None,
            blobs: 2,
        }
    }
}

impl DataConfig {
    /// Depth after cropping: the configured value, else 152 when the volume
    /// is deep enough, else the largest multiple of 8.
    pub fn effective_depth(&self) -> usize {
        self.target_depth.unwrap_or_else(|| {
            let d = self.dims[2];
            if d >= DEFAULT_TARGET_DEPTH {
                DEFAULT_TARGET_DEPTH
            } else {
                d / 8 * 8
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml(&super::read_text(p)?),
        }
    }

    /// The `[grid]` section as a hyper-space.
    pub fn hyper_space(&self) -> Result<Option<HyperSpace>, CliError> {
        let Some(table) = &self.grid else {
            return Ok(None);
        };
        let axes = table
            .iter()
            .map(|(name, value)| {
                let toml::Value::Array(items) = value else {
                    return Err(CliError::Config(format!("grid axis `{name}` must be a list")));
                };
                let values = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) => Ok(Scalar::Integer(*i)),
                        toml::Value::Float(f) => Ok(Scalar::real(*f)),
                        toml::Value::String(s) => Ok(Scalar::Token(s.clone())),
                        toml::Value::Boolean(b) => Ok(Scalar::Token(b.to_string())),
                        other => Err(CliError::Config(format!(
                            "grid axis `{name}` has unsupported value {other}"
                        ))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(HyperAxis::new(name.clone(), values)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Some(HyperSpace::new(axes)?))
    }

    /// Output directory: explicit flag, then `[output] dir`, then the
    /// environment, then a fixed fallback.
    pub fn out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.output.dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_deployment_constants() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.topology.gpus_per_node, 4);
        assert_eq!(c.training.per_replica_batch, 2);
        assert_eq!(c.training.base_lr, 1e-4);
        assert_eq!(c.training.epochs, 250);
        assert_eq!(c.training.epsilon, 0.1);
        assert_eq!(c.data.ratios, [0.70, 0.15, 0.15]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[training]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::from_toml("[cost]\nt_step = 1.0\n").is_err());
    }

    #[test]
    fn grid_keeps_axis_order() {
        let c = RunConfig::from_toml("[grid]\nz = [1, 2]\na = [0.5, 1e-4]\nopt = [\"adam\"]\n").unwrap();
        let space = c.hyper_space().unwrap().unwrap();
        let names: Vec<&str> = space.axes().iter().map(|a| a.name()).collect();
        assert_eq!(names, ["z", "a", "opt"]);
        assert_eq!(space.size(), 4);
        assert!(RunConfig::from_toml("[grid]\nx = 3\n").unwrap().hyper_space().is_err());
    }

    #[test]
    fn partial_cost_section() {
        let c = RunConfig::from_toml("[cost]\ngrid_size = 8\n").unwrap();
        let cost = c.cost.unwrap();
        assert_eq!(cost.grid_size, 8);
        assert_eq!(cost.epochs, 250);
    }

    #[test]
    fn depth_defaults() {
        let mut d = DataConfig::default();
        assert_eq!(d.effective_depth(), 16);
        d.dims = [8, 8, 155];
        assert_eq!(d.effective_depth(), 152);
        d.dims = [8, 8, 20];
        assert_eq!(d.effective_depth(), 16);
        d.target_depth = Some(10);
        assert_eq!(d.effective_depth(), 10);
    }
}
