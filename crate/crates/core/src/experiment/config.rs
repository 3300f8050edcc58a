use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::critical::{CriticalSpaceConfig, DEFAULT_SAMPLE_COUNT};
use crate::error::{Error, Result};
use crate::fv::FvConfig;
use crate::network::{load_network, Network};
use crate::objective::Aggregation;
use crate::parametrize::{ParamKind, Parametrization};
use crate::pipeline::FeaturePipeline;
use crate::toynet::ToyNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub parametrization: ParamKind,
}

/// Either a network file written by [`crate::network::save_network`] or a
/// builtin generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    File { path: PathBuf },
    Builtin(ToyNet),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCounts {
    /// Targets drawn with uniform Hoyer sparseness.
    pub random: usize,
    /// Canonical targets `e_i`, cycling through the features.
    pub canonical: usize,
    /// Extra random targets used only to choose among critical spaces;
    /// ignored without a `critical_space` section.
    pub validation: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self {
            random: 32,
            canonical: 8,
            validation: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticalSpaceSettings {
    /// Fixed threshold; adds `critical_space(rho)` to the candidates.
    pub rho: Option<f64>,
    /// Adds one candidate per dimension found by the threshold scan.
    pub scan: bool,
    /// Leading Jacobians fed to the estimation.
    pub sample_count: usize,
}

impl Default for CriticalSpaceSettings {
    fn default() -> Self {
        Self {
            rho: None,
            scan: true,
            sample_count: DEFAULT_SAMPLE_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub image: ImageConfig,
    pub network: NetworkSource,
    pub aggregation: Aggregation,
    pub k: u32,
    /// Checked against the network when given.
    #[serde(default)]
    pub n_features: Option<usize>,
    #[serde(default)]
    pub samples: SampleCounts,
    /// Adam steps of each re-optimization.
    #[serde(default = "default_reopt_steps")]
    pub reopt_steps: usize,
    /// FV settings; `seed` is replaced by a per-sample seed.
    #[serde(default)]
    pub fv: FvConfig,
    #[serde(default)]
    pub critical_space: Option<CriticalSpaceSettings>,
    /// Also write every realization with its Jacobian.
    #[serde(default)]
    pub save_realizations: bool,
}

fn default_reopt_steps() -> usize {
    500
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file; a relative network path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let NetworkSource::File { path: net } = &mut cfg.network {
            if net.is_relative() {
                *net = path.parent().unwrap_or_else(|| Path::new(".")).join(&*net);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let ImageConfig { height, width, channels, .. } = self.image;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config("image dims must be positive".into()));
        }
        self.fv.validate()?;
        if let Some(cs) = &self.critical_space {
            if let Some(rho) = cs.rho {
                CriticalSpaceConfig {
                    rho,
                    sample_count: cs.sample_count,
                }
                .validate()?;
            } else if cs.sample_count == 0 {
                return Err(Error::Config("critical space needs at least one sample".into()));
            }
            if cs.rho.is_none() && !cs.scan {
                return Err(Error::Config("critical_space needs rho, scan or both".into()));
            }
        }
        if let NetworkSource::File { path } = &self.network {
            if !path.is_file() {
                return Err(Error::Config(format!("network file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<Network> {
        let shape = [self.image.height, self.image.width, self.image.channels];
        match &self.network {
            NetworkSource::File { path } => load_network(path),
            NetworkSource::Builtin(toy) => toy.build(&shape),
        }
    }

    /// Validates the config and assembles `agg ∘ N ∘ P`.
    pub fn build_pipeline(&self) -> Result<FeaturePipeline> {
        self.validate()?;
        let img = self.image;
        let param = Parametrization::new(img.parametrization, img.height, img.width, img.channels)?;
        let pipe = FeaturePipeline::new(param, self.build_network()?, self.aggregation)
            .map_err(|e| Error::Config(format!("network does not fit the image or aggregation: {e}")))?;
        if let Some(n) = self.n_features {
            if n != pipe.n_features() {
                return Err(Error::Config(format!("n_features = {n} but the network yields {}", pipe.n_features())));
            }
        }
        if pipe.n_features() < 2 {
            return Err(Error::Config("at least two features are needed".into()));
        }
        Ok(pipe)
    }
}
