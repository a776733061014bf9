use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use foem_core::calib::SyntheticSpec;
use foem_core::engines::{EngineConfig, EngineKind, FirstOrderSign};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FOEM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "foem-out";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Synthetic calibration inputs; `d_in` comes from each layer's weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_tokens: usize,
    pub rho: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Per-layer spec; the seed is mixed with the layer name so layers differ.
    pub fn spec_for(&self, layer: &str, d_in: usize) -> SyntheticSpec {
        SyntheticSpec {
            d_in,
            n_tokens: self.n_tokens,
            rho: self.rho,
            seed: self.seed ^ fnv1a(layer),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Threshold overrides by check name.
    pub tolerances: BTreeMap<String, f64>,
    pub flip_first_order_sign: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Tensor file holding `<layer>.weight` entries.
    pub weights: Option<PathBuf>,
    /// Activation shard files holding `<layer>.input[.<k>]` entries.
    pub activations: Vec<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    pub out_dir: PathBuf,
    /// Where Hessian files are read from; defaults to `out_dir`.
    pub hessian_dir: Option<PathBuf>,
    /// Exact layer names or `prefix*` patterns; empty selects every layer.
    pub layers: Vec<String>,
    pub engine: EngineConfig,
    /// Engines for `compare`, e.g. `gptq`, `foem`, `foem:plus_alg1`.
    pub engines: Vec<String>,
    /// Layers processed concurrently; `None` uses every available core.
    pub jobs: Option<usize>,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            weights: None,
            activations: Vec::new(),
            synthetic: None,
            out_dir: default_out_dir(),
            hessian_dir: None,
            layers: Vec::new(),
            engine: EngineConfig::default(),
            engines: Vec::new(),
            jobs: None,
            verify: VerifyConfig::default(),
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn hessian_dir(&self) -> &Path {
        self.hessian_dir.as_deref().unwrap_or(&self.out_dir)
    }

    pub fn selects(&self, layer: &str) -> bool {
        self.layers.is_empty()
            || self.layers.iter().any(|f| match f.strip_suffix('*') {
                Some(prefix) => layer.starts_with(prefix),
                None => layer == f,
            })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.engine.validate().map_err(CliError::from)?;
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be >= 1".into()));
        }
        if let Some(s) = &self.synthetic {
            s.spec_for("", 1).validate().map_err(CliError::from)?;
        }
        for e in &self.engines {
            parse_engine(e, &self.engine)?;
        }
        Ok(())
    }

    /// Calibration inputs must name exactly one source.
    pub fn check_calibration_source(&self) -> Result<(), CliError> {
        match (self.activations.is_empty(), self.synthetic.is_some()) {
            (false, false) | (true, true) => Ok(()),
            (true, false) => Err(CliError::Config(
                "calibration needs activation files or a synthetic spec".into(),
            )),
            (false, true) => Err(CliError::Config(
                "give either activation files or a synthetic spec, not both".into(),
            )),
        }
        .and_then(|()| {
            if self.synthetic.is_some() && self.weights.is_none() {
                Err(CliError::Config("synthetic calibration needs a weights file for layer shapes".into()))
            } else {
                Ok(())
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses `engine[:sign]` on top of `base`, e.g. `foem:plus_alg1`.
pub fn parse_engine(spec: &str, base: &EngineConfig) -> Result<EngineConfig, CliError> {
    let (name, sign) = match spec.split_once(':') {
        Some((n, s)) => (n, Some(s)),
        None => (spec, None),
    };
    let engine: EngineKind = name.trim().parse()?;
    let mut cfg = EngineConfig {
        engine,
        ..base.clone()
    };
    if let Some(s) = sign {
        if !engine.uses_first_order() {
            return Err(CliError::Config(format!("engine `{name}` takes no first-order sign")));
        }
        cfg.first_order_sign = s.trim().parse::<FirstOrderSign>()?;
    }
    Ok(cfg)
}
