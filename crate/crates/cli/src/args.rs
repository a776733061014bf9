use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use foem_core::engines::{FirstOrderSign, ScaleSource};
use foem_core::Exec;

use crate::config::{RunConfig, SyntheticConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "foem", version, about = "Column-wise weight quantization with error compensation")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory [env: FOEM_OUT_DIR, default: foem-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Layers processed concurrently.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accumulate per-layer Hessians from activation shards or synthetic data.
    Calibrate(RunArgs),
    /// Quantize every selected layer with one engine.
    Quantize(RunArgs),
    /// Run several engines on the same inputs and tabulate proxy losses.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated engines, e.g. `gptq,foem,foem:plus_alg1`.
        #[arg(long, value_delimiter = ',')]
        engines: Vec<String>,
    },
    /// Run the built-in numerical checks.
    Verify {
        /// Threshold override, `check=value`; repeatable.
        #[arg(long = "tol", value_parser = parse_tolerance)]
        tolerances: Vec<(String, f64)>,
        /// Reverse the first-order sign in the optimality check.
        #[arg(long)]
        flip_sign: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_tolerance(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected check=value")?;
    let v: f64 = value.parse().map_err(|e| format!("`{value}`: {e}"))?;
    Ok((name.to_string(), v))
}

/// Group size flag value; a newtype because clap reads `Option<Option<_>>`
/// as an optional flag value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSize(pub Option<usize>);

/// `none`/`row` for whole-row groups, otherwise a positive size.
fn parse_group_size(s: &str) -> Result<GroupSize, String> {
    match s {
        "none" | "row" => Ok(GroupSize(None)),
        _ => s.parse().map(|g| GroupSize(Some(g))).map_err(|e| format!("`{s}`: {e}")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Activation shard files; repeatable.
    #[arg(long, num_args = 1..)]
    pub activations: Vec<PathBuf>,
    /// Generate this many synthetic calibration tokens per layer.
    #[arg(long)]
    pub synthetic_tokens: Option<usize>,
    #[arg(long)]
    pub synthetic_rho: Option<f64>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    #[arg(long)]
    pub hessian_dir: Option<PathBuf>,
    /// Layer name or `prefix*`; repeatable.
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    #[arg(long)]
    pub engine: Option<String>,
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long, value_parser = parse_group_size)]
    pub group_size: Option<GroupSize>,
    #[arg(long)]
    pub symmetric: Option<bool>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub damping: Option<f64>,
    /// `minus_eq17` or `plus_alg1`.
    #[arg(long)]
    pub sign: Option<String>,
    /// `latent` or `original`.
    #[arg(long)]
    pub scale_source: Option<String>,
    /// Keep each layer's row updates on one thread.
    #[arg(long)]
    pub sequential: bool,
}

impl RunArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        if !self.activations.is_empty() {
            cfg.activations = self.activations.clone();
        }
        if self.synthetic_tokens.is_some() || self.synthetic_rho.is_some() || self.synthetic_seed.is_some() {
            let base = cfg.synthetic.unwrap_or(SyntheticConfig {
                n_tokens: 512,
                rho: 0.9,
                seed: 0,
            });
            cfg.synthetic = Some(SyntheticConfig {
                n_tokens: self.synthetic_tokens.unwrap_or(base.n_tokens),
                rho: self.synthetic_rho.unwrap_or(base.rho),
                seed: self.synthetic_seed.unwrap_or(base.seed),
            });
        }
        if let Some(d) = &self.hessian_dir {
            cfg.hessian_dir = Some(d.clone());
        }
        if !self.layers.is_empty() {
            cfg.layers = self.layers.clone();
        }
        let e = &mut cfg.engine;
        if let Some(name) = &self.engine {
            let parsed = crate::config::parse_engine(name, e)?;
            *e = parsed;
        }
        if let Some(b) = self.bits {
            e.bits = b;
        }
        if let Some(GroupSize(g)) = self.group_size {
            e.group_size = g;
        }
        if let Some(s) = self.symmetric {
            e.symmetric = s;
        }
        if let Some(b) = self.block_size {
            e.block_size = b;
        }
        if let Some(b) = self.beta {
            e.beta = b;
        }
        if let Some(d) = self.damping {
            e.damping = d;
        }
        if let Some(s) = &self.sign {
            e.first_order_sign = s.parse::<FirstOrderSign>()?;
        }
        if let Some(s) = &self.scale_source {
            e.scale_source = match s.as_str() {
                "latent" => ScaleSource::Latent,
                "original" => ScaleSource::Original,
                _ => return Err(CliError::Config(format!("unknown scale source `{s}`"))),
            };
        }
        if self.sequential {
            e.exec = Exec::Sequential;
        }
        Ok(())
    }
}

impl Cli {
    /// File values, then global flags, then command flags.
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = Some(j);
        }
        match &self.command {
            Command::Calibrate(r) | Command::Quantize(r) => r.apply(&mut cfg)?,
            Command::Compare { run, engines } => {
                run.apply(&mut cfg)?;
                if !engines.is_empty() {
                    cfg.engines = engines.clone();
                }
            }
            Command::Verify {
                tolerances,
                flip_sign,
                seed,
            } => {
                cfg.verify.tolerances.extend(tolerances.iter().cloned());
                cfg.verify.flip_first_order_sign |= *flip_sign;
                if let Some(s) = seed {
                    cfg.verify.seed = *s;
                }
            }
        }
        Ok(cfg)
    }
}

