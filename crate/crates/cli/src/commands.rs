use std::fs;
use std::path::{Path, PathBuf};

use foem_core::calib::{accumulate_shards, activation_layers, generate_synthetic, load_shards};
use foem_core::engines::{run_engine, EngineConfig};
use foem_core::par::{map_indices, with_threads, Exec};
use foem_core::report::{compare_table, Comparison, LayerReport};
use foem_core::tensorio::{
    hessian_file_name, load_hessian, save_hessian, save_quantized, HessianMeta, QuantMeta, QuantizedLayerFile,
    TensorFile,
};
use foem_core::verify::{run_verification, Mutation, Verification, VerifyOptions};
use foem_core::{DenseMatrix, HessianState};

use crate::config::{parse_engine, RunConfig, EFFECTIVE_CONFIG};
use crate::error::CliError;

pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_SUMMARY: &str = "compare_summary.json";
pub const REPORTS: &str = "reports.json";

const WEIGHT_SUFFIX: &str = ".weight";

/// File-name stem for a layer; path separators would escape the output directory.
fn stem(layer: &str) -> String {
    layer.replace(['/', '\\'], "_")
}

pub fn quantized_file_name(layer: &str) -> String {
    format!("{}.quant.safetensors", stem(layer))
}

pub fn report_file_name(layer: &str) -> String {
    format!("{}.report.json", stem(layer))
}

/// Layers with a `<layer>.weight` tensor, sorted.
pub fn weight_layers(f: &TensorFile) -> Vec<String> {
    f.names()
        .filter_map(|n| n.strip_suffix(WEIGHT_SUFFIX))
        .map(str::to_string)
        .collect()
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(foem_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write(&cfg.out_dir.join(EFFECTIVE_CONFIG), cfg.to_json())
}

fn select(cfg: &RunConfig, layers: Vec<String>) -> Result<Vec<String>, CliError> {
    let picked: Vec<String> = layers.into_iter().filter(|l| cfg.selects(l)).collect();
    if picked.is_empty() {
        return Err(CliError::Config(format!("no layers matched the filter {:?}", cfg.layers)));
    }
    Ok(picked)
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order and
/// reporting the first error.
fn per_layer<T: Send>(
    cfg: &RunConfig,
    items: &[String],
    f: impl Fn(&str) -> Result<T, CliError> + Sync + Send,
) -> Result<Vec<T>, CliError> {
    let jobs = cfg
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let results = with_threads(jobs, || map_indices(Exec::Parallel, items.len(), |i| f(&items[i])));
    results.into_iter().collect()
}

fn load_weights(cfg: &RunConfig) -> Result<TensorFile, CliError> {
    let path = cfg
        .weights
        .as_ref()
        .ok_or_else(|| CliError::Config("a weights file is required".into()))?;
    Ok(TensorFile::load(path)?)
}

fn weight(file: &TensorFile, layer: &str) -> Result<DenseMatrix, CliError> {
    Ok(file.load_tensor(&format!("{layer}{WEIGHT_SUFFIX}"))?)
}

/// Builds one Hessian file per selected layer.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    cfg.check_calibration_source()?;
    let config_json = serde_json::to_value(cfg).expect("config serializes");

    let weights = cfg.weights.as_ref().map(TensorFile::load).transpose()?;
    let shards = load_shards(&cfg.activations)?;
    let candidates = match (&cfg.synthetic, &weights) {
        (Some(_), Some(w)) => weight_layers(w),
        _ => {
            let mut all: Vec<String> = shards.iter().flat_map(activation_layers).collect();
            all.sort();
            all.dedup();
            all
        }
    };
    let layers = select(cfg, candidates)?;
    prepare_out_dir(cfg)?;

    per_layer(cfg, &layers, |layer| {
        let state = match (&cfg.synthetic, &weights) {
            (Some(syn), Some(w)) => {
                let d_in = weight(w, layer)?.cols();
                let x = generate_synthetic(&syn.spec_for(layer, d_in))?;
                let mut h = HessianState::new(d_in);
                h.accumulate(&x)?;
                h
            }
            _ => {
                let h = accumulate_shards(&shards, layer)?;
                if let Some(w) = &weights {
                    let name = format!("{layer}{WEIGHT_SUFFIX}");
                    if w.contains(&name) {
                        let d_in = w.load_tensor(&name)?.cols();
                        if d_in != h.dim() {
                            return Err(CliError::Config(format!(
                                "layer `{layer}`: activations have {} channels, weights expect {d_in}",
                                h.dim()
                            )));
                        }
                    }
                }
                h
            }
        };
        let path = cfg.out_dir.join(hessian_file_name(&stem(layer)));
        let meta = HessianMeta {
            layer: layer.to_string(),
            n_samples: state.n_samples(),
            damping: cfg.engine.damping,
            config: config_json.clone(),
        };
        save_hessian(&path, &state, &meta)?;
        Ok(path)
    })
}

fn layer_hessian(cfg: &RunConfig, layer: &str, d_in: usize) -> Result<HessianState, CliError> {
    let path = cfg.hessian_dir().join(hessian_file_name(&stem(layer)));
    if !path.exists() {
        return Err(CliError::Config(format!(
            "no Hessian for layer `{layer}` at {}; run `calibrate` first",
            path.display()
        )));
    }
    let (h, _) = load_hessian(&path)?;
    if h.dim() != d_in {
        return Err(CliError::Config(format!(
            "layer `{layer}`: Hessian is {0}x{0}, weights have {d_in} input channels",
            h.dim()
        )));
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub reports: Vec<LayerReport>,
    pub files: Vec<PathBuf>,
}

/// Quantizes every selected layer and writes its codes file and report.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<QuantizeOutcome, CliError> {
    cfg.validate()?;
    let weights = load_weights(cfg)?;
    let layers = select(cfg, weight_layers(&weights))?;
    prepare_out_dir(cfg)?;
    let config_json = serde_json::to_value(cfg).expect("config serializes");

    let done = per_layer(cfg, &layers, |layer| {
        let w = weight(&weights, layer)?;
        let h = layer_hessian(cfg, layer, w.cols())?;
        let out = run_engine(layer, &w, &h, &cfg.engine)?;
        let meta = quant_meta(layer, &cfg.engine, config_json.clone());
        let path = cfg.out_dir.join(quantized_file_name(layer));
        save_quantized(
            &QuantizedLayerFile {
                layer: out.quantized,
                meta,
            },
            &path,
        )?;
        let report_path = cfg.out_dir.join(report_file_name(layer));
        write(&report_path, serde_json::to_string_pretty(&out.report).expect("report serializes"))?;
        Ok((out.report, path))
    })?;
    let (reports, files): (Vec<_>, Vec<_>) = done.into_iter().unzip();
    write(
        &cfg.out_dir.join(REPORTS),
        serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    Ok(QuantizeOutcome { reports, files })
}

fn quant_meta(layer: &str, e: &EngineConfig, config: serde_json::Value) -> QuantMeta {
    QuantMeta {
        layer: layer.to_string(),
        bits: e.bits,
        group_size: e.group_size,
        symmetric: e.symmetric,
        engine: e.label(),
        beta: if e.engine.uses_first_order() { e.beta } else { 0.0 },
        damping: e.damping,
        block_size: e.block_size,
        config,
    }
}

/// Runs every listed engine on the same weights and Hessians and writes the
/// comparison table and summary.
pub fn cmd_compare(cfg: &RunConfig) -> Result<Comparison, CliError> {
    cfg.validate()?;
    if cfg.engines.len() < 2 {
        return Err(CliError::Config(format!(
            "compare needs at least two engines, got {:?}",
            cfg.engines
        )));
    }
    let engines: Vec<EngineConfig> = cfg
        .engines
        .iter()
        .map(|e| parse_engine(e, &cfg.engine))
        .collect::<Result<_, _>>()?;
    let weights = load_weights(cfg)?;
    let layers = select(cfg, weight_layers(&weights))?;
    prepare_out_dir(cfg)?;

    let per = per_layer(cfg, &layers, |layer| {
        let w = weight(&weights, layer)?;
        let h = layer_hessian(cfg, layer, w.cols())?;
        engines
            .iter()
            .map(|e| Ok(run_engine(layer, &w, &h, e)?.report))
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let reports: Vec<LayerReport> = per.into_iter().flatten().collect();
    let cmp = compare_table(&reports);
    write(&cfg.out_dir.join(COMPARE_CSV), &cmp.csv)?;
    write(&cfg.out_dir.join(COMPARE_SUMMARY), cmp.summary_json())?;
    Ok(cmp)
}

/// Runs the numerical self-checks. A failed check is returned as data; the
/// caller decides the exit status.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Verification, CliError> {
    let v = &cfg.verify;
    let opts = VerifyOptions {
        overrides: v.tolerances.clone(),
        mutation: v.flip_first_order_sign.then_some(Mutation::FlipFirstOrderSign),
        seed: v.seed,
    };
    Ok(run_verification(&opts)?)
}
