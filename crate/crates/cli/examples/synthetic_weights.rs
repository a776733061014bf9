//! Writes a weights file of Gaussian layers for trying the CLI.
//!
//! ```text
//! cargo run --example synthetic_weights -- --out weights.safetensors --layers 4 --rows 256 --cols 512
//! foem calibrate --weights weights.safetensors --synthetic-tokens 1024
//! foem compare --weights weights.safetensors --engines rtn,gptq,foem,foem:plus_alg1 --bits 3
//! ```

use std::path::PathBuf;

use clap::Parser;
use foem_core::tensorio::{ElementKind, TensorFile};
use foem_core::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "weights.safetensors")]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    rows: usize,
    #[arg(long, default_value_t = 256)]
    cols: usize,
    /// Standard deviation of the entries.
    #[arg(long, default_value_t = 0.02)]
    std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let dist = Normal::new(0.0, args.std)?;
    let mut file = TensorFile::new();
    for i in 0..args.layers {
        let w = DenseMatrix::from_fn(args.rows, args.cols, |_, _| dist.sample(&mut rng));
        file.insert_matrix(&format!("blk.{i}.weight"), &w, ElementKind::F32)?;
    }
    file.save(&args.out)?;
    println!("{} layers of {}x{} -> {}", args.layers, args.rows, args.cols, args.out.display());
    Ok(())
}
