//! Command-line driver: calibration, quantization, engine comparison and
//! self-verification over safetensors inputs.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{cmd_calibrate, cmd_compare, cmd_quantize, cmd_verify, QuantizeOutcome};
pub use config::{RunConfig, SyntheticConfig};
pub use error::{exit, CliError};

use args::{Cli, Command};

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.effective_config()?;
    match &cli.command {
        Command::Calibrate(_) => {
            for p in cmd_calibrate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Quantize(_) => {
            let out = cmd_quantize(&cfg)?;
            for r in &out.reports {
                println!(
                    "{:<32} {:<16} proxy_loss {:.6e}  rtn_relative {:.4}  {:.2}s",
                    r.layer, r.engine, r.proxy_loss, r.rtn_relative, r.wall_time_s
                );
            }
        }
        Command::Compare { .. } => {
            let cmp = cmd_compare(&cfg)?;
            print!("{}", cmp.csv);
            println!("{}", cmp.summary_json());
        }
        Command::Verify { .. } => {
            let v = cmd_verify(&cfg)?;
            println!("{v}");
            if !v.all_passed() {
                let failed: Vec<&str> = v.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::Verification(failed.join(", ")));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("foem: {e}");
            e.exit_code()
        }
    }
}
