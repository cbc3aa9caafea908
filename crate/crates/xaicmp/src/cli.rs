//! Command-line interface: the documented subcommands over the pipeline
//! stages.
//!
//! Exit codes: 0 on success, 1 on validation/usage errors, 2 on I/O
//! failures. An optional `XAICMP_WORKERS` environment variable selects the
//! attribution worker count (absent → serial).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::Result;
use crate::pipeline::{
    run_pipeline, stage_attribute, stage_binarize, stage_compare, stage_gen_data, stage_report,
    stage_train, PipelineConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "xaicmp",
    version,
    about = "Agreement analysis for post-hoc explanation methods on a toy Vision Transformer"
)]
pub struct Cli {
    /// Flat key=value configuration file; defaults fill missing keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Output directory for all artifacts (default "out").
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic training and evaluation datasets.
    GenData,
    /// Train the toy Vision Transformer on the generated training set.
    Train,
    /// Compute attribution maps for every evaluation image.
    Attribute,
    /// Binarize attribution maps into comparable binary masks.
    Binarize,
    /// Compute pairwise IoU / Coverage Ratio matrices, overall and per class.
    Compare,
    /// Render SVG heatmaps and per-image mask overlays.
    Report,
    /// Run every stage end to end and write the run manifest.
    Run,
}

/// Configuration from file/defaults with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::parse_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::GenData => {
            stage_gen_data(&cfg)?;
            println!(
                "wrote {} training and {} evaluation images under {}",
                cfg.n_train,
                cfg.n_eval,
                cfg.out_dir.join("data").display()
            );
        }
        Command::Train => {
            let acc = stage_train(&cfg)?;
            println!(
                "trained {} epochs, train_accuracy={acc:.4}, checkpoint {}",
                cfg.epochs,
                cfg.model_path().display()
            );
        }
        Command::Attribute => {
            let summary = stage_attribute(&cfg)?;
            println!(
                "wrote {} attribution maps ({} failures) under {}",
                summary.n_maps_written,
                summary.failures.len(),
                cfg.out_dir.join("maps").display()
            );
        }
        Command::Binarize => {
            let summary = stage_binarize(&cfg)?;
            println!(
                "wrote {} masks ({} failures) under {}",
                summary.n_masks_written,
                summary.failures.len(),
                cfg.out_dir.join("masks").display()
            );
        }
        Command::Compare => {
            let summary = stage_compare(&cfg)?;
            let compared = summary
                .exclusions
                .iter()
                .find(|(k, _)| k == "images_compared")
                .map_or(0, |(_, v)| *v);
            println!(
                "aggregated agreement over {compared} images into {}",
                cfg.out_dir.join("matrices").display()
            );
        }
        Command::Report => {
            stage_report(&cfg)?;
            println!(
                "rendered heatmaps and overlays under {}",
                cfg.out_dir.join("reports").display()
            );
        }
        Command::Run => {
            let manifest = run_pipeline(&cfg)?;
            println!(
                "pipeline complete: {} maps, {} masks, {} recorded errors; manifest {}",
                manifest.n_map_files(),
                manifest.n_mask_files(),
                manifest.errors.len(),
                cfg.manifest_path().display()
            );
        }
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code (0 success,
/// 1 validation, 2 I/O).
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_with_args(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn parses_subcommands_and_global_flags() {
        let cli = Cli::try_parse_from(["xaicmp", "run", "--seed", "7", "--out", "o"]).unwrap();
        assert_eq!(cli.command, Command::Run);
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.out.as_deref(), Some(std::path::Path::new("o")));

        let cli = Cli::try_parse_from(["xaicmp", "--config", "f.cfg", "gen-data"]).unwrap();
        assert_eq!(cli.command, Command::GenData);
        assert_eq!(cli.config.as_deref(), Some(std::path::Path::new("f.cfg")));

        assert!(Cli::try_parse_from(["xaicmp"]).is_err());
        assert!(Cli::try_parse_from(["xaicmp", "frobnicate"]).is_err());
    }

    #[test]
    fn resolve_overrides_config_file_values() {
        let dir = tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        std::fs::write(&cfg_path, "seed = 3\nn_eval = 7\n").unwrap();
        let cli = Cli::try_parse_from([
            "xaicmp",
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            "elsewhere",
        ])
        .unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 11, "--seed beats the file");
        assert_eq!(cfg.n_eval, 7, "file beats defaults");
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn exit_codes_for_usage_help_and_validation() {
        assert_eq!(run_with_args(["xaicmp", "--help"]), 0);
        assert_eq!(run_with_args(["xaicmp", "--version"]), 0);
        assert_eq!(run_with_args(["xaicmp", "nonsense"]), 1);
        // validation error from the library: unreadable config path is I/O
        let code = run_with_args(["xaicmp", "run", "--config", "/nonexistent/x.cfg"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn gen_data_subcommand_writes_datasets() {
        let dir = tempdir().unwrap();
        let cfg_path = dir.path().join("tiny.cfg");
        std::fs::write(
            &cfg_path,
            "n_train = 4\nn_eval = 2\nimage_size = 16\nembed_dim = 8\nn_layers = 1\n",
        )
        .unwrap();
        let code = run_with_args([
            "xaicmp",
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(dir.path().join("out/data/train/labels.csv").exists());
        assert!(dir.path().join("out/data/eval/img0001.xatt").exists());
    }
}
