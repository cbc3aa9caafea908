//! Run the whole pipeline through the library API: data generation,
//! training, attribution, binarization, comparison, and reports, then
//! inspect the run manifest.
//!
//! ```text
//! cargo run --release --example full_pipeline
//! ```

use xaicmp::agreement::Metric;
use xaicmp::attribution::Method;
use xaicmp::formats::read_matrix_csv;
use xaicmp::pipeline::{run_pipeline, PipelineConfig};

fn main() -> xaicmp::Result<()> {
    // a scaled-down configuration (the defaults use 600 training images,
    // 50 evaluation images, and all six methods)
    let mut cfg = PipelineConfig::default();
    cfg.n_train = 60;
    cfg.n_eval = 8;
    cfg.epochs = 10;
    cfg.methods = vec![
        Method::IntegratedGradients,
        Method::GradientShap,
        Method::Lime,
        Method::AttentionRollout,
    ];
    cfg.ig_steps = 32;
    cfg.gs_samples = 32;
    cfg.out_dir = std::env::temp_dir().join("xaicmp_full_pipeline_example");

    let manifest = run_pipeline(&cfg)?;
    println!(
        "run complete: {} images x {} methods -> {} maps, {} masks, {} errors",
        manifest.records.len(),
        cfg.methods.len(),
        manifest.n_map_files(),
        manifest.n_mask_files(),
        manifest.errors.len(),
    );
    for (key, value) in &manifest.exclusions {
        println!("  {key} = {value}");
    }

    // artifacts are plain files; read one matrix back
    let iou = read_matrix_csv(&cfg.out_dir.join(cfg.matrix_rel(Metric::Iou, None)), Metric::Iou)?;
    println!("\noverall IoU:");
    for (i, a) in iou.methods.iter().enumerate() {
        for (j, b) in iou.methods.iter().enumerate() {
            if i < j {
                if let Some(v) = iou.value(i, j) {
                    println!("  {:<22} vs {:<18} {v:.4}", a.id(), b.id());
                }
            }
        }
    }
    println!("\nartifacts under {}", cfg.out_dir.display());
    println!("manifest at {}", cfg.manifest_path().display());
    Ok(())
}
