//! Train the toy Vision Transformer on the synthetic shapes dataset and
//! round-trip the checkpoint through the XVIT1 file format.
//!
//! ```text
//! cargo run --release --example train_model
//! ```

use xaicmp::vit::{accuracy, gen_shapes_dataset, read_checkpoint, train, write_checkpoint, ViTConfig, ViTParams};

fn main() -> xaicmp::Result<()> {
    // A scaled-down run so the example finishes in a few seconds; the
    // pipeline default (600 images, 30 epochs) reaches ~0.93.
    let config = ViTConfig::default(); // 32x32, patch 8, 2 layers, 2 heads
    let dataset = gen_shapes_dataset(120, config.seed, &config)?;
    println!(
        "dataset: {} images, {} classes (square / circle / triangle / cross)",
        dataset.len(),
        config.n_classes
    );

    let initial = ViTParams::init(config)?;
    println!("initial accuracy: {:.3} (chance is 0.25)", accuracy(&initial, &dataset)?);

    let trained = train(&initial, &dataset, 25, 0.01, 16, 1)?;
    let final_acc = accuracy(&trained, &dataset)?;
    println!("after 25 epochs:  {final_acc:.3}");

    // checkpoints are bit-exact: save, reload, and compare predictions
    let dir = std::env::temp_dir().join("xaicmp_train_model_example");
    std::fs::create_dir_all(&dir).map_err(|e| xaicmp::Error::Io(dir.display().to_string(), e))?;
    let path = dir.join("model.xvit");
    write_checkpoint(&path, &trained)?;
    let reloaded = read_checkpoint(&path)?;
    assert_eq!(accuracy(&reloaded, &dataset)?, final_acc);
    println!("checkpoint round-trip OK: {}", path.display());
    Ok(())
}
