//! Turn a real-valued attribution map into a binary mask: negative
//! clamping, Otsu vs percentile thresholds, and morphological closing.
//!
//! ```text
//! cargo run --release --example binarize_maps
//! ```

use xaicmp::attribution::{AttributionMap, Granularity, Method};
use xaicmp::maskpipe::{binarize_with_info, BinarizeConfig, BinaryMask, ThresholdMode};
use xaicmp::tensor::Tensor;

fn render(mask: &BinaryMask) -> String {
    let (h, w) = mask.dims();
    let mut out = String::new();
    for r in 0..h {
        for c in 0..w {
            out.push(if mask.at(r, c) { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}

fn main() -> xaicmp::Result<()> {
    // a synthetic 12x12 map: a bright blob, a faint blob, scattered noise,
    // and some negative evidence (which binarization clamps to zero)
    let n = 12usize;
    let mut values = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let d1 = ((r as f64 - 3.0).powi(2) + (c as f64 - 3.0).powi(2)).sqrt();
            let d2 = ((r as f64 - 8.0).powi(2) + (c as f64 - 8.5).powi(2)).sqrt();
            // a faint positive background ramp plus two blobs
            let mut v = 0.02 + 0.10 * (r * n + c) as f64 / (n * n) as f64
                + (1.0 - d1 / 3.0).max(0.0)
                + 0.45 * (1.0 - d2 / 2.5).max(0.0);
            if (r * 7 + c * 13) % 9 == 0 {
                v += 0.18; // salt noise: isolated pixels the closing bridges
            }
            if r == 6 && c < 3 {
                v = -0.6; // negative attribution, clamped before thresholding
            }
            values[r * n + c] = v;
        }
    }
    let map = AttributionMap::new(
        Method::IntegratedGradients,
        Some(0),
        Granularity::Pixel,
        Tensor::new(vec![n, n], values)?,
    )?;

    let otsu = BinarizeConfig { closing_kernel: 1, ..BinarizeConfig::default() };
    let (mask, info) = binarize_with_info(&map, &otsu)?;
    println!(
        "otsu threshold {:.4} (degenerate={}), no closing:",
        info.threshold, info.degenerate
    );
    print!("{}", render(&mask));

    let closed_cfg = BinarizeConfig::default(); // 3x3 closing on pixel maps
    let (closed, _) = binarize_with_info(&map, &closed_cfg)?;
    println!("\nsame threshold, 3x3 morphological closing (gaps bridged):");
    print!("{}", render(&closed));

    let pct = BinarizeConfig {
        threshold_mode: ThresholdMode::Percentile(0.2),
        ..BinarizeConfig::default()
    };
    let (top20, info) = binarize_with_info(&map, &pct)?;
    println!("\npercentile p=0.2 keeps the top 20% (threshold {:.4}):", info.threshold);
    print!("{}", render(&top20));

    println!(
        "\nforeground fractions: otsu={:.3} closed={:.3} top20={:.3}",
        mask.count_true() as f64 / (n * n) as f64,
        closed.count_true() as f64 / (n * n) as f64,
        top20.count_true() as f64 / (n * n) as f64,
    );
    Ok(())
}
