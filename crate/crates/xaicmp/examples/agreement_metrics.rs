//! Pairwise agreement between binary masks: IoU and Coverage Ratio, the
//! K x K matrices, aggregation across images, and the CSV/SVG renderers.
//!
//! ```text
//! cargo run --release --example agreement_metrics
//! ```

use xaicmp::agreement::{aggregate, cr, iou, pairwise_matrices};
use xaicmp::attribution::Method;
use xaicmp::formats::matrix_csv_string;
use xaicmp::maskpipe::BinaryMask;
use xaicmp::report::heatmap_svg;

fn mask_from(rows: &[&str], method: Method) -> BinaryMask {
    let h = rows.len();
    let w = rows[0].len();
    let data = rows
        .iter()
        .flat_map(|r| r.chars())
        .map(|c| c == '#')
        .collect();
    BinaryMask::new(h, w, data, method).expect("consistent rows")
}

fn main() -> xaicmp::Result<()> {
    // three methods "explain" the same image with overlapping masks
    let ig = mask_from(&["####....", "####....", "........", "........"], Method::IntegratedGradients);
    let gs = mask_from(&["###.....", "###.....", "........", "........"], Method::GradientShap);
    let ar = mask_from(&["......##", "......##", "......##", "........"], Method::AttentionRollout);

    println!("IoU(ig, gs) = {:.4}   (near-duplicates)", iou(&ig, &gs)?);
    println!("IoU(ig, ar) = {:.4}   (disjoint regions)", iou(&ig, &ar)?);
    // CR is asymmetric: how much of the first (covered) mask the second covers
    println!("CR(ig -> gs) = {:.4}   (gs covers 6 of ig's 8 pixels)", cr(&ig, &gs)?);
    println!("CR(gs -> ig) = {:.4}   (ig covers all of gs)", cr(&gs, &ig)?);

    // per-image K x K matrices for both metrics
    let (iou_m, cr_m) = pairwise_matrices(&[ig.clone(), gs.clone(), ar.clone()])?;
    println!("\nIoU matrix as CSV:\n{}", matrix_csv_string(&iou_m));
    println!("CR matrix as CSV (rows = covered mask):\n{}", matrix_csv_string(&cr_m));

    // aggregate across images: a second image where attention agrees more
    let ig2 = mask_from(&["##......", "##......", "........", "........"], Method::IntegratedGradients);
    let gs2 = mask_from(&["##......", "##......", "#.......", "........"], Method::GradientShap);
    let ar2 = mask_from(&["##......", "........", "........", "........"], Method::AttentionRollout);
    let (iou_m2, _) = pairwise_matrices(&[ig2, gs2, ar2])?;
    let overall = aggregate(&[iou_m, iou_m2])?;
    println!("aggregated over 2 images:\n{}", matrix_csv_string(&overall));

    // the SVG heatmap the report stage writes
    let dir = std::env::temp_dir().join("xaicmp_agreement_example");
    std::fs::create_dir_all(&dir).map_err(|e| xaicmp::Error::Io(dir.display().to_string(), e))?;
    let path = dir.join("iou_overall.svg");
    std::fs::write(&path, heatmap_svg(&overall)).map_err(|e| xaicmp::Error::Io(path.display().to_string(), e))?;
    println!("heatmap written to {}", path.display());
    Ok(())
}
