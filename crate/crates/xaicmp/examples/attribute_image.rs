//! Compute all six attribution methods on one image and check the
//! integrated-gradients completeness axiom along the way.
//!
//! ```text
//! cargo run --release --example attribute_image
//! ```

use xaicmp::attribution::{
    attention_rollout, beyond_attention, gradient_shap, integrated_gradients, kernel_shap,
    lime_attribution, segment_grid, AttributionMap, ShapMode,
};
use xaicmp::tensor::Tensor;
use xaicmp::vit::{
    attention_gradients, forward, gen_shapes_dataset, logit_and_input_gradient, predict_one,
    train, ViTConfig, ViTParams,
};

fn summarize(map: &AttributionMap) {
    let data = map.values.data();
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    println!(
        "  {:<20} granularity={:<8} min={lo:+.4} max={hi:+.4} sum={sum:+.4}",
        map.method.id(),
        format!("{:?}", map.granularity).to_lowercase(),
    );
}

fn main() -> xaicmp::Result<()> {
    let config = ViTConfig::default();
    let dataset = gen_shapes_dataset(120, config.seed, &config)?;
    let params = train(&ViTParams::init(config.clone())?, &dataset, 10, 0.01, 16, 1)?;

    let image = dataset.images[0].clone();
    let label = dataset.labels[0];
    let trace = forward(&params, &image)?;
    let target = trace.predicted_class();
    println!("image 0: true class {label}, predicted {target} (p={:.3})", {
        let p = predict_one(&params, &image)?;
        p[target]
    });

    // gradient-based methods, pixel granularity
    let baseline = Tensor::zeros(vec![config.image_size, config.image_size]);
    let ig = integrated_gradients(&params, &image, target, &baseline, 64)?;
    let gs = gradient_shap(&params, &image, target, 64, 0.1, 7)?;

    // perturbation-based methods on a 4x4 segment grid
    let segments = segment_grid(config.image_size, 4)?;
    let mut predict = |x: &Tensor| predict_one(&params, x);
    let lime = lime_attribution(&mut predict, &image, target, &segments, 200, 0.01, 0.5, 7)?;
    let mut predict = |x: &Tensor| predict_one(&params, x);
    let ks = kernel_shap(
        &mut predict,
        &image,
        target,
        &segments,
        ShapMode::Sampled { n_samples: 2000, seed: 7 },
    )?;

    // attention-based methods from the forward trace
    let rollout = attention_rollout(&trace, config.image_size)?;
    let (trace, grads) = attention_gradients(&params, &image, target)?;
    let beyond = beyond_attention(&trace, &grads, target, config.image_size)?;

    println!("attribution maps ({}x{} pixels each):", config.image_size, config.image_size);
    for map in [&ig, &gs, &lime, &ks, &rollout, &beyond] {
        summarize(map);
    }

    // IG completeness: the attributions sum to f(x) - f(baseline)
    let (fx, _) = logit_and_input_gradient(&params, &image, target)?;
    let (fb, _) = logit_and_input_gradient(&params, &baseline, target)?;
    let attr_sum: f64 = ig.values.data().iter().sum();
    println!(
        "IG completeness: sum(attr)={attr_sum:+.6} vs f(x)-f(b)={:+.6} (steps=64)",
        fx - fb
    );
    Ok(())
}
