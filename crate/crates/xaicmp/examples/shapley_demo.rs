//! KernelSHAP on small cooperative games: exact mode against the
//! enumeration oracle, sampled mode convergence, and the efficiency axiom.
//!
//! ```text
//! cargo run --release --example shapley_demo
//! ```

use xaicmp::attribution::{exact_shapley, kernel_shap_game, ShapMode};

fn main() -> xaicmp::Result<()> {
    // the classic glove game: player 0 owns a left glove, players 1 and 2
    // own right gloves; a pair is worth 1
    let mut glove = |z: &[bool]| -> xaicmp::Result<f64> {
        Ok(if z[0] && (z[1] || z[2]) { 1.0 } else { 0.0 })
    };
    let phi = exact_shapley(&mut glove, 3)?;
    println!("glove game, exact Shapley:  {phi:.4?}   (left glove is the scarce good)");

    let est = kernel_shap_game(&mut glove, 3, ShapMode::Exact)?;
    println!("glove game, kernel exact:   {est:.4?}");
    let max_diff = phi
        .iter()
        .zip(&est)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("largest difference: {max_diff:.2e}");

    // a noisier 8-player game: additive effects plus second- and
    // third-order interactions (pairwise-only games are estimated exactly
    // because coalitions are sampled in complement pairs)
    let s = 8;
    let mut game = |z: &[bool]| -> xaicmp::Result<f64> {
        let mut v = 0.0;
        for i in 0..s {
            if !z[i] {
                continue;
            }
            v += (i as f64 + 1.0) / 10.0; // additive worth
            for j in i + 1..s {
                if !z[j] {
                    continue;
                }
                v += if (i + j) % 2 == 0 { 0.05 } else { -0.03 };
                for k in j + 1..s {
                    if z[k] {
                        v += match (i + j + k) % 3 {
                            0 => 0.04,
                            1 => -0.03,
                            _ => 0.02,
                        };
                    }
                }
            }
        }
        Ok(v)
    };
    let oracle = exact_shapley(&mut game, s)?;
    println!("\n8-player game, sampled-mode L-inf error vs enumeration:");
    for n_samples in [50, 200, 1000, 4000] {
        let est = kernel_shap_game(&mut game, s, ShapMode::Sampled { n_samples, seed: 7 })?;
        let linf = oracle
            .iter()
            .zip(&est)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // efficiency holds for every estimate, not just the converged ones
        let eff: f64 = est.iter().sum();
        let full = game(&vec![true; s])? - game(&vec![false; s])?;
        println!(
            "  n={n_samples:<5} L-inf={linf:.5}  sum(phi)-[v(N)-v(empty)]={:+.1e}",
            eff - full
        );
    }
    Ok(())
}
