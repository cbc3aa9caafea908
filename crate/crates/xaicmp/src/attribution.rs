//! The six post-hoc explanation methods, each producing an
//! [`AttributionMap`] for one image and target class.
//!
//! Gradient-based methods (Integrated Gradients, GradientSHAP) see the
//! model through the [`GradScorer`] trait; perturbation methods (LIME,
//! KernelSHAP) see it only through a black-box `predict` closure;
//! attention methods (rollout, Beyond Attention) consume a recorded
//! [`ForwardTrace`]. Sampled methods are bit-deterministic given their
//! seed.

use crate::error::{Error, Result};
use crate::maskpipe::upsample_nearest;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{ForwardTrace, ViTParams};

/// Gray value substituted into segments that a perturbation drops.
pub const MASK_FILL: f64 = 0.5;

// Seed-stream tags, one per stochastic method.
const TAG_GRADIENT_SHAP: u64 = 0x6753_4841;
const TAG_LIME: u64 = 0x4c49_4d45;
const TAG_KERNEL_SHAP: u64 = 0x6b53_4841;

/// The six explanation methods, in canonical report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    IntegratedGradients,
    GradientShap,
    Lime,
    KernelShap,
    AttentionRollout,
    BeyondAttention,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::IntegratedGradients,
        Method::GradientShap,
        Method::Lime,
        Method::KernelShap,
        Method::AttentionRollout,
        Method::BeyondAttention,
    ];

    /// Stable identifier used in file names, CSV headers and reports.
    pub fn id(self) -> &'static str {
        match self {
            Method::IntegratedGradients => "integrated_gradients",
            Method::GradientShap => "gradient_shap",
            Method::Lime => "lime",
            Method::KernelShap => "kernel_shap",
            Method::AttentionRollout => "attention_rollout",
            Method::BeyondAttention => "beyond_attention",
        }
    }

    pub fn from_id(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method id {s:?}")))
    }

    /// Native granularity of the map each method produces (all maps are
    /// stored at pixel resolution; this records provenance).
    pub fn granularity(self) -> Granularity {
        match self {
            Method::IntegratedGradients | Method::GradientShap => Granularity::Pixel,
            Method::Lime | Method::KernelShap => Granularity::Segment,
            Method::AttentionRollout | Method::BeyondAttention => Granularity::Patch,
        }
    }

    /// Tag for deriving per-method RNG streams.
    pub fn seed_tag(self) -> u64 {
        match self {
            Method::IntegratedGradients => 0x4947,
            Method::GradientShap => TAG_GRADIENT_SHAP,
            Method::Lime => TAG_LIME,
            Method::KernelShap => TAG_KERNEL_SHAP,
            Method::AttentionRollout => 0x524f_4c4c,
            Method::BeyondAttention => 0x4245_594f,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Resolution at which a method natively works; maps are always stored at
/// pixel resolution, this records provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Pixel,
    Patch,
    Segment,
}

/// Per-pixel attribution scores for one image under one method.
/// `target_class` is `None` for class-agnostic methods (attention
/// rollout).
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub method: Method,
    pub target_class: Option<usize>,
    pub granularity: Granularity,
    pub image_id: usize,
    pub values: Tensor,
}

impl AttributionMap {
    pub fn new(
        method: Method,
        target_class: Option<usize>,
        granularity: Granularity,
        values: Tensor,
    ) -> Result<Self> {
        values.dims2()?;
        if !values.is_finite() {
            return Err(Error::Validation(format!(
                "{method} produced non-finite attribution values"
            )));
        }
        Ok(AttributionMap {
            method,
            target_class,
            granularity,
            image_id: 0,
            values,
        })
    }
}

/// A differentiable scorer: value of the class score at `input` plus its
/// gradient with respect to `input`. The toy ViT scores with the
/// target-class logit.
pub trait GradScorer {
    fn score_and_grad(&self, input: &Tensor, class: usize) -> Result<(f64, Tensor)>;
}

impl GradScorer for ViTParams {
    fn score_and_grad(&self, input: &Tensor, class: usize) -> Result<(f64, Tensor)> {
        crate::vit::logit_and_input_gradient(self, input, class)
    }
}

/// Black-box prediction closure: image in, one probability (or score) per
/// class out.
pub type PredictFn<'a> = &'a mut dyn FnMut(&Tensor) -> Result<Vec<f64>>;

// ---------------------------------------------------------------------------
// Integrated Gradients
// ---------------------------------------------------------------------------

/// Midpoint-rule Integrated Gradients along the straight path from
/// `baseline` to `image`:
/// `attr_i = (x_i - b_i) * (1/m) * sum_k grad_i at b + ((k-0.5)/m)(x-b)`.
pub fn integrated_gradients(
    model: &dyn GradScorer,
    image: &Tensor,
    target_class: usize,
    baseline: &Tensor,
    steps: usize,
) -> Result<AttributionMap> {
    if steps < 1 {
        return Err(Error::Validation("integrated_gradients needs steps >= 1".into()));
    }
    if baseline.shape() != image.shape() {
        return Err(Error::Shape(format!(
            "baseline shape {:?} does not match image shape {:?}",
            baseline.shape(),
            image.shape()
        )));
    }
    let n = image.numel();
    let mut grad_sum = vec![0.0; n];
    for k in 1..=steps {
        let alpha = (k as f64 - 0.5) / steps as f64;
        let point_data: Vec<f64> = image
            .data()
            .iter()
            .zip(baseline.data())
            .map(|(&x, &b)| b + alpha * (x - b))
            .collect();
        let point = Tensor::new(image.shape().to_vec(), point_data)?;
        let (_, grad) = model.score_and_grad(&point, target_class)?;
        for (s, g) in grad_sum.iter_mut().zip(grad.data()) {
            *s += g;
        }
    }
    let inv_m = 1.0 / steps as f64;
    let values: Vec<f64> = image
        .data()
        .iter()
        .zip(baseline.data())
        .zip(&grad_sum)
        .map(|((&x, &b), &s)| (x - b) * s * inv_m)
        .collect();
    AttributionMap::new(
        Method::IntegratedGradients,
        Some(target_class),
        Granularity::Pixel,
        Tensor::new(image.shape().to_vec(), values)?,
    )
}

// ---------------------------------------------------------------------------
// GradientSHAP
// ---------------------------------------------------------------------------

/// Monte-Carlo expected gradients against the zero baseline:
/// each sample evaluates the gradient at `alpha*x + noise` with
/// `alpha ~ U(0,1)` and elementwise `noise ~ N(0, sigma^2)`, then scales
/// the averaged gradient by `x`.
pub fn gradient_shap(
    model: &dyn GradScorer,
    image: &Tensor,
    target_class: usize,
    n_samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<AttributionMap> {
    if n_samples < 1 {
        return Err(Error::Validation("gradient_shap needs n_samples >= 1".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Validation(format!(
            "noise_sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let mut rng = Rng::derive(seed, &[TAG_GRADIENT_SHAP]);
    let n = image.numel();
    let mut grad_sum = vec![0.0; n];
    for _ in 0..n_samples {
        let alpha = rng.next_f64();
        let mut point = Vec::with_capacity(n);
        for &x in image.data() {
            point.push(alpha * x);
        }
        if noise_sigma > 0.0 {
            for v in point.iter_mut() {
                *v += noise_sigma * rng.normal();
            }
        }
        let point = Tensor::new(image.shape().to_vec(), point)?;
        let (_, grad) = model.score_and_grad(&point, target_class)?;
        for (s, g) in grad_sum.iter_mut().zip(grad.data()) {
            *s += g;
        }
    }
    let inv = 1.0 / n_samples as f64;
    let values: Vec<f64> = image
        .data()
        .iter()
        .zip(&grad_sum)
        .map(|(&x, &s)| x * s * inv)
        .collect();
    AttributionMap::new(
        Method::GradientShap,
        Some(target_class),
        Granularity::Pixel,
        Tensor::new(image.shape().to_vec(), values)?,
    )
}

// ---------------------------------------------------------------------------
// Segments
// ---------------------------------------------------------------------------

/// Assignment of every pixel to one of `S` interpretable segments; ids are
/// contiguous in `[0, S)` and every segment is non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentGrid {
    image_size: usize,
    n_segments: usize,
    ids: Vec<usize>,
}

/// Regular `grid_side x grid_side` partition into equal squares with
/// row-major segment ids.
pub fn segment_grid(image_size: usize, grid_side: usize) -> Result<SegmentGrid> {
    if grid_side == 0 || image_size == 0 || image_size % grid_side != 0 {
        return Err(Error::Validation(format!(
            "grid_side {grid_side} must divide image_size {image_size}"
        )));
    }
    let cell = image_size / grid_side;
    let mut ids = Vec::with_capacity(image_size * image_size);
    for r in 0..image_size {
        for c in 0..image_size {
            ids.push((r / cell) * grid_side + (c / cell));
        }
    }
    Ok(SegmentGrid {
        image_size,
        n_segments: grid_side * grid_side,
        ids,
    })
}

impl SegmentGrid {
    /// Arbitrary segmentation from a per-pixel id grid. Ids must cover the
    /// contiguous range `[0, max_id]` with every segment non-empty.
    pub fn from_ids(image_size: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != image_size * image_size {
            return Err(Error::Shape(format!(
                "id grid has {} entries, expected {}",
                ids.len(),
                image_size * image_size
            )));
        }
        let n_segments = ids.iter().max().map_or(0, |m| m + 1);
        if n_segments == 0 {
            return Err(Error::Validation("empty segment set".into()));
        }
        let mut seen = vec![false; n_segments];
        for &id in &ids {
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Validation(format!(
                "segment ids not contiguous: id {missing} is empty"
            )));
        }
        Ok(SegmentGrid { image_size, n_segments, ids })
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn id_at(&self, r: usize, c: usize) -> usize {
        self.ids[r * self.image_size + c]
    }

    /// Replace every pixel of a dropped segment by [`MASK_FILL`].
    pub fn masked_image(&self, image: &Tensor, keep: &[bool]) -> Result<Tensor> {
        if image.shape() != [self.image_size, self.image_size] {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match segment grid size {}",
                image.shape(),
                self.image_size
            )));
        }
        if keep.len() != self.n_segments {
            return Err(Error::Shape(format!(
                "coalition has {} flags, expected {}",
                keep.len(),
                self.n_segments
            )));
        }
        let data = image
            .data()
            .iter()
            .zip(&self.ids)
            .map(|(&v, &id)| if keep[id] { v } else { MASK_FILL })
            .collect();
        Tensor::new(image.shape().to_vec(), data)
    }

    /// Broadcast one value per segment back to pixel resolution.
    pub fn broadcast(&self, per_segment: &[f64]) -> Result<Tensor> {
        if per_segment.len() != self.n_segments {
            return Err(Error::Shape(format!(
                "{} segment values for {} segments",
                per_segment.len(),
                self.n_segments
            )));
        }
        let data = self.ids.iter().map(|&id| per_segment[id]).collect();
        Tensor::new(vec![self.image_size, self.image_size], data)
    }
}

// ---------------------------------------------------------------------------
// Shared dense solver
// ---------------------------------------------------------------------------

/// Solve `A x = b` for square row-major `A` by Gaussian elimination with
/// partial pivoting. Errors on (numerically) singular systems.
pub(crate) fn linsolve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                m[i * n + col]
                    .abs()
                    .partial_cmp(&m[j * n + col].abs())
                    .expect("finite matrix")
            })
            .expect("non-empty range");
        if m[pivot_row * n + col].abs() < 1e-12 {
            return Err(Error::Validation(
                "regression system is singular (rank-deficient design)".into(),
            ));
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap(col * n + k, pivot_row * n + k);
            }
            rhs.swap(col, pivot_row);
        }
        let pivot = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    Ok(x)
}

/// Weighted ridge regression `(Z' W Z + lambda D)^-1 Z' W y` where `Z`
/// already contains any intercept column and `D` is the identity with the
/// first `penalize_from` diagonal entries zeroed (so an intercept can stay
/// unpenalized). Returns the coefficient vector.
pub(crate) fn weighted_ridge(
    z: &[f64],
    weights: &[f64],
    y: &[f64],
    rows: usize,
    cols: usize,
    lambda: f64,
    penalize_from: usize,
) -> Result<Vec<f64>> {
    debug_assert_eq!(z.len(), rows * cols);
    debug_assert_eq!(weights.len(), rows);
    debug_assert_eq!(y.len(), rows);
    let mut a = vec![0.0; cols * cols];
    let mut b = vec![0.0; cols];
    for r in 0..rows {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        let zr = &z[r * cols..(r + 1) * cols];
        for i in 0..cols {
            let wzi = w * zr[i];
            b[i] += wzi * y[r];
            for j in i..cols {
                a[i * cols + j] += wzi * zr[j];
            }
        }
    }
    // mirror the upper triangle and add the ridge
    for i in 0..cols {
        for j in 0..i {
            a[i * cols + j] = a[j * cols + i];
        }
        if i >= penalize_from {
            a[i * cols + i] += lambda;
        }
    }
    linsolve(&a, &b, cols)
}

// ---------------------------------------------------------------------------
// LIME
// ---------------------------------------------------------------------------

/// LIME over segment coalitions: fair-coin coalitions (plus the all-ones
/// coalition once), mid-gray masking, exponential kernel weights
/// `exp(-(1 - |z|/S)^2 / kernel_width^2)`, weighted ridge regression with
/// intercept. The per-segment coefficients are broadcast to pixels.
#[allow(clippy::too_many_arguments)]
pub fn lime_attribution(
    predict: PredictFn,
    image: &Tensor,
    target_class: usize,
    segments: &SegmentGrid,
    n_samples: usize,
    ridge_lambda: f64,
    kernel_width: f64,
    seed: u64,
) -> Result<AttributionMap> {
    let s = segments.n_segments();
    if n_samples < s + 2 {
        return Err(Error::Validation(format!(
            "lime needs n_samples >= S+2 = {}, got {n_samples}",
            s + 2
        )));
    }
    if !(kernel_width > 0.0) {
        return Err(Error::Validation("kernel_width must be positive".into()));
    }
    if !(ridge_lambda >= 0.0) {
        return Err(Error::Validation("ridge_lambda must be non-negative".into()));
    }
    let mut rng = Rng::derive(seed, &[TAG_LIME]);
    let cols = s + 1; // intercept + one column per segment
    let mut z = Vec::with_capacity(n_samples * cols);
    let mut w = Vec::with_capacity(n_samples);
    let mut y = Vec::with_capacity(n_samples);
    let mut coalition = vec![true; s];
    for sample in 0..n_samples {
        if sample > 0 {
            for flag in coalition.iter_mut() {
                *flag = rng.bool();
            }
        }
        let masked = segments.masked_image(image, &coalition)?;
        let row = predict(&masked)?;
        let out = *row.get(target_class).ok_or_else(|| {
            Error::Validation(format!(
                "target_class {target_class} out of range for {} outputs",
                row.len()
            ))
        })?;
        if !out.is_finite() {
            return Err(Error::Validation("predict_fn returned non-finite output".into()));
        }
        let on = coalition.iter().filter(|&&b| b).count();
        let d = 1.0 - on as f64 / s as f64;
        z.push(1.0);
        z.extend(coalition.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        w.push((-d * d / (kernel_width * kernel_width)).exp());
        y.push(out);
    }
    // ridge penalty on the segment coefficients only, never the intercept
    let beta = weighted_ridge(&z, &w, &y, n_samples, cols, ridge_lambda, 1)?;
    AttributionMap::new(
        Method::Lime,
        Some(target_class),
        Granularity::Segment,
        segments.broadcast(&beta[1..])?,
    )
}

// ---------------------------------------------------------------------------
// KernelSHAP
// ---------------------------------------------------------------------------

/// Coalition evaluation strategy for [`kernel_shap_game`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapMode {
    /// Enumerate all `2^S` coalitions. Requires `S <= 12`.
    Exact,
    /// Draw `n_samples` coalitions with sizes proportional to the Shapley
    /// kernel.
    Sampled { n_samples: usize, seed: u64 },
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..k.min(n - k) {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Shapley kernel weight for a coalition of size `k` out of `s` players
/// (`0 < k < s`).
fn shapley_kernel(s: usize, k: usize) -> f64 {
    (s as f64 - 1.0) / (binomial(s, k) * (k * (s - k)) as f64)
}

/// Shapley values of an `s`-player game by the KernelSHAP weighted
/// least-squares estimator, with the efficiency constraint
/// `sum(phi) = v(full) - v(empty)` eliminated exactly.
pub fn kernel_shap_game(
    value: &mut dyn FnMut(&[bool]) -> Result<f64>,
    s: usize,
    mode: ShapMode,
) -> Result<Vec<f64>> {
    if s < 2 {
        return Err(Error::Validation("kernel_shap needs at least 2 players".into()));
    }
    let empty = vec![false; s];
    let full = vec![true; s];
    let v0 = value(&empty)?;
    let v1 = value(&full)?;
    let delta = v1 - v0;

    // (coalition, weight, value) triples for interior coalitions
    let mut rows: Vec<(Vec<bool>, f64, f64)> = Vec::new();
    match mode {
        ShapMode::Exact => {
            if s > 12 {
                return Err(Error::Validation(format!(
                    "exact kernel_shap supports at most 12 players, got {s}"
                )));
            }
            for bits in 1..(1u32 << s) - 1 {
                let coalition: Vec<bool> = (0..s).map(|i| bits >> i & 1 == 1).collect();
                let k = bits.count_ones() as usize;
                let v = value(&coalition)?;
                rows.push((coalition, shapley_kernel(s, k), v));
            }
        }
        ShapMode::Sampled { n_samples, seed } => {
            if n_samples < s + 2 {
                return Err(Error::Validation(format!(
                    "sampled kernel_shap needs n_samples >= S+2 = {}, got {n_samples}",
                    s + 2
                )));
            }
            let mut rng = Rng::derive(seed, &[TAG_KERNEL_SHAP]);
            // coalition-size distribution: P(k) proportional to
            // C(s,k) * kernel(s,k) = (s-1)/(k(s-k))
            let size_weights: Vec<f64> =
                (1..s).map(|k| 1.0 / (k * (s - k)) as f64).collect();
            let total: f64 = size_weights.iter().sum();
            let mut scratch: Vec<usize> = (0..s).collect();
            // Coalitions are drawn in complement pairs (antithetic
            // sampling): the kernel is symmetric under complementation,
            // so the marginal stays proportional to the kernel while the
            // estimator variance roughly halves.
            let mut budget = n_samples;
            while budget > 0 {
                let mut u = rng.next_f64() * total;
                let mut k = 1;
                for (i, &sw) in size_weights.iter().enumerate() {
                    if u < sw || i == size_weights.len() - 1 {
                        k = i + 1;
                        break;
                    }
                    u -= sw;
                }
                // uniform k-subset via partial Fisher-Yates
                for i in 0..k {
                    let j = i + rng.next_below((s - i) as u64) as usize;
                    scratch.swap(i, j);
                }
                let mut coalition = vec![false; s];
                for &i in &scratch[..k] {
                    coalition[i] = true;
                }
                let v = value(&coalition)?;
                rows.push((coalition.clone(), 1.0, v));
                budget -= 1;
                if budget > 0 {
                    let complement: Vec<bool> = coalition.iter().map(|&b| !b).collect();
                    let v = value(&complement)?;
                    rows.push((complement, 1.0, v));
                    budget -= 1;
                }
            }
        }
    }

    // Eliminate the efficiency constraint: express the last player as
    // phi_last = delta - sum(others) and regress on the reduced features.
    let m = s - 1;
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    let mut x = vec![0.0; m];
    for (coalition, weight, v) in &rows {
        let z_last = if coalition[s - 1] { 1.0 } else { 0.0 };
        for i in 0..m {
            let zi = if coalition[i] { 1.0 } else { 0.0 };
            x[i] = zi - z_last;
        }
        let y = v - v0 - z_last * delta;
        for i in 0..m {
            if x[i] == 0.0 {
                continue;
            }
            let wx = weight * x[i];
            b[i] += wx * y;
            for j in 0..m {
                a[i * m + j] += wx * x[j];
            }
        }
    }
    let mut phi = linsolve(&a, &b, m)?;
    let partial: f64 = phi.iter().sum();
    phi.push(delta - partial);
    Ok(phi)
}

/// KernelSHAP over image segments: coalition value is the target-class
/// output on the mid-gray-masked image; per-segment Shapley values are
/// broadcast to pixels.
pub fn kernel_shap(
    predict: PredictFn,
    image: &Tensor,
    target_class: usize,
    segments: &SegmentGrid,
    mode: ShapMode,
) -> Result<AttributionMap> {
    let mut value = |coalition: &[bool]| -> Result<f64> {
        let masked = segments.masked_image(image, coalition)?;
        let row = predict(&masked)?;
        let out = *row.get(target_class).ok_or_else(|| {
            Error::Validation(format!(
                "target_class {target_class} out of range for {} outputs",
                row.len()
            ))
        })?;
        if !out.is_finite() {
            return Err(Error::Validation("predict_fn returned non-finite output".into()));
        }
        Ok(out)
    };
    let phi = kernel_shap_game(&mut value, segments.n_segments(), mode)?;
    AttributionMap::new(
        Method::KernelShap,
        Some(target_class),
        Granularity::Segment,
        segments.broadcast(&phi)?,
    )
}

/// Exact Shapley values by full subset enumeration:
/// `phi_i = sum over T not containing i of |T|!(S-|T|-1)!/S! *
/// (v(T + i) - v(T))`. Test oracle for the KernelSHAP estimators.
pub fn exact_shapley(
    value: &mut dyn FnMut(&[bool]) -> Result<f64>,
    s: usize,
) -> Result<Vec<f64>> {
    if s == 0 || s > 12 {
        return Err(Error::Validation(format!(
            "exact_shapley supports 1..=12 players, got {s}"
        )));
    }
    // factorials up to 12! fit exactly in f64
    let mut fact = [1.0f64; 13];
    for i in 1..=12 {
        fact[i] = fact[i - 1] * i as f64;
    }
    // evaluate the game once per subset
    let n_masks = 1usize << s;
    let mut values = Vec::with_capacity(n_masks);
    for bits in 0..n_masks {
        let coalition: Vec<bool> = (0..s).map(|i| bits >> i & 1 == 1).collect();
        values.push(value(&coalition)?);
    }
    let mut phi = vec![0.0; s];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        for bits in 0..n_masks {
            if bits >> i & 1 == 1 {
                continue;
            }
            let t = (bits as u32).count_ones() as usize;
            let w = fact[t] * fact[s - t - 1] / fact[s];
            *phi_i += w * (values[bits | 1 << i] - values[bits]);
        }
    }
    Ok(phi)
}

// ---------------------------------------------------------------------------
// Attention rollout
// ---------------------------------------------------------------------------

fn validate_attention(attention: &[Vec<Tensor>]) -> Result<usize> {
    if attention.is_empty() || attention[0].is_empty() {
        return Err(Error::Validation("attention trace has no layers/heads".into()));
    }
    let (t, t2) = attention[0][0].dims2()?;
    if t != t2 {
        return Err(Error::Shape(format!("attention matrix is {t}x{t2}, not square")));
    }
    for heads in attention {
        for a in heads {
            if a.shape() != [t, t] {
                return Err(Error::Shape(format!(
                    "attention matrix {:?} does not match {t}x{t}",
                    a.shape()
                )));
            }
            for r in 0..t {
                let mut sum = 0.0;
                for c in 0..t {
                    let v = a.at(r, c);
                    if v < -1e-12 {
                        return Err(Error::Validation(format!(
                            "attention entry ({r},{c}) = {v} is negative"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "attention row {r} sums to {sum}, not 1"
                    )));
                }
            }
        }
    }
    Ok(t)
}

fn head_mean(heads: &[Tensor]) -> Tensor {
    let mut mean = Tensor::zeros(heads[0].shape().to_vec());
    for h in heads {
        for (m, v) in mean.data_mut().iter_mut().zip(h.data()) {
            *m += v;
        }
    }
    let inv = 1.0 / heads.len() as f64;
    mean.map(|v| v * inv)
}

fn matmul_square(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for k in 0..t {
            let aik = a[i * t + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..t {
                out[i * t + j] += aik * b[k * t + j];
            }
        }
    }
    out
}

/// Token relevances from attention rollout: per layer, average heads, mix
/// with identity (`0.5 A + 0.5 I`), row-normalize, and multiply across
/// layers; the classification-token row (own column dropped) is the
/// relevance of each patch token.
pub fn rollout_relevance(attention: &[Vec<Tensor>]) -> Result<Vec<f64>> {
    let t = validate_attention(attention)?;
    let mut rollout: Option<Vec<f64>> = None;
    for heads in attention {
        let mean = head_mean(heads);
        let mut a_hat = vec![0.0; t * t];
        for r in 0..t {
            let mut row_sum = 0.0;
            for c in 0..t {
                let v = 0.5 * mean.at(r, c) + if r == c { 0.5 } else { 0.0 };
                a_hat[r * t + c] = v;
                row_sum += v;
            }
            for c in 0..t {
                a_hat[r * t + c] /= row_sum;
            }
        }
        rollout = Some(match rollout {
            None => a_hat,
            Some(r) => matmul_square(&a_hat, &r, t),
        });
    }
    let r = rollout.expect("at least one layer");
    Ok(r[1..t].to_vec()) // classification-token row, own column dropped
}

/// Attention rollout as a pixel-resolution attribution map. Class-agnostic:
/// `target_class` is `None`.
pub fn attention_rollout(trace: &ForwardTrace, image_size: usize) -> Result<AttributionMap> {
    let rel = rollout_relevance(&trace.attention)?;
    AttributionMap::new(
        Method::AttentionRollout,
        None,
        Granularity::Patch,
        patch_map_to_pixels(&rel, image_size)?,
    )
}

fn patch_map_to_pixels(rel: &[f64], image_size: usize) -> Result<Tensor> {
    let n_patches = rel.len();
    let grid = (n_patches as f64).sqrt().round() as usize;
    if grid * grid != n_patches {
        return Err(Error::Shape(format!(
            "{n_patches} patch tokens do not form a square grid"
        )));
    }
    let patch_map = Tensor::new(vec![grid, grid], rel.to_vec())?;
    upsample_nearest(&patch_map, image_size, image_size)
}

// ---------------------------------------------------------------------------
// Beyond Attention (gradient-weighted attention relevance)
// ---------------------------------------------------------------------------

/// Token relevances by gradient-weighted attention aggregation: per layer
/// `A_bar = head-mean(max(0, G * A))` (elementwise product), accumulated
/// as `R <- R + A_bar * R` from `R = I` in forward layer order. The
/// classification-token row of `R - I` (own column dropped) is returned.
pub fn beyond_relevance(
    attention: &[Vec<Tensor>],
    gradients: &[Vec<Tensor>],
) -> Result<Vec<f64>> {
    let t = validate_attention(attention)?;
    if gradients.len() != attention.len()
        || gradients
            .iter()
            .zip(attention)
            .any(|(g, a)| g.len() != a.len())
    {
        return Err(Error::Shape(
            "attention gradients do not match the trace layout".into(),
        ));
    }
    for heads in gradients {
        for g in heads {
            if g.shape() != [t, t] {
                return Err(Error::Shape(format!(
                    "gradient matrix {:?} does not match {t}x{t}",
                    g.shape()
                )));
            }
        }
    }
    let mut r: Vec<f64> = (0..t * t)
        .map(|i| if i % (t + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    for (heads_a, heads_g) in attention.iter().zip(gradients) {
        let mut a_bar = vec![0.0; t * t];
        for (a, g) in heads_a.iter().zip(heads_g) {
            for (acc, (&av, &gv)) in a_bar.iter_mut().zip(a.data().iter().zip(g.data())) {
                *acc += (gv * av).max(0.0);
            }
        }
        let inv = 1.0 / heads_a.len() as f64;
        for v in a_bar.iter_mut() {
            *v *= inv;
        }
        let update = matmul_square(&a_bar, &r, t);
        for (rv, uv) in r.iter_mut().zip(&update) {
            *rv += uv;
        }
    }
    // subtract the initial identity, then read the classification-token row
    r[0] -= 1.0;
    Ok(r[1..t].to_vec())
}

/// Beyond Attention as a pixel-resolution attribution map; class-specific
/// through the logit gradients.
pub fn beyond_attention(
    trace: &ForwardTrace,
    attention_gradients: &[Vec<Tensor>],
    target_class: usize,
    image_size: usize,
) -> Result<AttributionMap> {
    let rel = beyond_relevance(&trace.attention, attention_gradients)?;
    AttributionMap::new(
        Method::BeyondAttention,
        Some(target_class),
        Granularity::Patch,
        patch_map_to_pixels(&rel, image_size)?,
    )
}
