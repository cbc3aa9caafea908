//! Binarization of attribution maps into comparable boolean masks:
//! clamp negatives, average channels, normalize to [0,1], dynamic
//! threshold (Otsu or percentile), and optional morphological closing for
//! pixel-granularity masks.

use crate::attribution::{AttributionMap, Granularity, Method};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boolean foreground/background mask with the provenance of its source
/// attribution map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
    pub method: Method,
    pub image_id: usize,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>, method: Method) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} entries for {height}x{width}",
                data.len()
            )));
        }
        Ok(BinaryMask { height, width, data, method, image_id: 0 })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Threshold selection strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Otsu's between-class-variance criterion on a 256-bin histogram.
    Otsu,
    /// Keep (approximately) the top fraction `p` of values, `p` in (0,1).
    Percentile(f64),
}

/// Binarization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizeConfig {
    pub threshold_mode: ThresholdMode,
    /// Side of the square closing element; odd, >= 1 (1 = no-op).
    pub closing_kernel: usize,
    /// Granularities whose masks get morphological closing. Coarse
    /// (patch/segment) masks are already contiguous by construction.
    pub closing_applies_to: Vec<Granularity>,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        BinarizeConfig {
            threshold_mode: ThresholdMode::Otsu,
            closing_kernel: 3,
            closing_applies_to: vec![Granularity::Pixel],
        }
    }
}

impl BinarizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.closing_kernel == 0 || self.closing_kernel % 2 == 0 {
            return Err(Error::Validation(format!(
                "closing kernel must be odd and positive, got {}",
                self.closing_kernel
            )));
        }
        if let ThresholdMode::Percentile(p) = self.threshold_mode {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Validation(format!(
                    "percentile must lie strictly inside (0,1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Extra facts from a binarization run, for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarizeInfo {
    pub threshold: f64,
    /// The normalized map was constant (all mass in one histogram bin);
    /// the mask is all-background by convention.
    pub degenerate: bool,
}

/// Set all negative attribution values to zero; metadata preserved.
pub fn clamp_negatives(map: &AttributionMap) -> AttributionMap {
    let mut out = map.clone();
    for v in out.values.data_mut().iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Element-wise mean of `C >= 1` equally shaped grids.
pub fn channel_average(channels: &[Tensor]) -> Result<Tensor> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Validation("channel_average needs at least one channel".into()))?;
    for ch in channels {
        if ch.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "channel shape {:?} does not match {:?}",
                ch.shape(),
                first.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(first.shape().to_vec());
    for ch in channels {
        for (o, v) in out.data_mut().iter_mut().zip(ch.data()) {
            *o += v;
        }
    }
    let inv = 1.0 / channels.len() as f64;
    Ok(out.map(|v| v * inv))
}

/// Affine rescale to [0,1]. A constant grid maps to all zeros with the
/// degenerate flag set (never an error).
pub fn normalize_01(grid: &Tensor) -> Result<(Tensor, bool)> {
    if !grid.is_finite() {
        return Err(Error::Validation("normalize_01 requires finite values".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in grid.data() {
        min = min.min(v);
        max = max.max(v);
    }
    if max == min {
        return Ok((Tensor::zeros(grid.shape().to_vec()), true));
    }
    let inv = 1.0 / (max - min);
    Ok((grid.map(|v| (v - min) * inv), false))
}

const OTSU_BINS: usize = 256;

fn histogram_256(grid: &Tensor) -> Vec<usize> {
    let mut hist = vec![0usize; OTSU_BINS];
    for &v in grid.data() {
        let bin = ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1);
        hist[bin] += 1;
    }
    hist
}

#[cfg(test)]
fn between_class_variance(hist: &[usize], split: usize) -> f64 {
    // background = bins below `split`, foreground = bins from `split` up;
    // bin b is represented by its midpoint (b + 0.5)/256
    let mut wb = 0.0;
    let mut sb = 0.0;
    let mut wf = 0.0;
    let mut sf = 0.0;
    for (b, &count) in hist.iter().enumerate() {
        let c = count as f64;
        let mid = (b as f64 + 0.5) / OTSU_BINS as f64;
        if b < split {
            wb += c;
            sb += c * mid;
        } else {
            wf += c;
            sf += c * mid;
        }
    }
    if wb == 0.0 || wf == 0.0 {
        return 0.0;
    }
    let total = wb + wf;
    let diff = sb / wb - sf / wf;
    (wb / total) * (wf / total) * diff * diff
}

/// Otsu's threshold over a 256-bin histogram of a [0,1]-normalized grid.
/// Returns `(t, degenerate)`; the mask convention is `value > t`, and `t`
/// is the midpoint of the lowest best-split bin (ties toward the lower
/// threshold). Degenerate single-bin grids return `(0.5, true)`.
pub fn otsu_threshold(grid: &Tensor) -> Result<(f64, bool)> {
    for &v in grid.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!(
                "otsu_threshold expects values in [0,1], got {v}"
            )));
        }
    }
    let hist = histogram_256(grid);
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return Ok((0.5, true));
    }
    // incremental scan over split candidates: split = first foreground bin
    let total: f64 = grid.numel() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| c as f64 * (b as f64 + 0.5) / OTSU_BINS as f64)
        .sum();
    let mut wb = 0.0;
    let mut sb = 0.0;
    let mut best_split = 1;
    let mut best_var = f64::NEG_INFINITY;
    for split in 1..OTSU_BINS {
        let b = split - 1;
        wb += hist[b] as f64;
        sb += hist[b] as f64 * (b as f64 + 0.5) / OTSU_BINS as f64;
        let wf = total - wb;
        if wb == 0.0 || wf == 0.0 {
            continue;
        }
        let diff = sb / wb - (sum_all - sb) / wf;
        let var = (wb / total) * (wf / total) * diff * diff;
        if var > best_var {
            best_var = var;
            best_split = split;
        }
    }
    Ok(((best_split as f64 + 0.5) / OTSU_BINS as f64, false))
}

/// Threshold keeping the top fraction `p`: with values sorted descending,
/// `t = sorted[floor(p*N)]` and the mask is `value > t`.
fn percentile_threshold(grid: &Tensor, p: f64) -> f64 {
    let mut sorted: Vec<f64> = grid.data().to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let idx = ((p * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Full binarization pipeline plus reporting info: clamp negatives,
/// channel-average (identity on the single channel), normalize, threshold,
/// `value > t` mask, then closing when the map's granularity is configured
/// for it.
pub fn binarize_with_info(
    map: &AttributionMap,
    cfg: &BinarizeConfig,
) -> Result<(BinaryMask, BinarizeInfo)> {
    cfg.validate()?;
    let clamped = clamp_negatives(map);
    let averaged = channel_average(std::slice::from_ref(&clamped.values))?;
    let (normalized, degenerate) = normalize_01(&averaged)?;
    let threshold = if degenerate {
        0.5
    } else {
        match cfg.threshold_mode {
            ThresholdMode::Otsu => otsu_threshold(&normalized)?.0,
            ThresholdMode::Percentile(p) => percentile_threshold(&normalized, p),
        }
    };
    let (h, w) = normalized.dims2()?;
    let data: Vec<bool> = normalized.data().iter().map(|&v| v > threshold).collect();
    let mut mask = BinaryMask::new(h, w, data, map.method)?;
    mask.image_id = map.image_id;
    if cfg.closing_applies_to.contains(&map.granularity) {
        mask = morph_close(&mask, cfg.closing_kernel)?;
    }
    Ok((mask, BinarizeInfo { threshold, degenerate }))
}

/// [`binarize_with_info`] without the reporting info.
pub fn binarize(map: &AttributionMap, cfg: &BinarizeConfig) -> Result<BinaryMask> {
    binarize_with_info(map, cfg).map(|(mask, _)| mask)
}

/// Morphological closing with a `k x k` square structuring element:
/// dilation (out-of-bounds = background) then erosion (out-of-bounds =
/// foreground).
pub fn morph_close(mask: &BinaryMask, k: usize) -> Result<BinaryMask> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Validation(format!(
            "closing kernel must be odd and positive, got {k}"
        )));
    }
    if k == 1 {
        return Ok(mask.clone());
    }
    let (h, w) = mask.dims();
    let r = (k / 2) as isize;
    let window_hit = |data: &[bool], cr: usize, cc: usize, want: bool| -> bool {
        // returns true if any in-bounds window cell equals `want`
        for dr in -r..=r {
            for dc in -r..=r {
                let rr = cr as isize + dr;
                let cc2 = cc as isize + dc;
                if rr < 0 || rr >= h as isize || cc2 < 0 || cc2 >= w as isize {
                    continue;
                }
                if data[rr as usize * w + cc2 as usize] == want {
                    return true;
                }
            }
        }
        false
    };
    let mut dilated = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            dilated[row * w + col] = window_hit(mask.data(), row, col, true);
        }
    }
    let mut eroded = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            // erosion keeps a pixel if no in-bounds window cell is
            // background (out-of-bounds counts as foreground)
            eroded[row * w + col] = !window_hit(&dilated, row, col, false);
        }
    }
    let mut out = BinaryMask::new(h, w, eroded, mask.method)?;
    out.image_id = mask.image_id;
    Ok(out)
}

/// Nearest-neighbor upsampling of a coarse grid to `h x w`; target
/// dimensions must be integer multiples of the source dimensions.
pub fn upsample_nearest(src: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (sh, sw) = src.dims2()?;
    if sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
        return Err(Error::Shape(format!(
            "target {h}x{w} is not an integer multiple of source {sh}x{sw}"
        )));
    }
    let fr = h / sh;
    let fc = w / sw;
    let mut data = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            data.push(src.at(row / fr, col / fc));
        }
    }
    Tensor::new(vec![h, w], data)
}
