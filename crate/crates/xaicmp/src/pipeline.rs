//! End-to-end orchestration: configuration, dataset/model lifecycle,
//! attribution runs, mask generation, agreement matrices, and report
//! emission, all behind documented on-disk artifacts.
//!
//! Every stage is re-runnable from the artifacts of the previous stage,
//! and `run_pipeline` simply chains the stages, so a staged run and an
//! end-to-end run produce byte-identical outputs. Per-image work may fan
//! out to a worker pool (`XAICMP_WORKERS`); results are collected in image
//! order before any write, keeping artifacts byte-deterministic for any
//! worker count.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::agreement::{aggregate, iou, AgreementMatrix, Metric};
use crate::attribution::{
    attention_rollout, beyond_attention, gradient_shap, integrated_gradients, kernel_shap,
    lime_attribution, segment_grid, AttributionMap, Granularity, Method, SegmentGrid, ShapMode,
};
use crate::error::{Error, Result};
use crate::formats::{
    read_matrix_csv, read_xatt, read_xmsk, write_matrix_csv, write_xatt, write_xmsk,
};
use crate::maskpipe::{binarize_with_info, BinarizeConfig, BinaryMask, ThresholdMode};
use crate::report::{render_heatmap, render_overlay};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{
    attention_gradients, forward, gen_shapes_dataset, predict_one, read_checkpoint, train,
    write_checkpoint, ShapesDataset, ViTConfig, ViTParams,
};

/// Optional environment variable selecting the worker count; absent means
/// serial execution.
pub const WORKERS_ENV: &str = "XAICMP_WORKERS";

const TAG_EVAL_DATA: u64 = 0x6576_616c; // "eval"
const TAG_ATTRIBUTE: u64 = 0x6174_7472; // "attr"

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which class a class-specific explanation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// The model's argmax class for the image (default).
    Predicted,
    /// The dataset label.
    TrueLabel,
}

impl TargetPolicy {
    pub fn id(self) -> &'static str {
        match self {
            TargetPolicy::Predicted => "predicted",
            TargetPolicy::TrueLabel => "true_label",
        }
    }
}

fn granularity_id(g: Granularity) -> &'static str {
    match g {
        Granularity::Pixel => "pixel",
        Granularity::Patch => "patch",
        Granularity::Segment => "segment",
    }
}

fn granularity_from_id(s: &str) -> Result<Granularity> {
    match s {
        "pixel" => Ok(Granularity::Pixel),
        "patch" => Ok(Granularity::Patch),
        "segment" => Ok(Granularity::Segment),
        other => Err(Error::Validation(format!("unknown granularity {other:?}"))),
    }
}

/// Full pipeline configuration. Built from defaults plus a flat
/// `key = value` config file; unknown or duplicate keys are errors.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub methods: Vec<Method>,
    pub ig_steps: usize,
    pub gs_samples: usize,
    pub gs_sigma: f64,
    pub lime_samples: usize,
    pub lime_lambda: f64,
    pub lime_kernel_width: f64,
    pub ks_samples: usize,
    pub ks_exact: bool,
    pub grid_side: usize,
    pub threshold_is_otsu: bool,
    pub percentile: f64,
    pub closing_kernel: usize,
    pub closing_applies_to: Vec<Granularity>,
    pub target_policy: TargetPolicy,
    /// Output directory; settable via the config file or `--out`, and
    /// deliberately left out of the canonical snapshot so that runs in
    /// different directories stay byte-identical.
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            n_train: 600,
            n_eval: 50,
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            n_layers: 2,
            n_heads: 2,
            n_classes: 4,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 16,
            methods: Method::ALL.to_vec(),
            ig_steps: 64,
            gs_samples: 64,
            gs_sigma: 0.1,
            lime_samples: 200,
            lime_lambda: 0.01,
            lime_kernel_width: 0.5,
            ks_samples: 2000,
            ks_exact: false,
            grid_side: 4,
            threshold_is_otsu: true,
            percentile: 0.2,
            closing_kernel: 3,
            closing_applies_to: vec![Granularity::Pixel],
            target_policy: TargetPolicy::Predicted,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("config key {key}: invalid value {value:?}")))
}

impl PipelineConfig {
    /// Defaults overridden by the flat `key = value` lines of `text`.
    /// `#` starts a comment; blank lines are skipped; unknown and repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!(
                    "config line {}: expected key=value, got {raw:?}",
                    line_no + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Validation(format!("config key {key} repeated")));
            }
            seen.push(key.to_string());
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Set one documented key. Unknown keys are errors (misspelling
    /// protection).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_eval" => self.n_eval = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "n_layers" => self.n_layers = parse_num(key, value)?,
            "n_heads" => self.n_heads = parse_num(key, value)?,
            "n_classes" => self.n_classes = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "methods" => {
                self.methods = if value == "all" {
                    Method::ALL.to_vec()
                } else {
                    value
                        .split(',')
                        .map(|s| Method::from_id(s.trim()))
                        .collect::<Result<Vec<_>>>()?
                };
            }
            "ig_steps" => self.ig_steps = parse_num(key, value)?,
            "gs_samples" => self.gs_samples = parse_num(key, value)?,
            "gs_sigma" => self.gs_sigma = parse_num(key, value)?,
            "lime_samples" => self.lime_samples = parse_num(key, value)?,
            "lime_lambda" => self.lime_lambda = parse_num(key, value)?,
            "lime_kernel_width" => self.lime_kernel_width = parse_num(key, value)?,
            "ks_samples" => self.ks_samples = parse_num(key, value)?,
            "ks_exact" => {
                self.ks_exact = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(Error::Validation(format!(
                            "config key ks_exact: expected true or false, got {value:?}"
                        )))
                    }
                }
            }
            "grid_side" => self.grid_side = parse_num(key, value)?,
            "threshold_mode" => {
                self.threshold_is_otsu = match value {
                    "otsu" => true,
                    "percentile" => false,
                    _ => {
                        return Err(Error::Validation(format!(
                            "config key threshold_mode: expected otsu or percentile, got {value:?}"
                        )))
                    }
                }
            }
            "percentile" => self.percentile = parse_num(key, value)?,
            "closing_kernel" => self.closing_kernel = parse_num(key, value)?,
            "closing_applies_to" => {
                self.closing_applies_to = if value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| granularity_from_id(s.trim()))
                        .collect::<Result<Vec<_>>>()?
                };
            }
            "target_class" => {
                self.target_policy = match value {
                    "predicted" => TargetPolicy::Predicted,
                    "true_label" => TargetPolicy::TrueLabel,
                    _ => {
                        return Err(Error::Validation(format!(
                            "config key target_class: expected predicted or true_label, got {value:?}"
                        )))
                    }
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Validation(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Canonical snapshot of every semantic key in a fixed order. The
    /// output directory is excluded so that identical configurations in
    /// different locations produce identical snapshots (and manifests).
    pub fn to_text(&self) -> String {
        let methods = self
            .methods
            .iter()
            .map(|m| m.id())
            .collect::<Vec<_>>()
            .join(",");
        let closing = if self.closing_applies_to.is_empty() {
            "none".to_string()
        } else {
            self.closing_applies_to
                .iter()
                .map(|&g| granularity_id(g))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "seed = {}\nn_train = {}\nn_eval = {}\nimage_size = {}\npatch_size = {}\n\
             embed_dim = {}\nn_layers = {}\nn_heads = {}\nn_classes = {}\nepochs = {}\n\
             learning_rate = {}\nbatch_size = {}\nmethods = {}\nig_steps = {}\n\
             gs_samples = {}\ngs_sigma = {}\nlime_samples = {}\nlime_lambda = {}\n\
             lime_kernel_width = {}\nks_samples = {}\nks_exact = {}\ngrid_side = {}\n\
             threshold_mode = {}\npercentile = {}\nclosing_kernel = {}\n\
             closing_applies_to = {}\ntarget_class = {}\n",
            self.seed,
            self.n_train,
            self.n_eval,
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.n_layers,
            self.n_heads,
            self.n_classes,
            self.epochs,
            self.learning_rate,
            self.batch_size,
            methods,
            self.ig_steps,
            self.gs_samples,
            self.gs_sigma,
            self.lime_samples,
            self.lime_lambda,
            self.lime_kernel_width,
            self.ks_samples,
            self.ks_exact,
            self.grid_side,
            if self.threshold_is_otsu { "otsu" } else { "percentile" },
            self.percentile,
            self.closing_kernel,
            closing,
            self.target_policy.id(),
        )
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_classes: self.n_classes,
            seed: self.seed,
        }
    }

    pub fn binarize_config(&self) -> BinarizeConfig {
        BinarizeConfig {
            threshold_mode: if self.threshold_is_otsu {
                ThresholdMode::Otsu
            } else {
                ThresholdMode::Percentile(self.percentile)
            },
            closing_kernel: self.closing_kernel,
            closing_applies_to: self.closing_applies_to.clone(),
        }
    }

    fn uses_segments(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m, Method::Lime | Method::KernelShap))
    }

    pub fn validate(&self) -> Result<()> {
        self.vit_config().validate()?;
        self.binarize_config().validate()?;
        if self.methods.is_empty() {
            return Err(Error::Validation("at least one method must be enabled".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Validation(format!("method {} listed twice", m.id())));
            }
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Validation("n_train and n_eval must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Validation("learning_rate must be non-negative".into()));
        }
        if self.ig_steps == 0 || self.gs_samples == 0 {
            return Err(Error::Validation("ig_steps and gs_samples must be positive".into()));
        }
        if !(self.gs_sigma >= 0.0) {
            return Err(Error::Validation("gs_sigma must be non-negative".into()));
        }
        if self.uses_segments() {
            if self.grid_side == 0 || self.image_size % self.grid_side != 0 {
                return Err(Error::Validation(format!(
                    "grid_side {} must divide image_size {}",
                    self.grid_side, self.image_size
                )));
            }
            let s = self.grid_side * self.grid_side;
            if self.methods.contains(&Method::Lime) && self.lime_samples < s + 2 {
                return Err(Error::Validation(format!(
                    "lime_samples must be at least S+2 = {}, got {}",
                    s + 2,
                    self.lime_samples
                )));
            }
            if self.methods.contains(&Method::KernelShap) {
                if self.ks_exact && s > 12 {
                    return Err(Error::Validation(format!(
                        "ks_exact requires at most 12 segments, grid has {s}"
                    )));
                }
                if !self.ks_exact && self.ks_samples < s + 2 {
                    return Err(Error::Validation(format!(
                        "ks_samples must be at least S+2 = {}, got {}",
                        s + 2,
                        self.ks_samples
                    )));
                }
            }
        }
        Ok(())
    }

    fn require_pairwise(&self) -> Result<()> {
        if self.methods.len() < 2 {
            return Err(Error::Validation(format!(
                "need ≥2 methods for pairwise comparison, got {}",
                self.methods.len()
            )));
        }
        Ok(())
    }

    // --- artifact layout (paths relative to out_dir) ---

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join("data").join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("data").join("eval")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.xvit")
    }

    pub fn map_rel(&self, image_id: usize, method: Method) -> String {
        format!("maps/img{image_id:04}_{}.xatt", method.id())
    }

    pub fn mask_rel(&self, image_id: usize, method: Method) -> String {
        format!("masks/img{image_id:04}_{}.xmsk", method.id())
    }

    pub fn overlay_rel(&self, image_id: usize, method: Method) -> String {
        format!("reports/overlays/img{image_id:04}_{}.pgm", method.id())
    }

    pub fn matrix_rel(&self, metric: Metric, class: Option<usize>) -> String {
        match class {
            None => format!("matrices/{}_overall.csv", metric.id()),
            Some(c) => format!("matrices/{}_class{c}.csv", metric.id()),
        }
    }

    pub fn heatmap_rel(&self, metric: Metric, class: Option<usize>) -> String {
        match class {
            None => format!("reports/{}_overall.svg", metric.id()),
            Some(c) => format!("reports/{}_class{c}.svg", metric.id()),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.txt")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.out_dir.join("timings.txt")
    }
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Worker count from the environment: absent → 1 (serial); anything other
/// than a positive integer is an error.
pub fn worker_count() -> Result<usize> {
    worker_count_from(std::env::var(WORKERS_ENV).ok().as_deref())
}

pub fn worker_count_from(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w >= 1)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "{WORKERS_ENV} must be a positive integer, got {s:?}"
                ))
            }),
    }
}

/// Apply `f` to every index in `0..n`, fanning out to `workers` threads,
/// and return results in index order. `f` must be pure per index; the
/// output is identical for any worker count.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("result mutex poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result mutex poisoned")
        .into_iter()
        .map(|o| o.expect("worker filled every slot"))
        .collect()
}

// ---------------------------------------------------------------------------
// Shared I/O helpers
// ---------------------------------------------------------------------------

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))
}

/// Commas and newlines inside recorded error messages would break the
/// single-line CSV artifacts; replace them.
fn csv_safe(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], ";")
}

fn image_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img{i:04}.xatt"))
}

fn write_dataset(dir: &Path, ds: &ShapesDataset) -> Result<()> {
    ensure_dir(dir)?;
    let mut labels = String::from("image_id,label\n");
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        labels.push_str(&format!("{i},{label}\n"));
        let (h, w) = (img.shape()[0], img.shape()[1]);
        write_xatt(&image_file(dir, i), h, w, img.data())?;
    }
    write_text(&dir.join("labels.csv"), &labels)
}

fn read_labels(dir: &Path) -> Result<Vec<usize>> {
    let text = read_text(&dir.join("labels.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some("image_id,label") {
        return Err(Error::Format(format!(
            "{}: labels.csv missing its header",
            dir.display()
        )));
    }
    let mut labels = Vec::new();
    for line in lines {
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("labels.csv: bad row {line:?}")))?;
        let id: usize = parse_num("image_id", id)
            .map_err(|_| Error::Format(format!("labels.csv: bad image id {id:?}")))?;
        if id != labels.len() {
            return Err(Error::Format(format!(
                "labels.csv: image ids must be contiguous, got {id} at row {}",
                labels.len()
            )));
        }
        labels.push(
            parse_num("label", label)
                .map_err(|_| Error::Format(format!("labels.csv: bad label {label:?}")))?,
        );
    }
    Ok(labels)
}

fn read_dataset(dir: &Path) -> Result<ShapesDataset> {
    let labels = read_labels(dir)?;
    let mut images = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let (h, w, values) = read_xatt(&image_file(dir, i))?;
        images.push(Tensor::new(vec![h, w], values)?);
    }
    Ok(ShapesDataset { images, labels })
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Generate and persist the training and evaluation datasets. The two
/// sets come from independent seed streams derived from `config.seed`.
pub fn stage_gen_data(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let vit_cfg = cfg.vit_config();
    let train_ds = gen_shapes_dataset(cfg.n_train, cfg.seed, &vit_cfg)?;
    write_dataset(&cfg.train_dir(), &train_ds)?;
    let eval_seed = Rng::derive(cfg.seed, &[TAG_EVAL_DATA]).next_u64();
    let eval_ds = gen_shapes_dataset(cfg.n_eval, eval_seed, &vit_cfg)?;
    write_dataset(&cfg.eval_dir(), &eval_ds)
}

/// Train the model on the persisted training set; writes the checkpoint
/// and a metrics file, and returns the training accuracy.
pub fn stage_train(cfg: &PipelineConfig) -> Result<f64> {
    cfg.validate()?;
    let ds = read_dataset(&cfg.train_dir())?;
    let params = ViTParams::init(cfg.vit_config())?;
    let trained = train(
        &params,
        &ds,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.seed,
    )?;
    let acc = crate::vit::accuracy(&trained, &ds)?;
    write_checkpoint(&cfg.model_path(), &trained)?;
    write_text(
        &cfg.out_dir.join("train_metrics.txt"),
        &format!("train_accuracy={acc:.6}\n"),
    )?;
    Ok(acc)
}

/// One evaluation image's attribution outcome.
struct ImageOutcome {
    label: usize,
    predicted: usize,
    target: usize,
    maps: Vec<(Method, std::result::Result<AttributionMap, String>)>,
}

fn attribute_one(
    cfg: &PipelineConfig,
    params: &ViTParams,
    segments: Option<&SegmentGrid>,
    image: &Tensor,
    image_id: usize,
    target: usize,
    method: Method,
    img_seed: u64,
) -> Result<AttributionMap> {
    let sz = cfg.image_size;
    let mut map = match method {
        Method::IntegratedGradients => {
            let baseline = Tensor::zeros(vec![sz, sz]);
            integrated_gradients(params, image, target, &baseline, cfg.ig_steps)?
        }
        Method::GradientShap => {
            gradient_shap(params, image, target, cfg.gs_samples, cfg.gs_sigma, img_seed)?
        }
        Method::Lime => {
            let segs = segments.expect("validated: segments exist when LIME enabled");
            let mut predict = |im: &Tensor| predict_one(params, im);
            lime_attribution(
                &mut predict,
                image,
                target,
                segs,
                cfg.lime_samples,
                cfg.lime_lambda,
                cfg.lime_kernel_width,
                img_seed,
            )?
        }
        Method::KernelShap => {
            let segs = segments.expect("validated: segments exist when KernelSHAP enabled");
            let mode = if cfg.ks_exact {
                ShapMode::Exact
            } else {
                ShapMode::Sampled { n_samples: cfg.ks_samples, seed: img_seed }
            };
            let mut predict = |im: &Tensor| predict_one(params, im);
            kernel_shap(&mut predict, image, target, segs, mode)?
        }
        Method::AttentionRollout => {
            let trace = forward(params, image)?;
            attention_rollout(&trace, sz)?
        }
        Method::BeyondAttention => {
            let (trace, grads) = attention_gradients(params, image, target)?;
            beyond_attention(&trace, &grads, target, sz)?
        }
    };
    map.image_id = image_id;
    Ok(map)
}

/// What `stage_attribute` learned, for the manifest.
#[derive(Debug)]
pub struct AttributeSummary {
    /// `(image_id, label, predicted, target)` per evaluation image.
    pub predictions: Vec<(usize, usize, usize, usize)>,
    /// `(image_id, method, message)` for failed attributions.
    pub failures: Vec<(usize, Method, String)>,
    pub n_maps_written: usize,
}

/// Attribute every evaluation image with every enabled method and persist
/// the maps. Per-image work fans out to the worker pool; collection is
/// ordered by image index, so output bytes are worker-count independent.
pub fn stage_attribute(cfg: &PipelineConfig) -> Result<AttributeSummary> {
    cfg.validate()?;
    let params = read_checkpoint(&cfg.model_path())?;
    let ds = read_dataset(&cfg.eval_dir())?;
    let segments = if cfg.uses_segments() {
        Some(segment_grid(cfg.image_size, cfg.grid_side)?)
    } else {
        None
    };
    let workers = worker_count()?;
    ensure_dir(&cfg.out_dir.join("maps"))?;

    let outcomes: Vec<Result<ImageOutcome>> = map_indexed(ds.len(), workers, |i| {
        let image = &ds.images[i];
        let trace = forward(&params, image)?;
        let predicted = trace.predicted_class();
        let label = ds.labels[i];
        let target = match cfg.target_policy {
            TargetPolicy::Predicted => predicted,
            TargetPolicy::TrueLabel => label,
        };
        let img_seed = Rng::derive(cfg.seed, &[TAG_ATTRIBUTE, i as u64]).next_u64();
        let maps = cfg
            .methods
            .iter()
            .map(|&method| {
                let out = attribute_one(
                    cfg,
                    &params,
                    segments.as_ref(),
                    image,
                    i,
                    target,
                    method,
                    img_seed,
                )
                .map_err(|e| e.to_string());
                (method, out)
            })
            .collect();
        Ok(ImageOutcome { label, predicted, target, maps })
    });

    let mut predictions = String::from("image_id,label,predicted,target\n");
    let mut errors = String::from("image_id,method,message\n");
    let mut summary = AttributeSummary {
        predictions: Vec::new(),
        failures: Vec::new(),
        n_maps_written: 0,
    };
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        predictions.push_str(&format!(
            "{i},{},{},{}\n",
            outcome.label, outcome.predicted, outcome.target
        ));
        summary
            .predictions
            .push((i, outcome.label, outcome.predicted, outcome.target));
        for (method, result) in outcome.maps {
            match result {
                Ok(map) => {
                    let (h, w) = (map.values.shape()[0], map.values.shape()[1]);
                    let path = cfg.out_dir.join(cfg.map_rel(i, method));
                    write_xatt(&path, h, w, map.values.data())?;
                    summary.n_maps_written += 1;
                }
                Err(msg) => {
                    errors.push_str(&format!("{i},{},{}\n", method.id(), csv_safe(&msg)));
                    summary.failures.push((i, method, msg));
                }
            }
        }
    }
    write_text(&cfg.out_dir.join("maps").join("predictions.csv"), &predictions)?;
    write_text(&cfg.out_dir.join("maps").join("errors.csv"), &errors)?;
    Ok(summary)
}

/// What `stage_binarize` learned, for the manifest.
#[derive(Debug)]
pub struct BinarizeSummary {
    /// `(image_id, method, message)` for maps that could not be binarized
    /// (including maps missing because attribution failed).
    pub failures: Vec<(usize, Method, String)>,
    pub n_masks_written: usize,
}

/// Binarize every persisted attribution map into a mask file, recording
/// per-mask threshold info.
pub fn stage_binarize(cfg: &PipelineConfig) -> Result<BinarizeSummary> {
    cfg.validate()?;
    let bin_cfg = cfg.binarize_config();
    ensure_dir(&cfg.out_dir.join("masks"))?;
    let mut info = String::from("image_id,method,threshold,degenerate\n");
    let mut errors = String::from("image_id,method,message\n");
    let mut summary = BinarizeSummary { failures: Vec::new(), n_masks_written: 0 };
    for i in 0..cfg.n_eval {
        for &method in &cfg.methods {
            let map_path = cfg.out_dir.join(cfg.map_rel(i, method));
            if !map_path.exists() {
                let msg = "map file missing (attribution failed upstream)".to_string();
                errors.push_str(&format!("{i},{},{}\n", method.id(), csv_safe(&msg)));
                summary.failures.push((i, method, msg));
                continue;
            }
            let outcome = (|| -> Result<()> {
                let (h, w, values) = read_xatt(&map_path)?;
                let mut map = AttributionMap::new(
                    method,
                    None,
                    method.granularity(),
                    Tensor::new(vec![h, w], values)?,
                )?;
                map.image_id = i;
                let (mask, bin_info) = binarize_with_info(&map, &bin_cfg)?;
                write_xmsk(&cfg.out_dir.join(cfg.mask_rel(i, method)), &mask)?;
                info.push_str(&format!(
                    "{i},{},{:.6},{}\n",
                    method.id(),
                    bin_info.threshold,
                    bin_info.degenerate as u8
                ));
                Ok(())
            })();
            match outcome {
                Ok(()) => summary.n_masks_written += 1,
                Err(e) => {
                    let msg = e.to_string();
                    errors.push_str(&format!("{i},{},{}\n", method.id(), csv_safe(&msg)));
                    summary.failures.push((i, method, msg));
                }
            }
        }
    }
    write_text(&cfg.out_dir.join("masks").join("info.csv"), &info)?;
    write_text(&cfg.out_dir.join("masks").join("errors.csv"), &errors)?;
    Ok(summary)
}

/// Per-image agreement matrices over a fixed method list; methods whose
/// masks are absent get excluded entries, as do coverage rows of empty
/// masks.
pub fn image_matrices(
    methods: &[Method],
    masks: &[(Method, BinaryMask)],
) -> Result<(AgreementMatrix, AgreementMatrix)> {
    let find = |m: Method| masks.iter().find(|(mm, _)| *mm == m).map(|(_, mask)| mask);
    let k = methods.len();
    let mut iou_entries = Vec::with_capacity(k * k);
    let mut cr_entries = Vec::with_capacity(k * k);
    for &mi in methods {
        for &mj in methods {
            match (find(mi), find(mj)) {
                (Some(a), Some(b)) => {
                    iou_entries.push(Some(iou(a, b)?));
                    if a.count_true() == 0 {
                        cr_entries.push(None);
                    } else {
                        cr_entries.push(Some(crate::agreement::cr(a, b)?));
                    }
                }
                _ => {
                    iou_entries.push(None);
                    cr_entries.push(None);
                }
            }
        }
    }
    Ok((
        AgreementMatrix::from_entries(Metric::Iou, methods.to_vec(), iou_entries)?,
        AgreementMatrix::from_entries(Metric::Cr, methods.to_vec(), cr_entries)?,
    ))
}

/// What `stage_compare` learned, for the manifest.
#[derive(Debug)]
pub struct CompareSummary {
    /// Ordered `(key, value)` exclusion/bookkeeping counters.
    pub exclusions: Vec<(String, usize)>,
}

/// Compute per-image agreement matrices from the persisted masks and
/// aggregate them overall and per class (by dataset label), writing one
/// CSV per aggregate.
pub fn stage_compare(cfg: &PipelineConfig) -> Result<CompareSummary> {
    cfg.validate()?;
    cfg.require_pairwise()?;
    let labels = read_labels(&cfg.eval_dir())?;
    ensure_dir(&cfg.out_dir.join("matrices"))?;

    let mut per_image_iou = Vec::with_capacity(labels.len());
    let mut per_image_cr = Vec::with_capacity(labels.len());
    let mut masks_missing = 0usize;
    let mut images_skipped = 0usize;
    let mut empty_cr_rows = 0usize;
    for i in 0..labels.len() {
        let mut present: Vec<(Method, BinaryMask)> = Vec::new();
        for &method in &cfg.methods {
            let path = cfg.out_dir.join(cfg.mask_rel(i, method));
            if path.exists() {
                present.push((method, read_xmsk(&path, method)?));
            } else {
                masks_missing += 1;
            }
        }
        if present.len() < 2 {
            images_skipped += 1;
            present.clear(); // too few masks: contribute nothing
        } else {
            empty_cr_rows += present.iter().filter(|(_, m)| m.count_true() == 0).count();
        }
        let (iou_m, cr_m) = image_matrices(&cfg.methods, &present)?;
        per_image_iou.push(iou_m);
        per_image_cr.push(cr_m);
    }

    let all_na = |metric: Metric| {
        AgreementMatrix::from_entries(
            metric,
            cfg.methods.clone(),
            vec![None; cfg.methods.len() * cfg.methods.len()],
        )
    };
    let mut outputs: Vec<(String, AgreementMatrix)> = vec![
        (cfg.matrix_rel(Metric::Iou, None), aggregate(&per_image_iou)?),
        (cfg.matrix_rel(Metric::Cr, None), aggregate(&per_image_cr)?),
    ];
    for c in 0..cfg.n_classes {
        let class_iou: Vec<AgreementMatrix> = labels
            .iter()
            .zip(&per_image_iou)
            .filter(|(&l, _)| l == c)
            .map(|(_, m)| m.clone())
            .collect();
        let class_cr: Vec<AgreementMatrix> = labels
            .iter()
            .zip(&per_image_cr)
            .filter(|(&l, _)| l == c)
            .map(|(_, m)| m.clone())
            .collect();
        let iou_m = if class_iou.is_empty() { all_na(Metric::Iou)? } else { aggregate(&class_iou)? };
        let cr_m = if class_cr.is_empty() { all_na(Metric::Cr)? } else { aggregate(&class_cr)? };
        outputs.push((cfg.matrix_rel(Metric::Iou, Some(c)), iou_m));
        outputs.push((cfg.matrix_rel(Metric::Cr, Some(c)), cr_m));
    }
    for (rel, matrix) in &outputs {
        write_matrix_csv(matrix, &cfg.out_dir.join(rel))?;
    }

    let exclusions = vec![
        ("images_total".to_string(), labels.len()),
        ("images_compared".to_string(), labels.len() - images_skipped),
        ("images_skipped_lt2_masks".to_string(), images_skipped),
        ("masks_missing".to_string(), masks_missing),
        ("empty_mask_cr_rows".to_string(), empty_cr_rows),
    ];
    let mut text = String::from("key,value\n");
    for (k, v) in &exclusions {
        text.push_str(&format!("{k},{v}\n"));
    }
    write_text(&cfg.out_dir.join("matrices").join("exclusions.csv"), &text)?;
    Ok(CompareSummary { exclusions })
}

/// Render SVG heatmaps for every persisted matrix and a mask overlay for
/// every (image, method) pair.
pub fn stage_report(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    cfg.require_pairwise()?;
    ensure_dir(&cfg.out_dir.join("reports").join("overlays"))?;
    let mut scopes: Vec<Option<usize>> = vec![None];
    scopes.extend((0..cfg.n_classes).map(Some));
    for metric in [Metric::Iou, Metric::Cr] {
        for &class in &scopes {
            let matrix = read_matrix_csv(&cfg.out_dir.join(cfg.matrix_rel(metric, class)), metric)?;
            render_heatmap(&matrix, &cfg.out_dir.join(cfg.heatmap_rel(metric, class)))?;
        }
    }
    let ds = read_dataset(&cfg.eval_dir())?;
    for i in 0..ds.len() {
        for &method in &cfg.methods {
            let mask_path = cfg.out_dir.join(cfg.mask_rel(i, method));
            if !mask_path.exists() {
                continue;
            }
            let mask = read_xmsk(&mask_path, method)?;
            render_overlay(
                &ds.images[i],
                &mask,
                &cfg.out_dir.join(cfg.overlay_rel(i, method)),
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Per-image record in the manifest: identities plus the artifact files
/// each method produced (`None` = stage failed for that method).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub target: usize,
    pub files: Vec<(Method, Option<String>, Option<String>)>,
}

/// Everything a run produced: config snapshot, per-image records, error
/// and exclusion bookkeeping, aggregate artifact paths, and stage timings.
/// Timings are wall-clock and therefore serialized to a separate file,
/// keeping `manifest.txt` byte-deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_text: String,
    pub records: Vec<ImageRecord>,
    /// `(image_id, method, stage, message)`
    pub errors: Vec<(usize, Method, String, String)>,
    pub exclusions: Vec<(String, usize)>,
    /// Matrix CSVs and rendered heatmaps, relative to the output
    /// directory.
    pub artifacts: Vec<String>,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn n_map_files(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| &r.files)
            .filter(|(_, map, _)| map.is_some())
            .count()
    }

    pub fn n_mask_files(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| &r.files)
            .filter(|(_, _, mask)| mask.is_some())
            .count()
    }

    /// Deterministic text serialization (timings excluded by design).
    pub fn to_text(&self) -> String {
        let mut s = String::from("XMAN1\n[config]\n");
        s.push_str(&self.config_text);
        s.push_str("[images]\nimage_id,label,predicted,target\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.image_id, r.label, r.predicted, r.target));
        }
        s.push_str("[files]\nimage_id,method,map,mask\n");
        for r in &self.records {
            for (method, map, mask) in &r.files {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.image_id,
                    method.id(),
                    map.as_deref().unwrap_or("-"),
                    mask.as_deref().unwrap_or("-"),
                ));
            }
        }
        s.push_str("[errors]\nimage_id,method,stage,message\n");
        for (i, method, stage, msg) in &self.errors {
            s.push_str(&format!("{i},{},{stage},{}\n", method.id(), csv_safe(msg)));
        }
        s.push_str("[exclusions]\nkey,value\n");
        for (k, v) in &self.exclusions {
            s.push_str(&format!("{k},{v}\n"));
        }
        s.push_str("[artifacts]\n");
        for a in &self.artifacts {
            s.push_str(a);
            s.push('\n');
        }
        s.push_str("[end]\n");
        s
    }

    /// Parse a serialized manifest (timings come back empty).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        if lines.next() != Some("XMAN1") {
            return Err(Error::Format("manifest missing XMAN1 header".into()));
        }
        if lines.next() != Some("[config]") {
            return Err(Error::Format("manifest missing [config] section".into()));
        }
        let mut config_text = String::new();
        for line in lines.by_ref() {
            if line == "[images]" {
                break;
            }
            config_text.push_str(line);
            config_text.push('\n');
        }
        let expect = |lines: &mut std::iter::Peekable<std::str::Lines>, want: &str| -> Result<()> {
            match lines.next() {
                Some(l) if l == want => Ok(()),
                other => Err(Error::Format(format!(
                    "manifest: expected {want:?}, got {other:?}"
                ))),
            }
        };
        expect(&mut lines, "image_id,label,predicted,target")?;
        let mut records: Vec<ImageRecord> = Vec::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("manifest truncated in [images]".into()))?;
            if line == "[files]" {
                break;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("manifest images row {line:?}")));
            }
            let nums: Vec<usize> = cols
                .iter()
                .map(|c| c.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("manifest images row {line:?}")))?;
            records.push(ImageRecord {
                image_id: nums[0],
                label: nums[1],
                predicted: nums[2],
                target: nums[3],
                files: Vec::new(),
            });
        }
        expect(&mut lines, "image_id,method,map,mask")?;
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("manifest truncated in [files]".into()))?;
            if line == "[errors]" {
                break;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("manifest files row {line:?}")));
            }
            let id: usize = cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("manifest files row {line:?}")))?;
            let method = Method::from_id(cols[1])?;
            let record = records
                .iter_mut()
                .find(|r| r.image_id == id)
                .ok_or_else(|| Error::Format(format!("manifest files row for unknown image {id}")))?;
            let opt = |s: &str| if s == "-" { None } else { Some(s.to_string()) };
            record.files.push((method, opt(cols[2]), opt(cols[3])));
        }
        expect(&mut lines, "image_id,method,stage,message")?;
        let mut errors = Vec::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("manifest truncated in [errors]".into()))?;
            if line == "[exclusions]" {
                break;
            }
            let cols: Vec<&str> = line.splitn(4, ',').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("manifest errors row {line:?}")));
            }
            let id: usize = cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("manifest errors row {line:?}")))?;
            errors.push((id, Method::from_id(cols[1])?, cols[2].to_string(), cols[3].to_string()));
        }
        expect(&mut lines, "key,value")?;
        let mut exclusions = Vec::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("manifest truncated in [exclusions]".into()))?;
            if line == "[artifacts]" {
                break;
            }
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("manifest exclusions row {line:?}")))?;
            exclusions.push((
                k.to_string(),
                v.parse()
                    .map_err(|_| Error::Format(format!("manifest exclusions row {line:?}")))?,
            ));
        }
        let mut artifacts = Vec::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("manifest truncated in [artifacts]".into()))?;
            if line == "[end]" {
                break;
            }
            artifacts.push(line.to_string());
        }
        Ok(RunManifest {
            config_text,
            records,
            errors,
            exclusions,
            artifacts,
            timings: Vec::new(),
        })
    }

    /// Check manifest completeness: every referenced file exists and
    /// round-trips through its format reader.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for r in &self.records {
            for (method, map, mask) in &r.files {
                if let Some(rel) = map {
                    read_xatt(&out_dir.join(rel))?;
                }
                if let Some(rel) = mask {
                    read_xmsk(&out_dir.join(rel), *method)?;
                }
            }
        }
        for rel in &self.artifacts {
            let path = out_dir.join(rel);
            if rel.ends_with(".csv") {
                let metric = if rel.contains("cr_") { Metric::Cr } else { Metric::Iou };
                read_matrix_csv(&path, metric)?;
            } else if !path.exists() {
                return Err(Error::Io(
                    path.display().to_string(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "artifact missing"),
                ));
            }
        }
        Ok(())
    }
}

/// Run every stage end to end and assemble the manifest. Identical
/// `(config, seed)` always produce byte-identical artifacts; per-image
/// stage errors are recorded and the run continues.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    cfg.require_pairwise()?;
    let mut timings: Vec<(String, f64)> = Vec::new();
    let mut clock = |name: &str, t: Instant| {
        timings.push((name.to_string(), t.elapsed().as_secs_f64()));
    };

    let t = Instant::now();
    stage_gen_data(cfg)?;
    clock("gen-data", t);
    let t = Instant::now();
    stage_train(cfg)?;
    clock("train", t);
    let t = Instant::now();
    let attr = stage_attribute(cfg)?;
    clock("attribute", t);
    let t = Instant::now();
    let bin = stage_binarize(cfg)?;
    clock("binarize", t);
    let t = Instant::now();
    let cmp = stage_compare(cfg)?;
    clock("compare", t);
    let t = Instant::now();
    stage_report(cfg)?;
    clock("report", t);

    let mut errors: Vec<(usize, Method, String, String)> = Vec::new();
    for (i, method, msg) in &attr.failures {
        errors.push((*i, *method, "attribute".to_string(), msg.clone()));
    }
    for (i, method, msg) in &bin.failures {
        errors.push((*i, *method, "binarize".to_string(), msg.clone()));
    }

    let records = attr
        .predictions
        .iter()
        .map(|&(i, label, predicted, target)| {
            let files = cfg
                .methods
                .iter()
                .map(|&method| {
                    let map_rel = cfg.map_rel(i, method);
                    let mask_rel = cfg.mask_rel(i, method);
                    let map = cfg.out_dir.join(&map_rel).exists().then_some(map_rel);
                    let mask = cfg.out_dir.join(&mask_rel).exists().then_some(mask_rel);
                    (method, map, mask)
                })
                .collect();
            ImageRecord { image_id: i, label, predicted, target, files }
        })
        .collect();

    let mut artifacts = Vec::new();
    let mut scopes: Vec<Option<usize>> = vec![None];
    scopes.extend((0..cfg.n_classes).map(Some));
    for metric in [Metric::Iou, Metric::Cr] {
        for &class in &scopes {
            artifacts.push(cfg.matrix_rel(metric, class));
            artifacts.push(cfg.heatmap_rel(metric, class));
        }
    }

    let manifest = RunManifest {
        config_text: cfg.to_text(),
        records,
        errors,
        exclusions: cmp.exclusions,
        artifacts,
        timings,
    };
    manifest.verify(&cfg.out_dir)?;
    write_text(&cfg.manifest_path(), &manifest.to_text())?;
    let mut timing_text = String::from("stage,seconds\n");
    let mut total = 0.0;
    for (stage, secs) in &manifest.timings {
        timing_text.push_str(&format!("{stage},{secs:.3}\n"));
        total += secs;
    }
    timing_text.push_str(&format!("total,{total:.3}\n"));
    write_text(&cfg.timings_path(), &timing_text)?;
    Ok(manifest)
}
