//! The training loop: baselines, ablation settings and the full method.
//!
//! One iteration over a batch runs in two phases. Phase one handles each
//! image on its own: forward both networks (the second on a photometric
//! augmentation), select the small-loss pixels, weight them by distance to
//! the noisy boundary, refine the label, and backpropagate. Phase two pairs
//! the batch with a random derangement and trains both networks on the
//! fused composites. Per-item work may run on a thread pool; results are
//! merged in index order so the outcome does not depend on thread count.

use std::path::Path;

use crate::data_io::{Dataset, Sample};
use crate::error::{GsdError, Result};
use crate::eval::{dice_score, MetricRow};
use crate::geometry::{distance_to_boundary, extract_boundary, gda_weights, Connectivity, GdaConfig};
use crate::grid::{argmax_pixelwise, softmax_pixelwise, BinaryMask, ImageGrid, LabelGrid, ProbGrid, WeightGrid};
use crate::losses::{
    ce_pixelwise, gda_loss, retention_rate, select_clean, sup_loss, sym_kl_pixelwise, LossReport, SelectionSchedule,
};
use crate::model::{
    backward, forward, loss_grad_at_logits, predict, write_atomic, ByteReader, LossTerm, ModelConfig, ModelParams,
    ParamGradients,
};
use crate::refine::{sglr, Pooling, RefineConfig};
use crate::rng::{RngState, SeededRng};
use crate::superpixel::{slic, SlicConfig, SuperpixelGrid};
use crate::transfer::{
    cor_direction_loss, fuse_image, fuse_pair, kt_direction_loss, sample_region_mask_with, Direction, KtConfig,
    RegionShape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// One network, plain cross-entropy on the noisy labels.
    CeBaseline,
    /// Two networks, small-loss selection and co-regularisation.
    Jocor,
    /// Jocor plus distance-aware weights.
    Ablation2,
    /// Ablation2 plus per-pixel label refinement.
    Ablation3,
    /// Ablation2 plus superpixel label refinement.
    Ablation4,
    /// Ablation3 plus knowledge transfer.
    Ablation5,
    /// Everything: weights, superpixel refinement and knowledge transfer.
    Gsd,
}

/// Which components a mode enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeFlags {
    pub dual: bool,
    pub gda: bool,
    pub refine: Option<Pooling>,
    pub kt: bool,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::CeBaseline,
        TrainMode::Jocor,
        TrainMode::Ablation2,
        TrainMode::Ablation3,
        TrainMode::Ablation4,
        TrainMode::Ablation5,
        TrainMode::Gsd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::CeBaseline => "ce_baseline",
            TrainMode::Jocor => "jocor",
            TrainMode::Ablation2 => "ablation-2",
            TrainMode::Ablation3 => "ablation-3",
            TrainMode::Ablation4 => "ablation-4",
            TrainMode::Ablation5 => "ablation-5",
            TrainMode::Gsd => "gsd",
        }
    }

    pub fn flags(self) -> ModeFlags {
        let (dual, gda, refine, kt) = match self {
            TrainMode::CeBaseline => (false, false, None, false),
            TrainMode::Jocor => (true, false, None, false),
            TrainMode::Ablation2 => (true, true, None, false),
            TrainMode::Ablation3 => (true, true, Some(Pooling::PerPixel), false),
            TrainMode::Ablation4 => (true, true, Some(Pooling::SuperpixelMean), false),
            TrainMode::Ablation5 => (true, true, Some(Pooling::PerPixel), true),
            TrainMode::Gsd => (true, true, Some(Pooling::SuperpixelMean), true),
        };
        ModeFlags { dual, gda, refine, kt }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| GsdError::Config(format!("unknown mode {s:?}")))
    }
}

/// Where the selection budget `tau` comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauSource {
    /// Mean realised noise rate of the training split.
    Measured,
    /// This factor times the mean noisy foreground fraction.
    ForegroundFraction(f64),
    Explicit(f64),
}

impl std::fmt::Display for TauSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TauSource::Measured => f.write_str("measured"),
            TauSource::ForegroundFraction(k) => write!(f, "foreground:{k}"),
            TauSource::Explicit(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for TauSource {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GsdError::Config(format!("bad tau {s:?}: use measured, foreground[:k] or a number"));
        match s {
            "measured" => Ok(TauSource::Measured),
            "foreground" => Ok(TauSource::ForegroundFraction(0.15)),
            _ => match s.strip_prefix("foreground:") {
                Some(k) => k.parse().map(TauSource::ForegroundFraction).map_err(|_| bad()),
                None => s.parse().map(TauSource::Explicit).map_err(|_| bad()),
            },
        }
    }
}

/// Photometric augmentation: one additive offset per image plus pixel noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub intensity_jitter: f64,
    pub noise_sigma: f64,
    pub enabled: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            intensity_jitter: 0.1,
            noise_sigma: 0.02,
            enabled: true,
        }
    }
}

pub fn weak_augment(x: &ImageGrid, spec: &AugmentSpec, rng: &mut SeededRng) -> ImageGrid {
    if !spec.enabled {
        return x.clone();
    }
    let offset = rng.uniform_range(-spec.intensity_jitter, spec.intensity_jitter);
    let data = x
        .data()
        .iter()
        .map(|&v| v + offset + spec.noise_sigma * rng.normal())
        .collect();
    ImageGrid::from_clipped(x.height(), x.width(), x.channels(), data).expect("finite values")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Rescales each network's gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    pub tau: TauSource,
    pub warmup_epochs: usize,
    /// Weight cap `T`; the horizon `E` is `epochs`. `None` scales with the
    /// image side: 10 at 256, 5 at 128, 2.5 at 64 (never below 1).
    pub gda_cap: Option<f64>,
    pub connectivity: Connectivity,
    /// `None` picks one superpixel per 64 pixels.
    pub slic_segments: Option<usize>,
    pub slic_compactness: f64,
    pub slic_iters: usize,
    pub kt: KtConfig,
    pub augment: AugmentSpec,
    pub model: ModelConfig,
    pub seed: u64,
    /// Evaluate the mean of both networks' probabilities instead of network 1.
    pub ensemble: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Gsd,
            epochs: 100,
            batch_size: 8,
            learning_rate: 5e-3,
            weight_decay: 1e-5,
            momentum: 0.0,
            grad_clip: None,
            tau: TauSource::Measured,
            warmup_epochs: 10,
            gda_cap: None,
            connectivity: Connectivity::Four,
            slic_segments: None,
            slic_compactness: 10.0,
            slic_iters: 10,
            kt: KtConfig::default(),
            augment: AugmentSpec::default(),
            model: ModelConfig::default(),
            seed: 0,
            ensemble: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("warmup_epochs", self.warmup_epochs as f64),
            ("slic_iters", self.slic_iters as f64),
            ("slic_compactness", self.slic_compactness),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(GsdError::Config(format!("{k} must be positive")));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(GsdError::Config("need lr >= 0, weight_decay >= 0, 0 <= momentum < 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(GsdError::Config("grad_clip must be positive".into()));
        }
        if !(self.augment.intensity_jitter >= 0.0 && self.augment.noise_sigma >= 0.0) {
            return Err(GsdError::Config("augmentation magnitudes must be >= 0".into()));
        }
        if let Some(cap) = self.gda_cap {
            GdaConfig::new(cap, self.epochs)?;
        }
        self.kt.validate()?;
        self.model.validate()
    }

    pub fn gda_config(&self, height: usize, width: usize) -> Result<GdaConfig> {
        let cap = self
            .gda_cap
            .unwrap_or_else(|| (10.0 * height.max(width) as f64 / 256.0).max(1.0));
        let mut g = GdaConfig::new(cap, self.epochs)?;
        g.connectivity = self.connectivity;
        Ok(g)
    }

    pub fn slic_config(&self, height: usize, width: usize) -> SlicConfig {
        let mut s = SlicConfig::for_size(height, width);
        if let Some(n) = self.slic_segments {
            s.n_segments = n;
        }
        s.compactness = self.slic_compactness;
        s.max_iters = self.slic_iters;
        s
    }

    /// Serialises every field as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("mode = {}", self.mode),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("learning_rate = {}", self.learning_rate),
            format!("weight_decay = {}", self.weight_decay),
            format!("momentum = {}", self.momentum),
            format!("grad_clip = {}", self.grad_clip.map_or("none".to_string(), |c| c.to_string())),
            format!("tau = {}", self.tau),
            format!("warmup_epochs = {}", self.warmup_epochs),
            format!("gda_cap = {}", self.gda_cap.map_or("auto".to_string(), |c| c.to_string())),
            format!(
                "connectivity = {}",
                match self.connectivity {
                    Connectivity::Four => 4,
                    Connectivity::Eight => 8,
                }
            ),
            format!(
                "slic_segments = {}",
                self.slic_segments.map_or("auto".to_string(), |n| n.to_string())
            ),
            format!("slic_compactness = {}", self.slic_compactness),
            format!("slic_iters = {}", self.slic_iters),
            format!("kt_area_min = {}", self.kt.patch_area_range.0),
            format!("kt_area_max = {}", self.kt.patch_area_range.1),
            format!("kt_foreground_bias = {}", self.kt.foreground_bias),
            format!(
                "kt_region = {}",
                match self.kt.region_shape {
                    RegionShape::Rectangle => "rectangle",
                    RegionShape::Superpixel => "superpixel",
                }
            ),
            format!("augment = {}", self.augment.enabled),
            format!("augment_jitter = {}", self.augment.intensity_jitter),
            format!("augment_sigma = {}", self.augment.noise_sigma),
            format!("in_channels = {}", self.model.in_channels),
            format!("num_classes = {}", self.model.num_classes),
            format!("base_width = {}", self.model.base_width),
            format!("seed = {}", self.seed),
            format!("ensemble = {}", self.ensemble),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| GsdError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "mode" => self.mode = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "tau" => self.tau = value.parse()?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "grad_clip" => self.grad_clip = if value == "none" { None } else { Some(num(key, value)?) },
            "gda_cap" => self.gda_cap = if value == "auto" { None } else { Some(num(key, value)?) },
            "connectivity" => self.connectivity = value.parse()?,
            "slic_segments" => {
                self.slic_segments = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "slic_compactness" => self.slic_compactness = num(key, value)?,
            "slic_iters" => self.slic_iters = num(key, value)?,
            "kt_area_min" => self.kt.patch_area_range.0 = num(key, value)?,
            "kt_area_max" => self.kt.patch_area_range.1 = num(key, value)?,
            "kt_foreground_bias" => self.kt.foreground_bias = num(key, value)?,
            "kt_region" => self.kt.region_shape = value.parse()?,
            "augment" => self.augment.enabled = num(key, value)?,
            "augment_jitter" => self.augment.intensity_jitter = num(key, value)?,
            "augment_sigma" => self.augment.noise_sigma = num(key, value)?,
            "in_channels" => self.model.in_channels = num(key, value)?,
            "num_classes" => self.model.num_classes = num(key, value)?,
            "base_width" => self.model.base_width = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ensemble" => self.ensemble = num(key, value)?,
            _ => return Err(GsdError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; keys listed in `extra` are returned instead
    /// of being applied.
    pub fn parse(text: &str, extra: &[&str]) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = Self::default();
        let mut rest = Vec::new();
        for (line, k, v) in crate::data_io::kv_lines(text)? {
            if extra.contains(&k) {
                rest.push((k.to_string(), v.to_string()));
            } else {
                cfg.set(k, v).map_err(|e| GsdError::Config(format!("line {line}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok((cfg, rest))
    }
}

/// `theta - lr * (g + weight_decay * theta)`.
pub fn sgd_step(params: &ModelParams, grads: &ParamGradients, lr: f64, weight_decay: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    let opt = Optimiser {
        lr,
        weight_decay,
        momentum: 0.0,
        grad_clip: None,
    };
    apply_update(&mut out, grads, &opt, None)?;
    Ok(out)
}

struct Optimiser {
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    grad_clip: Option<f64>,
}

/// In-place update with optional heavy-ball momentum (`velocity` is updated).
fn apply_update(
    params: &mut ModelParams,
    grads: &ParamGradients,
    opt: &Optimiser,
    mut velocity: Option<&mut ParamGradients>,
) -> Result<()> {
    if !grads.matches(params) {
        return Err(GsdError::InvalidInput("gradient shapes do not match the model".into()));
    }
    if !grads.is_finite() {
        return Err(GsdError::NonFinite("parameter gradients".into()));
    }
    let norm = grads.weight.iter().chain(&grads.bias).flatten().map(|g| g * g).sum::<f64>().sqrt();
    let clip = match opt.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let (lr, weight_decay, momentum) = (opt.lr, opt.weight_decay, opt.momentum);
    for (li, layer) in params.layers_mut().iter_mut().enumerate() {
        let pairs = [(&mut layer.weight, &grads.weight[li]), (&mut layer.bias, &grads.bias[li])];
        for (slot, (theta, g)) in pairs.into_iter().enumerate() {
            for (i, (t, &gi)) in theta.iter_mut().zip(g).enumerate() {
                let mut step = clip * gi + weight_decay * *t as f64;
                if let Some(v) = velocity.as_deref_mut() {
                    let vel = if slot == 0 { &mut v.weight[li][i] } else { &mut v.bias[li][i] };
                    *vel = momentum * *vel + step;
                    step = *vel;
                }
                *t = (*t as f64 - lr * step) as f32;
            }
        }
    }
    if !params.is_finite() {
        return Err(GsdError::NonFinite("parameters after update".into()));
    }
    Ok(())
}

/// Which terms of the objective contribute to a gradient. Used by the
/// finite-difference suite to check each term on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub sup: bool,
    pub con: bool,
    pub kt_ce: bool,
    pub kt_dice: bool,
    pub cor: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        sup: true,
        con: true,
        kt_ce: true,
        kt_dice: true,
        cor: true,
    };
    pub const NONE: Terms = Terms {
        sup: false,
        con: false,
        kt_ce: false,
        kt_dice: false,
        cor: false,
    };
}

/// Logit gradients of `scale * L_GDA` for both networks.
pub fn gda_grads(
    p1: &ProbGrid,
    p2: &ProbGrid,
    noisy: &LabelGrid,
    w: &WeightGrid,
    clean: &BinaryMask,
    terms: Terms,
    scale: f64,
) -> Result<[crate::grid::LogitGrid; 2]> {
    let n = clean.count();
    if n == 0 {
        return Err(GsdError::Degenerate("empty clean set".into()));
    }
    let k = scale / n as f64;
    let one = |p: &ProbGrid, partner: &ProbGrid| {
        let mut t = Vec::new();
        if terms.sup {
            t.push(LossTerm::Ce {
                target: noisy,
                weights: Some(w),
                mask: Some(clean),
                scale: k,
            });
        }
        if terms.con {
            t.push(LossTerm::SymKl {
                partner,
                weights: Some(w),
                mask: Some(clean),
                scale: k,
            });
        }
        loss_grad_at_logits(p, &t)
    };
    Ok([one(p1, p2)?, one(p2, p1)?])
}

/// Logit gradients of `scale * (L_KT + L_cor)` restricted to one fused
/// direction, for both networks.
pub fn kt_grads(
    p1: &ProbGrid,
    p2: &ProbGrid,
    y: &LabelGrid,
    w: &WeightGrid,
    terms: Terms,
    scale: f64,
) -> Result<[crate::grid::LogitGrid; 2]> {
    let k = scale / p1.num_pixels() as f64;
    let one = |p: &ProbGrid, partner: &ProbGrid| {
        let mut t = Vec::new();
        if terms.kt_ce {
            t.push(LossTerm::Ce {
                target: y,
                weights: Some(w),
                mask: None,
                scale: k,
            });
        }
        if terms.kt_dice {
            t.push(LossTerm::Dice { target: y, scale });
        }
        if terms.cor {
            t.push(LossTerm::SymKl {
                partner,
                weights: Some(w),
                mask: None,
                scale: k,
            });
        }
        loss_grad_at_logits(p, &t)
    };
    Ok([one(p1, p2)?, one(p2, p1)?])
}

/// With knowledge transfer disabled, refined labels still supervise the
/// networks through the transfer losses with empty region masks. Every image
/// is then the target of two fused directions (its own pair's `2->1` and its
/// predecessor's `1->2`), hence the factor.
const IDENTITY_FUSION_MULTIPLICITY: f64 = 2.0;

/// Mean and inverse standard deviation of every pixel. Raw intensities are
/// all positive, and a single large step can then switch off every
/// first-layer unit at once; centred inputs avoid that.
pub(crate) fn input_normalisation<'a>(images: impl Iterator<Item = &'a ImageGrid> + Clone) -> (f64, f64) {
    let n: usize = images.clone().map(|x| x.data().len()).sum();
    let mean = images.clone().flat_map(|x| x.data()).sum::<f64>() / n as f64;
    let var = images.flat_map(|x| x.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    (mean, scale)
}

/// Per-image data that never changes during training.
#[derive(Clone, Debug)]
struct ImageCache {
    regions: Option<SuperpixelGrid>,
    raw_weights: Option<WeightGrid>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run (zero-based).
    pub epoch: usize,
    pub nets: Vec<ModelParams>,
    pub velocity: Option<Vec<ParamGradients>>,
    pub rng: RngState,
    pub history: Vec<MetricRow>,
}

/// Output of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome {
    pub row: MetricRow,
    /// One report per batch.
    pub iterations: Vec<LossReport>,
    pub mean_weight: f64,
}

struct ImageResult {
    grads: Vec<ParamGradients>,
    gda: f64,
    kt: f64,
    cor: f64,
    clean_fraction: f64,
    pseudo: Option<LabelGrid>,
    weights: WeightGrid,
    augmented: Option<ImageGrid>,
}

struct PairResult {
    grads: Vec<ParamGradients>,
    kt: f64,
    cor: f64,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    cache: Vec<ImageCache>,
    tau: f64,
    gda: GdaConfig,
    pool: Option<rayon::ThreadPool>,
}

/// Worker count from `GSD_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("GSD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        Self::with_threads(cfg, data, threads_from_env())
    }

    pub fn with_threads(mut cfg: TrainConfig, data: &'a Dataset, threads: usize) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(GsdError::InvalidInput("empty training split".into()));
        }
        for s in data.train.iter().chain(&data.test) {
            if s.image.channels() != cfg.model.in_channels || s.noisy.num_classes() != cfg.model.num_classes {
                return Err(GsdError::InvalidInput(
                    "dataset channels/classes do not match the model config".into(),
                ));
            }
        }
        let (shift, scale) = input_normalisation(data.train.iter().map(|s| &s.image));
        cfg.model.input_shift = shift;
        cfg.model.input_scale = scale;
        let flags = cfg.mode.flags();
        if flags.refine.is_some() && cfg.model.num_classes != 2 {
            return Err(GsdError::InvalidInput("refinement and transfer need binary labels".into()));
        }
        let tau = match cfg.tau {
            TauSource::Measured => data.mean_noise_rate()?,
            TauSource::ForegroundFraction(k) => k * data.mean_foreground_fraction(),
            TauSource::Explicit(v) => v,
        };
        SelectionSchedule::new(tau, cfg.warmup_epochs)?;
        let first = &data.train[0].image;
        let gda = cfg.gda_config(first.height(), first.width())?;
        let needs_regions = flags.refine == Some(Pooling::SuperpixelMean)
            || (flags.kt && cfg.kt.region_shape == RegionShape::Superpixel);
        let cache = data
            .train
            .iter()
            .map(|s| {
                let regions = if needs_regions {
                    Some(slic(&s.image, &cfg.slic_config(s.image.height(), s.image.width()))?)
                } else {
                    None
                };
                let raw_weights = flags
                    .gda
                    .then(|| distance_to_boundary(&s.noisy, &extract_boundary(&s.noisy, gda.connectivity), &gda));
                Ok(ImageCache { regions, raw_weights })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| GsdError::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            cfg,
            data,
            cache,
            tau,
            gda,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// The selection budget in use.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let n = if self.cfg.mode.flags().dual { 2 } else { 1 };
        let nets = (0..n)
            .map(|k| ModelParams::init(self.cfg.model, &mut SeededRng::fork(self.cfg.seed, 1 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let velocity = (self.cfg.momentum > 0.0).then(|| nets.iter().map(ParamGradients::zeros_like).collect());
        Ok(TrainState {
            epoch: 0,
            nets,
            velocity,
            rng: SeededRng::fork(self.cfg.seed, 0).state(),
            history: Vec::new(),
        })
    }

    fn map<T: Send, R: Send>(&self, items: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
        match &self.pool {
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.into_par_iter().map(&f).collect())
            }
            None => items.into_iter().map(f).collect(),
        }
    }

    fn schedule(&self) -> SelectionSchedule {
        SelectionSchedule {
            tau: self.tau,
            warmup_epochs: self.cfg.warmup_epochs,
        }
    }

    /// Retention rate at `epoch`.
    pub fn retention(&self, epoch: usize) -> f64 {
        retention_rate(epoch, &self.schedule())
    }

    fn weights_for(&self, idx: usize, epoch: usize) -> Result<WeightGrid> {
        let s = &self.data.train[idx];
        match &self.cache[idx].raw_weights {
            Some(raw) => gda_weights(raw, epoch, &self.gda),
            None => Ok(WeightGrid::filled(s.noisy.height(), s.noisy.width(), 1.0)),
        }
    }

    fn image_step(
        &self,
        nets: &[ModelParams],
        idx: usize,
        epoch: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<ImageResult> {
        let s: &Sample = &self.data.train[idx];
        let flags = self.cfg.mode.flags();
        let n_pix = s.noisy.len() as f64;
        if !flags.dual {
            let (logits, tape) = forward(&nets[0], &s.image)?;
            let p = softmax_pixelwise(&logits)?;
            let ce = ce_pixelwise(&p, &s.noisy)?.mean();
            let g = loss_grad_at_logits(
                &p,
                &[LossTerm::Ce {
                    target: &s.noisy,
                    weights: None,
                    mask: None,
                    scale: scale / n_pix,
                }],
            )?;
            return Ok(ImageResult {
                grads: vec![backward(&tape, &g)?],
                gda: ce,
                kt: 0.0,
                cor: 0.0,
                clean_fraction: 1.0,
                pseudo: None,
                weights: WeightGrid::filled(s.noisy.height(), s.noisy.width(), 1.0),
                augmented: None,
            });
        }

        let xa = weak_augment(&s.image, &self.cfg.augment, rng);
        let (l1, t1) = forward(&nets[0], &s.image)?;
        let (l2, t2) = forward(&nets[1], &xa)?;
        let (p1, p2) = (softmax_pixelwise(&l1)?, softmax_pixelwise(&l2)?);
        let l_sup = sup_loss(&p1, &p2, &s.noisy)?;
        let l_con = sym_kl_pixelwise(&p1, &p2)?;
        let clean = select_clean(&l_sup.add_scaled(&l_con, 1.0)?, self.retention(epoch))?;
        let w = self.weights_for(idx, epoch)?;
        let gda = gda_loss(&l_sup, &l_con, &clean, &w)?;
        let [mut g1, mut g2] = gda_grads(&p1, &p2, &s.noisy, &w, &clean, Terms::ALL, scale)?;

        let pseudo = match flags.refine {
            Some(pooling) => {
                let regions = match (&self.cache[idx].regions, pooling) {
                    (Some(r), _) => r.clone(),
                    // Per-pixel pooling ignores the regions; any partition will do.
                    (None, _) => SuperpixelGrid::new(s.noisy.height(), s.noisy.width(), vec![0; s.noisy.len()])?,
                };
                Some(sglr(&p1, &p2, &regions, &s.noisy, &clean, &RefineConfig { pooling }, rng)?)
            }
            None => None,
        };

        let (mut kt, mut cor) = (0.0, 0.0);
        if let (Some(y), false) = (&pseudo, flags.kt) {
            let m = IDENTITY_FUSION_MULTIPLICITY;
            kt = m * kt_direction_loss(&p1, &p2, y, &w)?;
            cor = m * cor_direction_loss(&p1, &p2, &w)?;
            let [k1, k2] = kt_grads(&p1, &p2, y, &w, Terms::ALL, m * scale)?;
            g1.add_assign(&k1);
            g2.add_assign(&k2);
        }

        Ok(ImageResult {
            grads: vec![backward(&t1, &g1)?, backward(&t2, &g2)?],
            gda,
            kt,
            cor,
            clean_fraction: clean.count() as f64 / n_pix,
            pseudo,
            weights: w,
            augmented: Some(xa),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn pair_step(
        &self,
        nets: &[ModelParams],
        (i, j): (usize, usize),
        (ri, rj): (&ImageResult, &ImageResult),
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<PairResult> {
        let (si, sj) = (&self.data.train[i], &self.data.train[j]);
        let (yi, yj) = (
            ri.pseudo.as_ref().expect("refined label"),
            rj.pseudo.as_ref().expect("refined label"),
        );
        let m1 = sample_region_mask_with(yi, self.cache[i].regions.as_ref(), &self.cfg.kt, rng)?;
        let m2 = sample_region_mask_with(yj, self.cache[j].regions.as_ref(), &self.cfg.kt, rng)?;
        let fused = fuse_pair(&si.image, &sj.image, yi, yj, &ri.weights, &rj.weights, &m1, &m2)?;
        let (ai, aj) = (
            ri.augmented.as_ref().expect("augmented image"),
            rj.augmented.as_ref().expect("augmented image"),
        );
        let aug = [fuse_image(ai, aj, &m1)?, fuse_image(aj, ai, &m2)?];

        let mut grads = vec![ParamGradients::zeros_like(&nets[0]), ParamGradients::zeros_like(&nets[1])];
        let (mut kt, mut cor) = (0.0, 0.0);
        for (d, xa) in Direction::BOTH.into_iter().zip(&aug) {
            let (y, w) = (fused.labels(d), fused.weights(d));
            let (l1, t1) = forward(&nets[0], fused.image(d))?;
            let (l2, t2) = forward(&nets[1], xa)?;
            let (p1, p2) = (softmax_pixelwise(&l1)?, softmax_pixelwise(&l2)?);
            kt += kt_direction_loss(&p1, &p2, y, w)?;
            cor += cor_direction_loss(&p1, &p2, w)?;
            let [g1, g2] = kt_grads(&p1, &p2, y, w, Terms::ALL, scale)?;
            grads[0].add_assign(&backward(&t1, &g1)?);
            grads[1].add_assign(&backward(&t2, &g2)?);
        }
        Ok(PairResult { grads, kt, cor })
    }

    /// One pass over the training split; updates `state` in place.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochOutcome> {
        let epoch = state.epoch;
        if epoch >= self.cfg.epochs {
            return Err(GsdError::InvalidInput(format!("epoch {epoch} beyond configured {}", self.cfg.epochs)));
        }
        let flags = self.cfg.mode.flags();
        let mut rng = SeededRng::from_state(state.rng);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        rng.shuffle(&mut order);

        let mut iterations = Vec::new();
        let mut weight_sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let batch_seed = rng.next_u64();
            let b = batch.len();
            let scale = 1.0 / b as f64;
            let nets = &state.nets;
            let work: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
            let images = self.map(work, |(k, idx)| {
                let mut r = SeededRng::fork(batch_seed, k as u64);
                self.image_step(nets, idx, epoch, scale, &mut r)
            })?;

            let mut grads: Vec<ParamGradients> = nets.iter().map(ParamGradients::zeros_like).collect();
            let (mut gda, mut kt, mut cor, mut clean) = (0.0, 0.0, 0.0, 0.0);
            for r in &images {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
                gda += r.gda;
                kt += r.kt;
                cor += r.cor;
                clean += r.clean_fraction;
                weight_sum += r.weights.mean();
            }

            if flags.kt {
                let perm = SeededRng::fork(batch_seed, u64::MAX).derangement(b);
                let pairs: Vec<usize> = (0..b).collect();
                let results = self.map(pairs, |k| {
                    let mut r = SeededRng::fork(batch_seed, (b + k) as u64);
                    let other = perm[k];
                    self.pair_step(
                        nets,
                        (batch[k], batch[other]),
                        (&images[k], &images[other]),
                        scale,
                        &mut r,
                    )
                })?;
                for r in &results {
                    for (acc, g) in grads.iter_mut().zip(&r.grads) {
                        acc.add_assign(g);
                    }
                    kt += r.kt;
                    cor += r.cor;
                }
            }

            let report = LossReport::new(gda * scale, kt * scale, cor * scale, clean * scale);
            if !report.total.is_finite() {
                return Err(GsdError::NonFinite(format!("loss at epoch {epoch}")));
            }
            iterations.push(report);

            let opt = Optimiser {
                lr: self.cfg.learning_rate,
                weight_decay: self.cfg.weight_decay,
                momentum: self.cfg.momentum,
                grad_clip: self.cfg.grad_clip,
            };
            for (k, (net, g)) in state.nets.iter_mut().zip(&grads).enumerate() {
                let vel = state.velocity.as_mut().map(|v| &mut v[k]);
                apply_update(net, g, &opt, vel)?;
            }
        }

        let n_iter = iterations.len() as f64;
        let mean = |f: fn(&LossReport) -> f64| iterations.iter().map(f).sum::<f64>() / n_iter;
        let test_dice = self.evaluate(&state.nets)?;
        let row = MetricRow {
            epoch,
            mode: self.cfg.mode.as_str().to_string(),
            seed: self.cfg.seed,
            l_gda: mean(|r| r.gda),
            l_kt: mean(|r| r.kt),
            l_cor: mean(|r| r.cor),
            l_total: mean(|r| r.total),
            clean_fraction: mean(|r| r.clean_fraction),
            test_dice,
        };
        state.rng = rng.state();
        state.epoch += 1;
        state.history.push(row.clone());
        Ok(EpochOutcome {
            row,
            iterations,
            mean_weight: weight_sum / self.data.train.len() as f64,
        })
    }

    /// Probabilities used for evaluation: network 1, or the mean of both.
    pub fn predict_probs(&self, nets: &[ModelParams], x: &ImageGrid) -> Result<ProbGrid> {
        let p1 = softmax_pixelwise(&predict(&nets[0], x)?)?;
        if !(self.cfg.ensemble && nets.len() > 1) {
            return Ok(p1);
        }
        let p2 = softmax_pixelwise(&predict(&nets[1], x)?)?;
        crate::refine::fuse_predictions(&p1, &p2, 0.5)
    }

    /// Mean per-image test Dice against the clean labels, in percent.
    pub fn evaluate(&self, nets: &[ModelParams]) -> Result<f64> {
        if self.data.test.is_empty() {
            return Ok(0.0);
        }
        let idx: Vec<usize> = (0..self.data.test.len()).collect();
        let scores = self.map(idx, |k| {
            let s = &self.data.test[k];
            dice_score(&argmax_pixelwise(&self.predict_probs(nets, &s.image)?), &s.clean)
        })?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Runs epochs until `until` (exclusive) or the configured total.
    pub fn run_until(
        &self,
        state: &mut TrainState,
        until: usize,
        mut on_epoch: impl FnMut(&TrainState, &EpochOutcome) -> Result<()>,
    ) -> Result<()> {
        while state.epoch < until.min(self.cfg.epochs) {
            let out = self.run_epoch(state)?;
            on_epoch(state, &out)?;
        }
        Ok(())
    }
}

/// Trains from scratch for the configured number of epochs.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<MetricRow>)> {
    let trainer = Trainer::new(cfg.clone(), data)?;
    let mut state = trainer.init_state()?;
    trainer.run_until(&mut state, cfg.epochs, |_, _| Ok(()))?;
    let rows = state.history.clone();
    Ok((state, rows))
}

const CKPT_MAGIC: &[u8; 4] = b"GSDC";
const CKPT_VERSION: u32 = 1;

/// Training checkpoint (`GSDC`, little-endian):
///
/// ```text
/// "GSDC" | u32 version | u32 epoch | u64 seed | u64 stream | u128 word_pos
/// u32 nets | per net: u32 len | GSDM bytes
/// u8 has_velocity | per net: f64 values in flat order
/// u32 rows | per row: u32 epoch | u64 seed | u32 len | mode | 6 x f64
/// ```
pub fn checkpoint_to_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.epoch as u32).to_le_bytes());
    out.extend_from_slice(&state.rng.seed.to_le_bytes());
    out.extend_from_slice(&state.rng.stream.to_le_bytes());
    out.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    out.extend_from_slice(&(state.nets.len() as u32).to_le_bytes());
    for n in &state.nets {
        let b = n.to_bytes();
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(&b);
    }
    match &state.velocity {
        Some(v) => {
            out.push(1);
            for g in v {
                for x in g.flat() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    out.extend_from_slice(&(state.history.len() as u32).to_le_bytes());
    for row in &state.history {
        out.extend_from_slice(&(row.epoch as u32).to_le_bytes());
        out.extend_from_slice(&row.seed.to_le_bytes());
        out.extend_from_slice(&(row.mode.len() as u32).to_le_bytes());
        out.extend_from_slice(row.mode.as_bytes());
        for v in row_values(row) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn row_values(r: &MetricRow) -> [f64; 6] {
    [r.l_gda, r.l_kt, r.l_cor, r.l_total, r.clean_fraction, r.test_dice]
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(GsdError::Format {
            offset: 0,
            message: "bad magic, expected GSDC".into(),
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(GsdError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let epoch = r.u32()? as usize;
    let u64_at = |r: &mut ByteReader| -> Result<u64> { Ok(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))) };
    let seed = u64_at(&mut r)?;
    let stream = u64_at(&mut r)?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let n = r.u32()? as usize;
    let mut nets = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        nets.push(ModelParams::from_bytes(r.take(len)?)?);
    }
    let velocity = match r.take(1)?[0] {
        0 => None,
        1 => {
            let mut v = Vec::with_capacity(n);
            for net in &nets {
                let mut g = ParamGradients::zeros_like(net);
                for vec in g.weight.iter_mut().zip(g.bias.iter_mut()).flat_map(|(a, b)| [a, b]) {
                    for x in vec.iter_mut() {
                        *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    }
                }
                v.push(g);
            }
            Some(v)
        }
        other => {
            return Err(GsdError::Format {
                offset: r.pos - 1,
                message: format!("bad velocity flag {other}"),
            })
        }
    };
    let rows = r.u32()? as usize;
    let mut history = Vec::with_capacity(rows.min(1 << 16));
    for _ in 0..rows {
        let epoch = r.u32()? as usize;
        let seed = u64_at(&mut r)?;
        let len = r.u32()? as usize;
        let mode = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| GsdError::Format {
            offset: r.pos - len,
            message: "mode name is not UTF-8".into(),
        })?;
        let mut v = [0.0; 6];
        for x in v.iter_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
        history.push(MetricRow {
            epoch,
            mode,
            seed,
            l_gda: v[0],
            l_kt: v[1],
            l_cor: v[2],
            l_total: v[3],
            clean_fraction: v[4],
            test_dice: v[5],
        });
    }
    if r.pos != bytes.len() {
        return Err(GsdError::Format {
            offset: r.pos,
            message: "trailing bytes".into(),
        });
    }
    Ok(TrainState {
        epoch,
        nets,
        velocity,
        rng: RngState { seed, stream, word_pos },
        history,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| GsdError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
