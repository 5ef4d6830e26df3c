//! Structure-guided label refinement.
//!
//! The two networks' probabilities are mixed with a random convex weight,
//! averaged inside each superpixel, turned into a hard label, and spliced
//! into the noisy annotation wherever the small-loss selection did not trust
//! it.

use crate::error::{GsdError, Result};
use crate::grid::{argmax_pixelwise, same_hw, BinaryMask, LabelGrid, ProbGrid};
use crate::rng::SeededRng;
use crate::superpixel::SuperpixelGrid;

/// How fused probabilities become a hard label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Argmax of the region-mean probabilities.
    #[default]
    SuperpixelMean,
    /// Argmax of the fused per-pixel probabilities (no structural prior).
    PerPixel,
}

impl std::str::FromStr for Pooling {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "superpixel" | "superpixel-mean" => Ok(Pooling::SuperpixelMean),
            "pixel" | "per-pixel" => Ok(Pooling::PerPixel),
            _ => Err(GsdError::Config(format!("unknown pooling {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefineConfig {
    pub pooling: Pooling,
}

/// `alpha * p1 + (1 - alpha) * p2`.
pub fn fuse_predictions(p1: &ProbGrid, p2: &ProbGrid, alpha: f64) -> Result<ProbGrid> {
    p1.same_shape(p2)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GsdError::InvalidInput(format!("alpha {alpha} not in [0, 1]")));
    }
    let data = p1
        .data()
        .iter()
        .zip(p2.data())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Ok(ProbGrid::from_raw(p1.height(), p1.width(), p1.num_classes(), data))
}

/// Replaces every pixel by the mean probability of its superpixel.
pub fn superpixel_pool(fused: &ProbGrid, regions: &SuperpixelGrid) -> Result<ProbGrid> {
    same_hw(fused, regions)?;
    let c = fused.num_classes();
    let k = regions.num_regions();
    let mut sums = vec![0.0; k * c];
    let mut counts = vec![0usize; k];
    for (p, &r) in regions.data().iter().enumerate() {
        let r = r as usize;
        counts[r] += 1;
        for (acc, v) in sums[r * c..(r + 1) * c].iter_mut().zip(fused.pixel(p)) {
            *acc += v;
        }
    }
    for (r, &n) in counts.iter().enumerate() {
        for v in &mut sums[r * c..(r + 1) * c] {
            *v /= n.max(1) as f64;
        }
    }
    let mut data = Vec::with_capacity(fused.data().len());
    for &r in regions.data() {
        data.extend_from_slice(&sums[r as usize * c..(r as usize + 1) * c]);
    }
    Ok(ProbGrid::from_raw(fused.height(), fused.width(), c, data))
}

/// Hard labels from pooled probabilities (constant within each region).
pub fn superpixel_label(pooled: &ProbGrid) -> LabelGrid {
    argmax_pixelwise(pooled)
}

/// Noisy labels on the clean set, refined labels elsewhere.
pub fn compose_pseudolabel(noisy: &LabelGrid, refined: &LabelGrid, clean: &BinaryMask) -> Result<LabelGrid> {
    noisy.same_shape(refined)?;
    noisy.same_shape(clean)?;
    if noisy.num_classes() != refined.num_classes() {
        return Err(GsdError::shape(noisy.num_classes(), refined.num_classes()));
    }
    let data = noisy
        .data()
        .iter()
        .zip(refined.data())
        .zip(clean.data())
        .map(|((&n, &r), &m)| if m { n } else { r })
        .collect();
    LabelGrid::new(noisy.height(), noisy.width(), noisy.num_classes(), data)
}

/// Refinement with an explicit mixing weight.
pub fn sglr_with_alpha(
    p1: &ProbGrid,
    p2: &ProbGrid,
    regions: &SuperpixelGrid,
    noisy: &LabelGrid,
    clean: &BinaryMask,
    alpha: f64,
    cfg: &RefineConfig,
) -> Result<LabelGrid> {
    p1.check_labels(noisy)?;
    let fused = fuse_predictions(p1, p2, alpha)?;
    let refined = match cfg.pooling {
        Pooling::SuperpixelMean => superpixel_label(&superpixel_pool(&fused, regions)?),
        Pooling::PerPixel => argmax_pixelwise(&fused),
    };
    compose_pseudolabel(noisy, &refined, clean)
}

/// Draws `alpha ~ U(0, 1)` once and runs the full refinement chain.
pub fn sglr(
    p1: &ProbGrid,
    p2: &ProbGrid,
    regions: &SuperpixelGrid,
    noisy: &LabelGrid,
    clean: &BinaryMask,
    cfg: &RefineConfig,
    rng: &mut SeededRng,
) -> Result<LabelGrid> {
    let alpha = rng.uniform_open();
    sglr_with_alpha(p1, p2, regions, noisy, clean, alpha, cfg)
}
