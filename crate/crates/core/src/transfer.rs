//! Knowledge transfer: copy a region of one training image (and its label
//! and weight map) into a partner image, then supervise both networks on the
//! composites.

use crate::error::{GsdError, Result};
use crate::grid::{same_hw, BinaryMask, ImageGrid, LabelGrid, ProbGrid, WeightGrid};
use crate::losses::{dice_loss, weighted_ce_mean, weighted_sym_kl_mean};
use crate::rng::SeededRng;
use crate::superpixel::SuperpixelGrid;

/// Shape of the transferred region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegionShape {
    #[default]
    Rectangle,
    /// The rectangle snapped to the superpixels it mostly covers.
    Superpixel,
}

impl std::str::FromStr for RegionShape {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(RegionShape::Rectangle),
            "superpixel" => Ok(RegionShape::Superpixel),
            _ => Err(GsdError::Config(format!("unknown region shape {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KtConfig {
    /// Rectangle area as a fraction of the image, `(min, max)`.
    pub patch_area_range: (f64, f64),
    /// Centre on foreground with probability equal to the foreground fraction.
    pub foreground_bias: bool,
    pub region_shape: RegionShape,
}

impl Default for KtConfig {
    fn default() -> Self {
        Self {
            patch_area_range: (0.1, 0.4),
            foreground_bias: true,
            region_shape: RegionShape::Rectangle,
        }
    }
}

impl KtConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.patch_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(GsdError::Config(format!("patch_area_range ({lo}, {hi}) needs 0 < min <= max < 1")));
        }
        Ok(())
    }
}

/// An axis-aligned rectangle before clipping; may extend past the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: i64,
    pub left: i64,
    pub height: i64,
    pub width: i64,
}

impl Rect {
    pub fn area(&self) -> i64 {
        self.height * self.width
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let (i, j) = (i as i64, j as i64);
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }

    pub fn to_mask(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |i, j| self.contains(i, j))
    }
}

/// Draws the rectangle for one region. The integer sides are chosen so the
/// unclipped area stays inside `patch_area_range`.
pub fn sample_region_rect(y: &LabelGrid, cfg: &KtConfig, rng: &mut SeededRng) -> Result<Rect> {
    cfg.validate()?;
    let (h, w) = (y.height(), y.width());
    let n = (h * w) as f64;
    let (lo, hi) = cfg.patch_area_range;
    let frac = rng.uniform_range(lo, hi);
    let aspect = (rng.uniform_range(0.5f64.ln(), 2.0f64.ln())).exp();
    let area = frac * n;
    let rh = ((area * aspect).sqrt().round() as i64).max(1);
    let mut rw = ((area / rh as f64).round() as i64).max(1);
    let (min_a, max_a) = ((lo * n).ceil() as i64, (hi * n).floor() as i64);
    let (wmin, wmax) = ((min_a + rh - 1) / rh, max_a / rh);
    if wmin <= wmax {
        rw = rw.clamp(wmin.max(1), wmax.max(1));
    }

    let fg: Vec<usize> = (0..h * w).filter(|&p| y.data()[p] != 0).collect();
    let use_fg = if cfg.foreground_bias {
        !fg.is_empty() && rng.coin(fg.len() as f64 / n)
    } else {
        !fg.is_empty() && rng.coin(0.5)
    };
    let centre = if use_fg {
        fg[rng.below(fg.len())]
    } else {
        let bg: Vec<usize> = (0..h * w).filter(|&p| y.data()[p] == 0).collect();
        if bg.is_empty() {
            rng.below(h * w)
        } else {
            bg[rng.below(bg.len())]
        }
    };
    let (ci, cj) = ((centre / w) as i64, (centre % w) as i64);
    Ok(Rect {
        top: ci - rh / 2,
        left: cj - rw / 2,
        height: rh,
        width: rw,
    })
}

/// Region mask for one image, clipped to the image bounds.
pub fn sample_region_mask(y: &LabelGrid, cfg: &KtConfig, rng: &mut SeededRng) -> Result<BinaryMask> {
    Ok(sample_region_rect(y, cfg, rng)?.to_mask(y.height(), y.width()))
}

/// Like [`sample_region_mask`], with `RegionShape::Superpixel` snapping the
/// rectangle to every superpixel that has at least half its pixels inside.
pub fn sample_region_mask_with(
    y: &LabelGrid,
    regions: Option<&SuperpixelGrid>,
    cfg: &KtConfig,
    rng: &mut SeededRng,
) -> Result<BinaryMask> {
    let rect = sample_region_rect(y, cfg, rng)?;
    let (h, w) = (y.height(), y.width());
    match (cfg.region_shape, regions) {
        (RegionShape::Rectangle, _) => Ok(rect.to_mask(h, w)),
        (RegionShape::Superpixel, None) => Err(GsdError::Config("superpixel regions need a superpixel grid".into())),
        (RegionShape::Superpixel, Some(s)) => {
            same_hw(y, s)?;
            let sizes = s.region_sizes();
            let mut inside = vec![0usize; sizes.len()];
            for (p, &r) in s.data().iter().enumerate() {
                if rect.contains(p / w, p % w) {
                    inside[r as usize] += 1;
                }
            }
            let keep: Vec<bool> = inside.iter().zip(&sizes).map(|(&a, &n)| 2 * a >= n && a > 0).collect();
            Ok(BinaryMask::from_fn(h, w, |i, j| keep[s.get(i, j) as usize]))
        }
    }
}

/// Pixel selection: `inner` where `mask`, `outer` elsewhere.
fn select<T: Copy>(inner: &[T], outer: &[T], mask: &[bool], per_pixel: usize) -> Vec<T> {
    let mut out = outer.to_vec();
    for (p, &m) in mask.iter().enumerate() {
        if m {
            out[p * per_pixel..(p + 1) * per_pixel].copy_from_slice(&inner[p * per_pixel..(p + 1) * per_pixel]);
        }
    }
    out
}

/// `x_{i->j}`: `x_i` inside `m_i`, `x_j` outside.
pub fn fuse_image(xi: &ImageGrid, xj: &ImageGrid, mi: &BinaryMask) -> Result<ImageGrid> {
    same_hw(xi, xj)?;
    same_hw(xi, mi)?;
    if xi.channels() != xj.channels() {
        return Err(GsdError::shape(xi.channels(), xj.channels()));
    }
    let c = xi.channels();
    ImageGrid::new(xi.height(), xi.width(), c, select(xi.data(), xj.data(), mi.data(), c))
}

pub fn fuse_labels(yi: &LabelGrid, yj: &LabelGrid, mi: &BinaryMask) -> Result<LabelGrid> {
    yi.same_shape(yj)?;
    yi.same_shape(mi)?;
    if yi.num_classes() != yj.num_classes() {
        return Err(GsdError::shape(yi.num_classes(), yj.num_classes()));
    }
    LabelGrid::new(yi.height(), yi.width(), yi.num_classes(), select(yi.data(), yj.data(), mi.data(), 1))
}

pub fn fuse_weights(wi: &WeightGrid, wj: &WeightGrid, mi: &BinaryMask) -> Result<WeightGrid> {
    same_hw(wi, wj)?;
    same_hw(wi, mi)?;
    WeightGrid::new(wi.height(), wi.width(), select(wi.data(), wj.data(), mi.data(), 1))
}

/// Both fusion directions of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPair {
    pub x_1to2: ImageGrid,
    pub x_2to1: ImageGrid,
    pub y_1to2: LabelGrid,
    pub y_2to1: LabelGrid,
    pub w_1to2: WeightGrid,
    pub w_2to1: WeightGrid,
    pub m_1: BinaryMask,
    pub m_2: BinaryMask,
}

#[allow(clippy::too_many_arguments)]
pub fn fuse_pair(
    x1: &ImageGrid,
    x2: &ImageGrid,
    y1: &LabelGrid,
    y2: &LabelGrid,
    w1: &WeightGrid,
    w2: &WeightGrid,
    m1: &BinaryMask,
    m2: &BinaryMask,
) -> Result<FusedPair> {
    Ok(FusedPair {
        x_1to2: fuse_image(x1, x2, m1)?,
        x_2to1: fuse_image(x2, x1, m2)?,
        y_1to2: fuse_labels(y1, y2, m1)?,
        y_2to1: fuse_labels(y2, y1, m2)?,
        w_1to2: fuse_weights(w1, w2, m1)?,
        w_2to1: fuse_weights(w2, w1, m2)?,
        m_1: m1.clone(),
        m_2: m2.clone(),
    })
}

/// The two fusion directions, in the order `[1->2, 2->1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    OneToTwo,
    TwoToOne,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::OneToTwo, Direction::TwoToOne];
}

impl FusedPair {
    pub fn image(&self, d: Direction) -> &ImageGrid {
        match d {
            Direction::OneToTwo => &self.x_1to2,
            Direction::TwoToOne => &self.x_2to1,
        }
    }
    pub fn labels(&self, d: Direction) -> &LabelGrid {
        match d {
            Direction::OneToTwo => &self.y_1to2,
            Direction::TwoToOne => &self.y_2to1,
        }
    }
    pub fn weights(&self, d: Direction) -> &WeightGrid {
        match d {
            Direction::OneToTwo => &self.w_1to2,
            Direction::TwoToOne => &self.w_2to1,
        }
    }
}

/// Supervision of one fused direction: weighted CE plus Dice for each network.
pub fn kt_direction_loss(p1: &ProbGrid, p2: &ProbGrid, y: &LabelGrid, w: &WeightGrid) -> Result<f64> {
    Ok(weighted_ce_mean(p1, y, w)? + dice_loss(p1, y)? + weighted_ce_mean(p2, y, w)? + dice_loss(p2, y)?)
}

/// Consistency of one fused direction: weighted symmetric KL.
pub fn cor_direction_loss(p1: &ProbGrid, p2: &ProbGrid, w: &WeightGrid) -> Result<f64> {
    weighted_sym_kl_mean(p1, p2, w)
}

/// `L_KT` summed over both directions. `p1[d]` is network 1 on the fused
/// original of direction `d`, `p2[d]` network 2 on the fused augmented image.
pub fn kt_loss(p1: [&ProbGrid; 2], p2: [&ProbGrid; 2], fused: &FusedPair) -> Result<f64> {
    let mut total = 0.0;
    for (k, d) in Direction::BOTH.into_iter().enumerate() {
        total += kt_direction_loss(p1[k], p2[k], fused.labels(d), fused.weights(d))?;
    }
    Ok(total)
}

/// `L_cor` summed over both directions, indexed as in [`kt_loss`].
pub fn cor_loss(p1: [&ProbGrid; 2], p2: [&ProbGrid; 2], fused: &FusedPair) -> Result<f64> {
    let mut total = 0.0;
    for (k, d) in Direction::BOTH.into_iter().enumerate() {
        total += cor_direction_loss(p1[k], p2[k], fused.weights(d))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{clamped_ln, one_hot, softmax_pixelwise, LogitGrid};
    use crate::losses::DICE_EPS;
    use proptest::prelude::*;

    fn random_image(rng: &mut SeededRng, h: usize, w: usize) -> ImageGrid {
        ImageGrid::new(h, w, 1, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }
    fn random_labels(rng: &mut SeededRng, h: usize, w: usize) -> LabelGrid {
        LabelGrid::new(h, w, 2, (0..h * w).map(|_| rng.below(2) as u8).collect()).unwrap()
    }
    fn random_weights(rng: &mut SeededRng, h: usize, w: usize) -> WeightGrid {
        WeightGrid::new(h, w, (0..h * w).map(|_| 1.0 + 4.0 * rng.uniform()).collect()).unwrap()
    }
    fn random_probs(rng: &mut SeededRng, h: usize, w: usize) -> ProbGrid {
        let l: Vec<f64> = (0..h * w * 2).map(|_| rng.normal() * 2.0).collect();
        softmax_pixelwise(&LogitGrid::new(h, w, 2, l).unwrap()).unwrap()
    }
    fn random_mask(rng: &mut SeededRng, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.coin(0.5))
    }

    struct Pair {
        x: [ImageGrid; 2],
        y: [LabelGrid; 2],
        w: [WeightGrid; 2],
        m: [BinaryMask; 2],
    }

    fn random_pair(rng: &mut SeededRng, h: usize, w: usize) -> Pair {
        Pair {
            x: [random_image(rng, h, w), random_image(rng, h, w)],
            y: [random_labels(rng, h, w), random_labels(rng, h, w)],
            w: [random_weights(rng, h, w), random_weights(rng, h, w)],
            m: [random_mask(rng, h, w), random_mask(rng, h, w)],
        }
    }

    fn fuse(p: &Pair) -> FusedPair {
        fuse_pair(&p.x[0], &p.x[1], &p.y[0], &p.y[1], &p.w[0], &p.w[1], &p.m[0], &p.m[1]).unwrap()
    }

    #[test]
    fn empty_and_full_masks() {
        let mut rng = SeededRng::new(1);
        let mut p = random_pair(&mut rng, 6, 5);
        p.m = [BinaryMask::filled(6, 5, false), BinaryMask::filled(6, 5, false)];
        let f = fuse(&p);
        assert_eq!(f.x_1to2, p.x[1]);
        assert_eq!(f.x_2to1, p.x[0]);
        assert_eq!(f.y_1to2, p.y[1]);
        assert_eq!(f.w_2to1, p.w[0]);
        p.m = [BinaryMask::filled(6, 5, true), BinaryMask::filled(6, 5, true)];
        let f = fuse(&p);
        assert_eq!(f.x_1to2, p.x[0]);
        assert_eq!(f.x_2to1, p.x[1]);
        assert_eq!(f.y_2to1, p.y[1]);
        assert_eq!(f.w_1to2, p.w[0]);
    }

    #[test]
    fn checkerboard_matches_pixel_oracle() {
        let mut rng = SeededRng::new(2);
        let mut p = random_pair(&mut rng, 7, 9);
        p.m[0] = BinaryMask::from_fn(7, 9, |i, j| (i + j) % 2 == 0);
        p.m[1] = p.m[0].complement();
        let f = fuse(&p);
        for i in 0..7 {
            for j in 0..9 {
                // m_2 is the complement of m_1, so both directions take the same source.
                let (a, b) = if (i + j) % 2 == 0 { (0, 0) } else { (1, 1) };
                assert_eq!(f.x_1to2.get(i, j, 0), p.x[a].get(i, j, 0));
                assert_eq!(f.y_1to2.get(i, j), p.y[a].get(i, j));
                assert_eq!(f.w_1to2.get(i, j), p.w[a].get(i, j));
                assert_eq!(f.x_2to1.get(i, j, 0), p.x[b].get(i, j, 0));
                assert_eq!(f.y_2to1.get(i, j), p.y[b].get(i, j));
                assert_eq!(f.w_2to1.get(i, j), p.w[b].get(i, j));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ImageGrid::filled(4, 4, 1, 0.0);
        let b = ImageGrid::filled(4, 5, 1, 0.0);
        assert!(fuse_image(&a, &b, &BinaryMask::filled(4, 4, false)).is_err());
    }

    #[test]
    fn all_background_forces_background_centre() {
        let y = LabelGrid::filled(32, 32, 2, 0);
        let cfg = KtConfig::default();
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let r = sample_region_rect(&y, &cfg, &mut rng).unwrap();
            let a = r.area() as f64 / 1024.0;
            assert!((0.1..=0.4).contains(&a), "area fraction {a}");
        }
    }

    #[test]
    fn foreground_bias_tracks_foreground_fraction() {
        // A quarter of the image is foreground; count centres landing there.
        let y = LabelGrid::new(32, 32, 2, (0..1024).map(|p| (p % 32 < 8) as u8).collect()).unwrap();
        let cfg = KtConfig::default();
        let mut rng = SeededRng::new(4);
        let trials = 4000;
        let mut hits = 0;
        for _ in 0..trials {
            let r = sample_region_rect(&y, &cfg, &mut rng).unwrap();
            let cj = r.left + r.width / 2;
            hits += (cj < 8) as usize;
        }
        let frac = hits as f64 / trials as f64;
        assert!((frac - 0.25).abs() < 0.03, "foreground centre rate {frac}");
    }

    #[test]
    fn sampled_areas_stay_in_range() {
        let mut rng = SeededRng::new(5);
        for (h, w) in [(64, 64), (8, 8), (16, 40)] {
            let y = random_labels(&mut rng, h, w);
            let cfg = KtConfig::default();
            for _ in 0..200 {
                let r = sample_region_rect(&y, &cfg, &mut rng).unwrap();
                let a = r.area() as f64 / (h * w) as f64;
                assert!((0.1..=0.4).contains(&a), "{h}x{w}: area fraction {a}");
            }
        }
    }

    #[test]
    fn seeded_masks_repeat() {
        let y = random_labels(&mut SeededRng::new(6), 20, 20);
        let cfg = KtConfig::default();
        let a = sample_region_mask(&y, &cfg, &mut SeededRng::new(9)).unwrap();
        let b = sample_region_mask(&y, &cfg, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn superpixel_regions_are_unions_of_superpixels() {
        let y = LabelGrid::filled(8, 8, 2, 0);
        let s = SuperpixelGrid::new(8, 8, (0..64).map(|p| ((p / 8) / 4 * 2 + (p % 8) / 4) as u32).collect()).unwrap();
        let cfg = KtConfig {
            region_shape: RegionShape::Superpixel,
            ..KtConfig::default()
        };
        let mut rng = SeededRng::new(7);
        for _ in 0..20 {
            let m = sample_region_mask_with(&y, Some(&s), &cfg, &mut rng).unwrap();
            for p in 0..64 {
                for q in 0..64 {
                    if s.data()[p] == s.data()[q] {
                        assert_eq!(m.data()[p], m.data()[q]);
                    }
                }
            }
        }
        assert!(sample_region_mask_with(&y, None, &cfg, &mut rng).is_err());
    }

    #[test]
    fn invalid_area_range_is_rejected() {
        let cfg = KtConfig {
            patch_area_range: (0.5, 0.2),
            ..KtConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn perfect_predictions_leave_dice_residual_only() {
        let mut rng = SeededRng::new(8);
        let p = random_pair(&mut rng, 16, 16);
        let f = fuse(&p);
        let p12 = one_hot(&f.y_1to2);
        let p21 = one_hot(&f.y_2to1);
        let kt = kt_loss([&p12, &p21], [&p12, &p21], &f).unwrap();
        assert!(kt < 1e-3, "{kt}");
        assert_eq!(cor_loss([&p12, &p21], [&p12, &p21], &f).unwrap(), 0.0);
    }

    #[test]
    fn unit_weights_give_plain_ce() {
        let mut rng = SeededRng::new(10);
        let p = random_probs(&mut rng, 8, 8);
        let y = random_labels(&mut rng, 8, 8);
        let ones = WeightGrid::filled(8, 8, 1.0);
        let plain: f64 = (0..64).map(|q| -clamped_ln(p.pixel(q)[y.data()[q] as usize])).sum::<f64>() / 64.0;
        assert!((weighted_ce_mean(&p, &y, &ones).unwrap() - plain).abs() < 1e-12);
    }

    fn kt_reference(p1: [&ProbGrid; 2], p2: [&ProbGrid; 2], f: &FusedPair) -> (f64, f64) {
        let (mut kt, mut cor) = (0.0, 0.0);
        for (k, d) in Direction::BOTH.into_iter().enumerate() {
            let (y, w) = (f.labels(d), f.weights(d));
            let n = y.len() as f64;
            for p in [p1[k], p2[k]] {
                let (mut ce, mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0, 0.0);
                for q in 0..y.len() {
                    let t = y.data()[q] as usize;
                    ce += -p.pixel(q)[t].max(1e-7).ln() * w.data()[q];
                    let fg = (t == 1) as u8 as f64;
                    inter += p.pixel(q)[1] * fg;
                    ps += p.pixel(q)[1];
                    ys += fg;
                }
                kt += ce / n + 1.0 - (2.0 * inter + DICE_EPS) / (ps + ys + DICE_EPS);
            }
            let mut s = 0.0;
            for q in 0..y.len() {
                let (a, b) = (p1[k].pixel(q), p2[k].pixel(q));
                let mut kl = 0.0;
                for c in 0..2 {
                    let (u, v) = (a[c].max(1e-7), b[c].max(1e-7));
                    kl += a[c] * (u / v).ln() + b[c] * (v / u).ln();
                }
                s += kl * w.data()[q];
            }
            cor += s / n;
        }
        (kt, cor)
    }

    proptest! {
        #[test]
        fn losses_match_scalar_loops(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let pair = random_pair(&mut rng, 6, 7);
            let f = fuse(&pair);
            let p1 = [random_probs(&mut rng, 6, 7), random_probs(&mut rng, 6, 7)];
            let p2 = [random_probs(&mut rng, 6, 7), random_probs(&mut rng, 6, 7)];
            let kt = kt_loss([&p1[0], &p1[1]], [&p2[0], &p2[1]], &f).unwrap();
            let cor = cor_loss([&p1[0], &p1[1]], [&p2[0], &p2[1]], &f).unwrap();
            let (rk, rc) = kt_reference([&p1[0], &p1[1]], [&p2[0], &p2[1]], &f);
            prop_assert!((kt - rk).abs() < 1e-10 * rk.max(1.0));
            prop_assert!((cor - rc).abs() < 1e-10 * rc.max(1.0));
        }

        #[test]
        fn fusion_is_an_exact_selector(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let p = random_pair(&mut rng, 5, 6);
            let f = fuse(&p);
            for i in 0..5 {
                for j in 0..6 {
                    let src = if p.m[0].get(i, j) { 0 } else { 1 };
                    prop_assert_eq!(f.x_1to2.get(i, j, 0), p.x[src].get(i, j, 0));
                    prop_assert!(f.y_1to2.get(i, j) < 2);
                }
            }
        }

        #[test]
        fn self_fusion_is_identity(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let mut p = random_pair(&mut rng, 5, 5);
            p.x[1] = p.x[0].clone();
            p.y[1] = p.y[0].clone();
            p.w[1] = p.w[0].clone();
            let f = fuse(&p);
            prop_assert_eq!(&f.x_1to2, &p.x[0]);
            prop_assert_eq!(&f.x_2to1, &p.x[0]);
            prop_assert_eq!(&f.y_1to2, &p.y[0]);
            prop_assert_eq!(&f.w_2to1, &p.w[0]);
        }

        #[test]
        fn swapping_roles_preserves_losses(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let p = random_pair(&mut rng, 6, 6);
            let f = fuse(&p);
            let swapped = Pair {
                x: [p.x[1].clone(), p.x[0].clone()],
                y: [p.y[1].clone(), p.y[0].clone()],
                w: [p.w[1].clone(), p.w[0].clone()],
                m: [p.m[1].clone(), p.m[0].clone()],
            };
            let g = fuse(&swapped);
            prop_assert_eq!(&g.x_1to2, &f.x_2to1);
            let p1 = [random_probs(&mut rng, 6, 6), random_probs(&mut rng, 6, 6)];
            let p2 = [random_probs(&mut rng, 6, 6), random_probs(&mut rng, 6, 6)];
            let a = kt_loss([&p1[0], &p1[1]], [&p2[0], &p2[1]], &f).unwrap();
            let b = kt_loss([&p1[1], &p1[0]], [&p2[1], &p2[0]], &g).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let a = cor_loss([&p1[0], &p1[1]], [&p2[0], &p2[1]], &f).unwrap();
            let b = cor_loss([&p1[1], &p1[0]], [&p2[1], &p2[0]], &g).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let scaled = FusedPair { w_1to2: f.w_1to2.scaled(3.0), w_2to1: f.w_2to1.scaled(3.0), ..f.clone() };
            let c = cor_loss([&p1[0], &p1[1]], [&p2[0], &p2[1]], &scaled).unwrap();
            prop_assert!((c - 3.0 * a).abs() < 1e-10 * a.max(1.0));
        }
    }
}
