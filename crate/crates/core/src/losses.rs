//! Per-pixel losses, the retention schedule and small-loss selection.

use crate::error::{GsdError, Result};
use crate::grid::{clamped_ln, same_hw, BinaryMask, LabelGrid, ProbGrid, Shaped, WeightGrid};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Non-negative per-pixel losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LossGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(GsdError::shape(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(GsdError::InvalidInput(format!("loss value {v} must be finite and >= 0")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Element-wise `self + k * other`.
    pub fn add_scaled(&self, other: &LossGrid, k: f64) -> Result<LossGrid> {
        same_hw(self, other)?;
        Ok(LossGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + k * b).collect(),
        })
    }
}

impl Shaped for LossGrid {
    fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Retention schedule: `R(e) = 1 - min((e / warmup) * tau, tau)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionSchedule {
    pub tau: f64,
    pub warmup_epochs: usize,
}

impl SelectionSchedule {
    pub fn new(tau: f64, warmup_epochs: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(GsdError::InvalidInput(format!("tau {tau} not in [0, 1)")));
        }
        if warmup_epochs == 0 {
            return Err(GsdError::InvalidInput("warmup must be >= 1 epoch".into()));
        }
        Ok(Self { tau, warmup_epochs })
    }
}

/// Losses of one training step. `total == gda + kt + cor`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub gda: f64,
    pub kt: f64,
    pub cor: f64,
    pub total: f64,
    pub clean_fraction: f64,
}

impl LossReport {
    pub fn new(gda: f64, kt: f64, cor: f64, clean_fraction: f64) -> Self {
        Self {
            gda,
            kt,
            cor,
            total: gda + kt + cor,
            clean_fraction,
        }
    }
}

pub fn ce_pixelwise(probs: &ProbGrid, target: &LabelGrid) -> Result<LossGrid> {
    probs.check_labels(target)?;
    let data = target
        .data()
        .iter()
        .enumerate()
        .map(|(p, &y)| -clamped_ln(probs.pixel(p)[y as usize]))
        .collect();
    Ok(LossGrid {
        height: probs.height(),
        width: probs.width(),
        data,
    })
}

/// `CE(p1, nGT) + CE(p2, nGT)` per pixel.
pub fn sup_loss(p1: &ProbGrid, p2: &ProbGrid, noisy: &LabelGrid) -> Result<LossGrid> {
    p1.same_shape(p2)?;
    ce_pixelwise(p1, noisy)?.add_scaled(&ce_pixelwise(p2, noisy)?, 1.0)
}

/// Symmetric KL of one pixel, with clamped logarithms.
#[inline]
pub(crate) fn sym_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (clamped_ln(a) - clamped_ln(b)))
        .sum()
}

/// `KL(p1 || p2) + KL(p2 || p1)` per pixel.
pub fn sym_kl_pixelwise(p1: &ProbGrid, p2: &ProbGrid) -> Result<LossGrid> {
    p1.same_shape(p2)?;
    let data = (0..p1.num_pixels())
        .map(|p| sym_kl(p1.pixel(p), p2.pixel(p)).max(0.0))
        .collect();
    Ok(LossGrid {
        height: p1.height(),
        width: p1.width(),
        data,
    })
}

pub fn retention_rate(epoch: usize, sched: &SelectionSchedule) -> f64 {
    let ramp = epoch as f64 / sched.warmup_epochs as f64 * sched.tau;
    1.0 - ramp.min(sched.tau)
}

/// Number of pixels kept at `rate`: the smallest `k` with `k >= rate * n`.
pub fn selection_size(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64;
    let k = exact.ceil();
    // Guard against products like 0.7 * 10 = 7.000000000000001.
    let k = if (k - 1.0 - exact).abs() < 1e-9 * n.max(1) as f64 { k - 1.0 } else { k };
    (k as usize).min(n)
}

/// Small-loss selection: the `ceil(rate * N)` pixels with the smallest loss,
/// ties broken by row-major index.
pub fn select_clean(loss: &LossGrid, rate: f64) -> Result<BinaryMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(GsdError::InvalidInput(format!("retention rate {rate} not in (0, 1]")));
    }
    let n = loss.data.len();
    let k = selection_size(rate, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| loss.data[a].total_cmp(&loss.data[b]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &p in &order[..k] {
        keep[p] = true;
    }
    BinaryMask::new(loss.height, loss.width, keep)
}

fn masked_mean(values: impl Iterator<Item = f64>, clean: &BinaryMask) -> Result<f64> {
    let n = clean.count();
    if n == 0 {
        return Err(GsdError::Degenerate("empty clean set".into()));
    }
    let s: f64 = values.zip(clean.data()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(s / n as f64)
}

/// Mean of `l_sup + lambda * l_con` over the clean pixels.
pub fn jocor_loss(l_sup: &LossGrid, l_con: &LossGrid, clean: &BinaryMask, kl_weight: f64) -> Result<f64> {
    same_hw(l_sup, l_con)?;
    same_hw(l_sup, clean)?;
    masked_mean(l_sup.data.iter().zip(&l_con.data).map(|(a, b)| a + kl_weight * b), clean)
}

/// Distance-weighted mean of `l_sup + l_con` over the clean pixels.
pub fn gda_loss(l_sup: &LossGrid, l_con: &LossGrid, clean: &BinaryMask, w: &WeightGrid) -> Result<f64> {
    same_hw(l_sup, l_con)?;
    same_hw(l_sup, clean)?;
    same_hw(l_sup, w)?;
    masked_mean(
        l_sup.data.iter().zip(&l_con.data).zip(w.data()).map(|((a, b), w)| (a + b) * w),
        clean,
    )
}

/// Soft Dice loss on the foreground channel (class 1).
pub fn dice_loss(probs: &ProbGrid, target: &LabelGrid) -> Result<f64> {
    probs.check_labels(target)?;
    if probs.num_classes() < 2 {
        return Err(GsdError::InvalidInput("dice loss needs a foreground channel".into()));
    }
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for (p, &y) in target.data().iter().enumerate() {
        let pf = probs.pixel(p)[1];
        let yf = (y == 1) as u8 as f64;
        inter += pf * yf;
        psum += pf;
        ysum += yf;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (psum + ysum + DICE_EPS))
}

/// Mean over pixels of `CE * w`.
pub fn weighted_ce_mean(probs: &ProbGrid, target: &LabelGrid, w: &WeightGrid) -> Result<f64> {
    same_hw(probs, w)?;
    let ce = ce_pixelwise(probs, target)?;
    Ok(ce.data.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / ce.data.len().max(1) as f64)
}

/// Mean over pixels of `symKL * w`.
pub fn weighted_sym_kl_mean(p1: &ProbGrid, p2: &ProbGrid, w: &WeightGrid) -> Result<f64> {
    same_hw(p1, w)?;
    let kl = sym_kl_pixelwise(p1, p2)?;
    Ok(kl.data.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / kl.data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{one_hot, softmax_pixelwise, LogitGrid};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn probs(h: usize, w: usize, v: &[f64]) -> ProbGrid {
        ProbGrid::new(h, w, 2, v.to_vec()).unwrap()
    }

    fn random_probs(rng: &mut SeededRng, h: usize, w: usize) -> ProbGrid {
        let l: Vec<f64> = (0..h * w * 2).map(|_| rng.normal() * 2.0).collect();
        softmax_pixelwise(&LogitGrid::new(h, w, 2, l).unwrap()).unwrap()
    }

    fn random_labels(rng: &mut SeededRng, h: usize, w: usize) -> LabelGrid {
        LabelGrid::new(h, w, 2, (0..h * w).map(|_| rng.below(2) as u8).collect()).unwrap()
    }

    fn random_loss(rng: &mut SeededRng, h: usize, w: usize) -> LossGrid {
        LossGrid::new(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn ce_hand_values() {
        let t = LabelGrid::new(1, 2, 2, vec![0, 0]).unwrap();
        let ce = ce_pixelwise(&probs(1, 2, &[1.0, 0.0, 0.5, 0.5]), &t).unwrap();
        assert_eq!(ce.data()[0], 0.0);
        assert!((ce.data()[1] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_is_finite_at_zero_probability() {
        let t = LabelGrid::new(1, 1, 2, vec![1]).unwrap();
        let ce = ce_pixelwise(&probs(1, 1, &[1.0, 0.0]), &t).unwrap();
        assert!((ce.data()[0] + PROB_FLOOR_LN).abs() < 1e-12);
    }
    const PROB_FLOOR_LN: f64 = -16.11809565095832; // ln(1e-7)

    #[test]
    fn ce_mean_matches_loop() {
        let mut rng = SeededRng::new(1);
        let p = random_probs(&mut rng, 7, 5);
        let t = random_labels(&mut rng, 7, 5);
        let mut acc = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                acc -= p.get(i, j, t.get(i, j) as usize).max(1e-7).ln();
            }
        }
        assert!((ce_pixelwise(&p, &t).unwrap().mean() - acc / 35.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = LabelGrid::filled(2, 2, 2, 0);
        assert!(ce_pixelwise(&probs(1, 2, &[1.0, 0.0, 1.0, 0.0]), &t).is_err());
        assert!(sym_kl_pixelwise(&probs(1, 1, &[1.0, 0.0]), &probs(1, 2, &[1.0, 0.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn sup_loss_additivity() {
        let t = LabelGrid::filled(2, 2, 2, 0);
        let perfect = one_hot(&t);
        let uniform = probs(2, 2, &[0.5; 8]);
        assert!(sup_loss(&perfect, &perfect, &t).unwrap().data().iter().all(|&v| v == 0.0));
        let a = sup_loss(&perfect, &uniform, &t).unwrap();
        let b = sup_loss(&uniform, &perfect, &t).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn sym_kl_hand_value() {
        let kl = sym_kl_pixelwise(&probs(1, 1, &[0.5, 0.5]), &probs(1, 1, &[0.25, 0.75])).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln() + 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((kl.data()[0] - expect).abs() < 1e-12);
        assert!((kl.data()[0] - 0.2747).abs() < 1e-4);
        let same = sym_kl_pixelwise(&probs(1, 1, &[0.3, 0.7]), &probs(1, 1, &[0.3, 0.7])).unwrap();
        assert_eq!(same.data()[0], 0.0);
    }

    #[test]
    fn retention_hand_values() {
        let s = SelectionSchedule::new(0.3, 10).unwrap();
        assert_eq!(retention_rate(0, &s), 1.0);
        assert!((retention_rate(5, &s) - 0.85).abs() < 1e-15);
        assert!((retention_rate(20, &s) - 0.7).abs() < 1e-15);
        assert!(SelectionSchedule::new(1.0, 10).is_err());
    }

    #[test]
    fn select_clean_hand_case() {
        let l = LossGrid::new(2, 2, vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        assert_eq!(select_clean(&l, 0.5).unwrap().data(), &[true, false, true, false]);
        assert_eq!(select_clean(&l, 1.0).unwrap().count(), 4);
        assert!(select_clean(&l, 0.0).is_err());
    }

    #[test]
    fn select_clean_ties_follow_pixel_order() {
        let l = LossGrid::new(1, 4, vec![0.5; 4]).unwrap();
        assert_eq!(select_clean(&l, 0.5).unwrap().data(), &[true, true, false, false]);
    }

    #[test]
    fn selection_size_is_ceiling() {
        assert_eq!(selection_size(0.7, 10), 7);
        assert_eq!(selection_size(0.5, 7), 4);
        assert_eq!(selection_size(0.95, 4096), 3892);
        assert_eq!(selection_size(1.0, 9), 9);
    }

    #[test]
    fn jocor_constant_and_masked() {
        let a = LossGrid::new(2, 2, vec![0.3; 4]).unwrap();
        let b = LossGrid::new(2, 2, vec![0.2; 4]).unwrap();
        let all = BinaryMask::filled(2, 2, true);
        assert!((jocor_loss(&a, &b, &all, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let sup = LossGrid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let zero = LossGrid::new(2, 2, vec![0.0; 4]).unwrap();
        let half = BinaryMask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert_eq!(jocor_loss(&sup, &zero, &half, 1.0).unwrap(), 0.0);
        let none = BinaryMask::filled(2, 2, false);
        assert!(matches!(jocor_loss(&a, &b, &none, 1.0), Err(GsdError::Degenerate(_))));
        assert!(gda_loss(&a, &b, &none, &WeightGrid::filled(2, 2, 1.0)).is_err());
    }

    #[test]
    fn jocor_and_gda_match_loops() {
        let mut rng = SeededRng::new(3);
        let (a, b) = (random_loss(&mut rng, 6, 6), random_loss(&mut rng, 6, 6));
        let mask = BinaryMask::from_fn(6, 6, |_, _| rng.coin(0.6));
        let w = WeightGrid::new(6, 6, (0..36).map(|_| 1.0 + 4.0 * rng.uniform()).collect()).unwrap();
        let (mut sj, mut sg, mut n) = (0.0, 0.0, 0.0);
        for p in 0..36 {
            if mask.data()[p] {
                sj += a.data()[p] + 0.5 * b.data()[p];
                sg += (a.data()[p] + b.data()[p]) * w.data()[p];
                n += 1.0;
            }
        }
        assert!((jocor_loss(&a, &b, &mask, 0.5).unwrap() - sj / n).abs() < 1e-12);
        assert!((gda_loss(&a, &b, &mask, &w).unwrap() - sg / n).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_extremes_and_loop() {
        let mut rng = SeededRng::new(8);
        let t = random_labels(&mut rng, 64, 64);
        assert!(dice_loss(&one_hot(&t), &t).unwrap() < 1e-4);
        let inv = LabelGrid::new(64, 64, 2, t.data().iter().map(|v| 1 - v).collect()).unwrap();
        assert!(dice_loss(&one_hot(&inv), &t).unwrap() > 1.0 - 1e-4);
        let p = random_probs(&mut rng, 64, 64);
        let (mut i, mut s) = (0.0, 0.0);
        for px in 0..4096 {
            let y = t.data()[px] as f64;
            i += p.pixel(px)[1] * y;
            s += p.pixel(px)[1] + y;
        }
        let expect = 1.0 - (2.0 * i + 1e-5) / (s + 1e-5);
        assert!((dice_loss(&p, &t).unwrap() - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn selection_cardinality_and_dominance(seed in any::<u64>(), rate in 0.01f64..=1.0) {
            let mut rng = SeededRng::new(seed);
            // Coarse values force many ties.
            let l = LossGrid::new(9, 7, (0..63).map(|_| (rng.below(8)) as f64 / 8.0).collect()).unwrap();
            let m = select_clean(&l, rate).unwrap();
            prop_assert_eq!(m.count(), selection_size(rate, 63));
            prop_assert!(m.count() as f64 >= rate * 63.0 - 1e-9);
            let max_in = (0..63).filter(|&p| m.data()[p]).map(|p| l.data()[p]).fold(f64::MIN, f64::max);
            let min_out = (0..63).filter(|&p| !m.data()[p]).map(|p| l.data()[p]).fold(f64::MAX, f64::min);
            prop_assert!(max_in <= min_out);
        }

        #[test]
        fn sym_kl_is_non_negative(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let (a, b) = (random_probs(&mut rng, 4, 4), random_probs(&mut rng, 4, 4));
            prop_assert!(sym_kl_pixelwise(&a, &b).unwrap().data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn gda_reduces_to_jocor_and_scales(seed in any::<u64>(), k in 0.1f64..10.0) {
            let mut rng = SeededRng::new(seed);
            let (a, b) = (random_loss(&mut rng, 5, 5), random_loss(&mut rng, 5, 5));
            let mask = BinaryMask::from_fn(5, 5, |i, j| (i + j) % 3 != 0);
            let ones = WeightGrid::filled(5, 5, 1.0);
            let g = gda_loss(&a, &b, &mask, &ones).unwrap();
            prop_assert!((g - jocor_loss(&a, &b, &mask, 1.0).unwrap()).abs() < 1e-9);
            let g2 = gda_loss(&a, &b, &mask, &ones.scaled(k)).unwrap();
            prop_assert!((g2 - k * g).abs() < 1e-9 * (1.0 + g2.abs()));
        }
    }
}
