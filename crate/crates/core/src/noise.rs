//! Simulated annotation noise for binary label maps.
//!
//! Three families are supported:
//!
//! * `S_DE`: a single dilation or erosion of the foreground with a disk.
//! * `S_R`: foreground-reducing contour perturbation (under-annotation).
//! * `S_E`: foreground-expanding contour perturbation (over-annotation).
//!
//! The two contour families share a bounded Markov walk along the boundary.
//! Boundary pixels are ordered by angle around the foreground centroid; the
//! walk state is an integer level in `[0, walk_step]` that moves by ±1 every
//! `walk_length` contour pixels. Level `s` at a contour pixel stamps a disk of
//! radius `s * amplitude` that is removed from (S_R) or added to (S_E) the
//! foreground. The amplitude is found by bisection so the realized noise rate
//! tracks the requested strength.

use crate::error::{GsdError, Result};
use crate::geometry::{extract_boundary, Connectivity};
use crate::grid::{BinaryMask, LabelGrid};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    /// Morphological dilation or erosion.
    DilateErode,
    /// Foreground-reducing contour walk.
    Reduce,
    /// Foreground-expanding contour walk.
    Expand,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::DilateErode => "S_DE",
            NoiseKind::Reduce => "S_R",
            NoiseKind::Expand => "S_E",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S_DE" | "s_de" | "de" => Ok(NoiseKind::DilateErode),
            "S_R" | "s_r" | "r" => Ok(NoiseKind::Reduce),
            "S_E" | "s_e" | "e" => Ok(NoiseKind::Expand),
            _ => Err(GsdError::Config(format!("unknown noise kind {s:?} (expected S_R, S_E or S_DE)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Target fraction of mislabeled pixels, in `(0, 1)`.
    pub strength: f64,
    /// Disk radius for `S_DE`.
    pub structuring_radius: usize,
    /// Number of walk levels above zero.
    pub walk_step: usize,
    /// Contour pixels between walk transitions.
    pub walk_length: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, strength: f64, seed: u64) -> Self {
        Self {
            kind,
            strength,
            structuring_radius: 2,
            walk_step: 4,
            walk_length: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0 && self.strength < 1.0) {
            return Err(GsdError::InvalidInput(format!("strength {} not in (0, 1)", self.strength)));
        }
        if self.structuring_radius == 0 || self.walk_step == 0 || self.walk_length == 0 {
            return Err(GsdError::InvalidInput("radii and walk lengths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseReport {
    pub realized_rate: f64,
    /// Every changed pixel lies in a band around the clean boundary.
    pub boundary_only: bool,
    /// Set when the requested strength was not reachable.
    pub infeasible: bool,
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if ((di * di + dj * dj) as f64) <= r2 {
                out.push((di, dj));
            }
        }
    }
    out
}

/// Dilation with a Euclidean disk of the given radius.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, true)
}

/// Erosion with a Euclidean disk. Out-of-image samples replicate the nearest
/// edge pixel, which for a disk is equivalent to ignoring them.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, false)
}

fn morph(mask: &BinaryMask, radius: usize, dilation: bool) -> BinaryMask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let offs = disk_offsets(radius as f64);
    BinaryMask::from_fn(mask.height(), mask.width(), |i, j| {
        let mut hits = offs.iter().filter_map(|&(di, dj)| {
            let (u, v) = (i as isize + di, j as isize + dj);
            (u >= 0 && v >= 0 && u < h && v < w).then(|| mask.get(u as usize, v as usize))
        });
        if dilation {
            hits.any(|b| b)
        } else {
            hits.all(|b| b)
        }
    })
}

/// Fraction of pixels whose labels differ.
pub fn measure_noise(gt: &LabelGrid, noisy: &LabelGrid) -> Result<NoiseReport> {
    gt.same_shape(noisy)?;
    let diff = gt.data().iter().zip(noisy.data()).filter(|(a, b)| a != b).count();
    Ok(NoiseReport {
        realized_rate: diff as f64 / gt.len().max(1) as f64,
        boundary_only: true,
        infeasible: false,
    })
}

fn check_binary(gt: &LabelGrid) -> Result<()> {
    if gt.num_classes() != 2 {
        return Err(GsdError::InvalidInput(format!(
            "noise simulation needs binary labels, got {} classes",
            gt.num_classes()
        )));
    }
    Ok(())
}

fn unchanged(gt: &LabelGrid) -> (LabelGrid, NoiseReport) {
    (
        gt.clone(),
        NoiseReport {
            realized_rate: 0.0,
            boundary_only: true,
            infeasible: false,
        },
    )
}

/// Dilation or erosion (chosen by a fair coin) of the foreground.
pub fn simulate_de(gt: &LabelGrid, spec: &NoiseSpec) -> Result<(LabelGrid, NoiseReport)> {
    check_binary(gt)?;
    spec.validate()?;
    if spec.kind != NoiseKind::DilateErode {
        return Err(GsdError::InvalidInput("simulate_de needs kind S_DE".into()));
    }
    let fg = gt.foreground();
    if fg.count() == 0 {
        return Ok(unchanged(gt));
    }
    let mut rng = SeededRng::new(spec.seed);
    let out = if rng.coin(0.5) {
        dilate(&fg, spec.structuring_radius)
    } else {
        erode(&fg, spec.structuring_radius)
    };
    let noisy = LabelGrid::from_mask(&out);
    let report = measure_noise(gt, &noisy)?;
    Ok((noisy, report))
}

/// Boundary pixels of the foreground, ordered by angle around its centroid.
fn contour_order(fg: &BinaryMask) -> Vec<(usize, usize)> {
    let labels = LabelGrid::from_mask(fg);
    let mut pts: Vec<(usize, usize)> = extract_boundary(&labels, Connectivity::Four)
        .coords
        .into_iter()
        .filter(|&(i, j)| fg.get(i, j))
        .collect();
    let n = fg.count().max(1) as f64;
    let (mut ci, mut cj) = (0.0, 0.0);
    for i in 0..fg.height() {
        for j in 0..fg.width() {
            if fg.get(i, j) {
                ci += i as f64;
                cj += j as f64;
            }
        }
    }
    ci /= n;
    cj /= n;
    let key = |&(i, j): &(usize, usize)| {
        let (di, dj) = (i as f64 - ci, j as f64 - cj);
        (di.atan2(dj), di * di + dj * dj)
    };
    pts.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(b))
    });
    pts
}

/// Integer walk levels in `[0, max_level]`, one per contour pixel.
fn walk_levels(n: usize, max_level: usize, hold: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut level = rng.below(max_level + 1);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 && k % hold == 0 {
            level = if rng.coin(0.5) {
                (level + 1).min(max_level)
            } else {
                level.saturating_sub(1)
            };
        }
        out.push(level);
    }
    out
}

fn stamp(fg: &BinaryMask, contour: &[(usize, usize)], levels: &[usize], amplitude: f64, expand: bool) -> BinaryMask {
    let (h, w) = (fg.height() as isize, fg.width() as isize);
    let mut out = fg.clone();
    let max_level = levels.iter().copied().max().unwrap_or(0);
    let disks: Vec<Vec<(isize, isize)>> = (0..=max_level)
        .map(|s| {
            let r = s as f64 * amplitude;
            // Strict inequality: level 0 never changes anything.
            disk_offsets(r).into_iter().filter(|&(a, b)| ((a * a + b * b) as f64) < r * r).collect()
        })
        .collect();
    let data = out.data_mut();
    for (&(i, j), &s) in contour.iter().zip(levels) {
        for &(di, dj) in &disks[s] {
            let (u, v) = (i as isize + di, j as isize + dj);
            if u < 0 || v < 0 || u >= h || v >= w {
                continue;
            }
            let p = u as usize * w as usize + v as usize;
            if expand {
                data[p] = true;
            } else if fg.data()[p] {
                data[p] = false;
            }
        }
    }
    if expand {
        fill_holes(&mut out);
    }
    out
}

/// Marks every background component that does not touch the image border.
fn fill_holes(mask: &mut BinaryMask) {
    let (h, w) = (mask.height(), mask.width());
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if (i == 0 || j == 0 || i + 1 == h || j + 1 == w) && !mask.get(i, j) {
                outside[i * w + j] = true;
                stack.push((i, j));
            }
        }
    }
    while let Some((i, j)) = stack.pop() {
        for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (u, v) = (i as isize + di, j as isize + dj);
            if u < 0 || v < 0 || u >= h as isize || v >= w as isize {
                continue;
            }
            let p = u as usize * w + v as usize;
            if !outside[p] && !mask.data()[p] {
                outside[p] = true;
                stack.push((u as usize, v as usize));
            }
        }
    }
    for (b, o) in mask.data_mut().iter_mut().zip(outside) {
        if !o {
            *b = true;
        }
    }
}

const BISECTION_ITERS: usize = 20;

/// Contour random-walk perturbation (`S_R` shrinks, `S_E` grows).
pub fn simulate_markov(gt: &LabelGrid, spec: &NoiseSpec) -> Result<(LabelGrid, NoiseReport)> {
    check_binary(gt)?;
    spec.validate()?;
    let expand = match spec.kind {
        NoiseKind::Reduce => false,
        NoiseKind::Expand => true,
        NoiseKind::DilateErode => {
            return Err(GsdError::InvalidInput("simulate_markov needs kind S_R or S_E".into()))
        }
    };
    let fg = gt.foreground();
    if fg.count() == 0 {
        return Ok(unchanged(gt));
    }
    let mut rng = SeededRng::new(spec.seed);
    let contour = contour_order(&fg);
    let levels = walk_levels(contour.len(), spec.walk_step, spec.walk_length, &mut rng);

    let n = gt.len() as f64;
    let rate_at = |amp: f64| {
        let out = stamp(&fg, &contour, &levels, amp, expand);
        let diff = out.data().iter().zip(fg.data()).filter(|(a, b)| a != b).count();
        (out, diff as f64 / n)
    };

    // Largest useful amplitude: the top level covers the whole image diagonal.
    let (h, w) = (gt.height() as f64, gt.width() as f64);
    let hi_amp = (h * h + w * w).sqrt() / spec.walk_step as f64 + 1.0;
    let (top_mask, top_rate) = rate_at(hi_amp);
    let target = spec.strength;
    let (mask, infeasible) = if top_rate < target {
        (top_mask, true)
    } else {
        let (mut lo, mut hi) = (0.0f64, hi_amp);
        let mut best = (top_mask, top_rate);
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            let (m, r) = rate_at(mid);
            if (r - target).abs() < (best.1 - target).abs() {
                best = (m, r);
            }
            if r < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (best.0, false)
    };
    let noisy = LabelGrid::from_mask(&mask);
    let mut report = measure_noise(gt, &noisy)?;
    report.infeasible = infeasible || (report.realized_rate - target).abs() > 0.25 * target;
    Ok((noisy, report))
}

/// Dispatches on `spec.kind`.
pub fn simulate(gt: &LabelGrid, spec: &NoiseSpec) -> Result<(LabelGrid, NoiseReport)> {
    match spec.kind {
        NoiseKind::DilateErode => simulate_de(gt, spec),
        NoiseKind::Reduce | NoiseKind::Expand => simulate_markov(gt, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::squared_distance_to_seeds;
    use proptest::prelude::*;

    pub(crate) fn disk_labels(size: usize, radius: f64) -> LabelGrid {
        let c = (size as f64 - 1.0) / 2.0;
        let m = BinaryMask::from_fn(size, size, |i, j| {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            di * di + dj * dj <= radius * radius
        });
        LabelGrid::from_mask(&m)
    }

    fn random_mask(seed: u64, h: usize, w: usize, p: f64) -> BinaryMask {
        let mut rng = SeededRng::new(seed);
        BinaryMask::from_fn(h, w, |_, _| rng.coin(p))
    }

    #[test]
    fn dilate_empty_is_empty() {
        let m = BinaryMask::filled(8, 8, false);
        assert_eq!(dilate(&m, 3).count(), 0);
    }

    #[test]
    fn dilate_square_with_cross() {
        let m = BinaryMask::from_fn(9, 9, |i, j| (3..6).contains(&i) && (3..6).contains(&j));
        assert_eq!(dilate(&m, 1).count(), 21);
    }

    #[test]
    fn erode_full_stays_full_and_dot_vanishes() {
        assert_eq!(erode(&BinaryMask::filled(6, 7, true), 2).count(), 42);
        let dot = BinaryMask::from_fn(5, 5, |i, j| i == 2 && j == 2);
        assert_eq!(erode(&dot, 1).count(), 0);
    }

    #[test]
    fn measure_noise_counts() {
        let gt = disk_labels(10, 3.0);
        assert_eq!(measure_noise(&gt, &gt).unwrap().realized_rate, 0.0);
        let inv = LabelGrid::new(10, 10, 2, gt.data().iter().map(|v| 1 - v).collect()).unwrap();
        assert_eq!(measure_noise(&gt, &inv).unwrap().realized_rate, 1.0);
        let mut one = gt.data().to_vec();
        one[17] ^= 1;
        let one = LabelGrid::new(10, 10, 2, one).unwrap();
        assert_eq!(measure_noise(&gt, &one).unwrap().realized_rate, 0.01);
        let other = LabelGrid::filled(9, 10, 2, 0);
        assert!(measure_noise(&gt, &other).is_err());
    }

    #[test]
    fn background_only_is_untouched() {
        let gt = LabelGrid::filled(16, 16, 2, 0);
        for kind in [NoiseKind::DilateErode, NoiseKind::Reduce, NoiseKind::Expand] {
            let (noisy, rep) = simulate(&gt, &NoiseSpec::new(kind, 0.1, 3)).unwrap();
            assert_eq!(noisy, gt);
            assert_eq!(rep.realized_rate, 0.0);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let gt = disk_labels(32, 9.0);
        for kind in [NoiseKind::DilateErode, NoiseKind::Reduce, NoiseKind::Expand] {
            let spec = NoiseSpec::new(kind, 0.05, 77);
            assert_eq!(simulate(&gt, &spec).unwrap().0, simulate(&gt, &spec).unwrap().0);
        }
    }

    #[test]
    fn de_changes_stay_near_boundary() {
        for seed in 0..20 {
            let gt = LabelGrid::from_mask(&random_mask(seed, 24, 24, 0.3));
            let mut spec = NoiseSpec::new(NoiseKind::DilateErode, 0.1, seed);
            spec.structuring_radius = 1 + (seed as usize % 3);
            let (noisy, _) = simulate_de(&gt, &spec).unwrap();
            let b = extract_boundary(&gt, Connectivity::Four);
            let Some(sq) = squared_distance_to_seeds(24, 24, &b.coords) else {
                assert_eq!(noisy, gt);
                continue;
            };
            let r2 = (spec.structuring_radius * spec.structuring_radius) as i64;
            for p in 0..gt.len() {
                if gt.data()[p] != noisy.data()[p] {
                    assert!(sq[p] <= r2, "pixel {p} changed at squared distance {}", sq[p]);
                }
            }
        }
    }

    #[test]
    fn markov_rate_calibrates_on_disk() {
        let gt = disk_labels(64, 20.0);
        for kind in [NoiseKind::Reduce, NoiseKind::Expand] {
            for seed in 0..5 {
                let (_, rep) = simulate_markov(&gt, &NoiseSpec::new(kind, 0.05, seed)).unwrap();
                assert!(
                    (0.0375..=0.0625).contains(&rep.realized_rate),
                    "{kind:?} seed {seed}: {}",
                    rep.realized_rate
                );
                assert!(!rep.infeasible);
            }
        }
    }

    #[test]
    fn infeasible_reduction_is_flagged() {
        let gt = disk_labels(32, 3.0);
        let (noisy, rep) = simulate_markov(&gt, &NoiseSpec::new(NoiseKind::Reduce, 0.5, 1)).unwrap();
        assert!(rep.infeasible);
        assert!(noisy.foreground().is_subset_of(&gt.foreground()));
    }

    #[test]
    fn kind_parses() {
        assert_eq!("S_R".parse::<NoiseKind>().unwrap(), NoiseKind::Reduce);
        assert!("S_X".parse::<NoiseKind>().is_err());
    }

    proptest! {
        #[test]
        fn dilation_is_extensive(seed in any::<u64>(), r in 1usize..4) {
            let m = random_mask(seed, 16, 16, 0.2);
            prop_assert!(m.is_subset_of(&dilate(&m, r)));
            prop_assert!(erode(&m, r).is_subset_of(&m));
        }

        #[test]
        fn closing_is_extensive(seed in any::<u64>(), r in 1usize..4) {
            let m = random_mask(seed, 16, 16, 0.3);
            prop_assert!(m.is_subset_of(&erode(&dilate(&m, r), r)));
        }

        #[test]
        fn reduce_and_expand_respect_direction(seed in any::<u64>(), radius in 3.0f64..14.0, strength in 0.01f64..0.2) {
            let gt = disk_labels(32, radius);
            let fg = gt.foreground();
            let (r, rep_r) = simulate_markov(&gt, &NoiseSpec::new(NoiseKind::Reduce, strength, seed)).unwrap();
            prop_assert!(r.foreground().is_subset_of(&fg));
            prop_assert_eq!(rep_r.realized_rate, measure_noise(&gt, &r).unwrap().realized_rate);
            let (e, _) = simulate_markov(&gt, &NoiseSpec::new(NoiseKind::Expand, strength, seed)).unwrap();
            prop_assert!(fg.is_subset_of(&e.foreground()));
        }
    }
}
