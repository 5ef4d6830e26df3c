//! Central-difference check of the training objective against the analytic
//! gradients used by the trainer.
//!
//! The scenario is one training step in miniature: two images, both
//! networks, small-loss selection, distance weights, refined labels and one
//! fused pair. Discrete choices (clean masks, refined labels, region masks)
//! are frozen at the base point, so the objective is a smooth function of the
//! parameters away from rectifier kinks. Loss values come from the loss
//! functions directly; the analytic side goes through [`gda_grads`],
//! [`kt_grads`] and [`backward`].

use crate::error::Result;
use crate::geometry::{gda_weights_for, GdaConfig};
use crate::grid::{softmax_pixelwise, BinaryMask, ImageGrid, LabelGrid, ProbGrid, WeightGrid};
use crate::losses::{
    dice_loss, gda_loss, select_clean, sup_loss, sym_kl_pixelwise, weighted_ce_mean, LossGrid,
};
use crate::model::{backward, forward, ForwardTape, ModelConfig, ModelParams, ParamGradients};
use crate::refine::{sglr, RefineConfig};
use crate::rng::SeededRng;
use crate::superpixel::{slic, SlicConfig};
use crate::trainer::{gda_grads, input_normalisation, kt_grads, weak_augment, AugmentSpec, Terms};
use crate::transfer::{cor_direction_loss, fuse_image, fuse_pair, sample_region_mask_with, Direction, FusedPair, KtConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            base_width: 4,
            step: 1e-3,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Sup,
    Con,
    KtCe,
    KtDice,
    Cor,
    Total,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Sup, Term::Con, Term::KtCe, Term::KtDice, Term::Cor, Term::Total];

    pub fn name(self) -> &'static str {
        match self {
            Term::Sup => "sup",
            Term::Con => "con",
            Term::KtCe => "kt_ce",
            Term::KtDice => "kt_dice",
            Term::Cor => "cor",
            Term::Total => "total",
        }
    }

    fn terms(self) -> Terms {
        let mut t = Terms::NONE;
        match self {
            Term::Sup => t.sup = true,
            Term::Con => t.con = true,
            Term::KtCe => t.kt_ce = true,
            Term::KtDice => t.kt_dice = true,
            Term::Cor => t.cor = true,
            Term::Total => t = Terms::ALL,
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermReport {
    pub term: Term,
    pub median: f64,
    pub max: f64,
    /// Parameters whose step stayed on one side of every kink.
    pub params: usize,
    /// Parameters whose nominal step flipped a rectifier or a pooling
    /// choice. The central difference is not a derivative there; these are
    /// re-checked with the step halved until both probes stay on one side.
    pub crossed: usize,
    pub crossed_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub terms: Vec<TermReport>,
    /// Parameters whose base point lies on a kink, checked one-sided.
    pub one_sided: usize,
    /// Parameters with no kink-free probe on either side.
    pub unresolved: usize,
}

impl GradCheckReport {
    /// Largest error at the nominal step, over kink-free parameters.
    pub fn max_error(&self) -> f64 {
        self.terms.iter().map(|t| t.max).fold(0.0, f64::max)
    }

    /// Largest error over the parameters re-checked at a reduced step.
    pub fn max_crossed_error(&self) -> f64 {
        self.terms.iter().map(|t| t.crossed_max).fold(0.0, f64::max)
    }

    pub fn passes(&self, median_tol: f64, max_tol: f64) -> bool {
        self.unresolved == 0
            && self
                .terms
                .iter()
                .all(|t| t.median < median_tol && t.max < max_tol && t.crossed_max < max_tol)
    }

    pub fn max_median(&self) -> f64 {
        self.terms.iter().map(|t| t.median).fold(0.0, f64::max)
    }
}

struct Scenario {
    x: [ImageGrid; 2],
    xa: [ImageGrid; 2],
    noisy: [LabelGrid; 2],
    w: [WeightGrid; 2],
    clean: [BinaryMask; 2],
    fused: FusedPair,
    fused_aug: [ImageGrid; 2],
}

const PAIR_SCALE: f64 = 0.5;

fn probs_of(net: &ModelParams, x: &ImageGrid) -> Result<ProbGrid> {
    softmax_pixelwise(&forward(net, x)?.0)
}

fn random_image(n: usize, rng: &mut SeededRng) -> Result<ImageGrid> {
    // A bright disc on a darker background, plus noise.
    let (ci, cj, r) = (rng.uniform_range(2.0, n as f64 - 2.0), rng.uniform_range(2.0, n as f64 - 2.0), n as f64 / 3.0);
    let data = (0..n * n)
        .map(|p| {
            let (i, j) = ((p / n) as f64, (p % n) as f64);
            let inside = (i - ci).powi(2) + (j - cj).powi(2) < r * r;
            (if inside { 0.7 } else { 0.3 }) + 0.1 * rng.normal()
        })
        .collect();
    ImageGrid::from_clipped(n, n, 1, data)
}

fn build(nets: &[ModelParams; 2], x: [ImageGrid; 2], cfg: &GradCheckConfig, rng: &mut SeededRng) -> Result<Scenario> {
    let n = cfg.image_size;
    let aug = AugmentSpec::default();
    let xa = [weak_augment(&x[0], &aug, rng), weak_augment(&x[1], &aug, rng)];
    let noisy = [0, 1].map(|b| {
        let data = x[b].data().iter().map(|&v| (v + 0.15 * rng.normal() > 0.5) as u8).collect();
        LabelGrid::new(n, n, 2, data).expect("binary labels")
    });
    let gda = GdaConfig::new(5.0, 10)?;
    let w = [gda_weights_for(&noisy[0], 2, &gda)?, gda_weights_for(&noisy[1], 2, &gda)?];

    let mut clean = Vec::new();
    let mut refined = Vec::new();
    for b in 0..2 {
        let (p1, p2) = (probs_of(&nets[0], &x[b])?, probs_of(&nets[1], &xa[b])?);
        let l = sup_loss(&p1, &p2, &noisy[b])?.add_scaled(&sym_kl_pixelwise(&p1, &p2)?, 1.0)?;
        let c = select_clean(&l, 0.8)?;
        let slic_cfg = SlicConfig {
            n_segments: 4,
            ..SlicConfig::for_size(n, n)
        };
        let regions = slic(&x[b], &slic_cfg)?;
        refined.push(sglr(&p1, &p2, &regions, &noisy[b], &c, &RefineConfig::default(), rng)?);
        clean.push(c);
    }
    let kt = KtConfig::default();
    let m1 = sample_region_mask_with(&refined[0], None, &kt, rng)?;
    let m2 = sample_region_mask_with(&refined[1], None, &kt, rng)?;
    let fused = fuse_pair(&x[0], &x[1], &refined[0], &refined[1], &w[0], &w[1], &m1, &m2)?;
    let fused_aug = [fuse_image(&xa[0], &xa[1], &m1)?, fuse_image(&xa[1], &xa[0], &m2)?];
    let clean: [BinaryMask; 2] = clean.try_into().expect("two masks");
    Ok(Scenario {
        x,
        xa,
        noisy,
        w,
        clean,
        fused,
        fused_aug,
    })
}

/// Values of the five terms (sup, con, kt_ce, kt_dice, cor), each already
/// scaled by the pair weight.
fn objective(nets: &[ModelParams], s: &Scenario) -> Result<([f64; 5], Vec<ForwardTape>)> {
    let mut v = [0.0; 5];
    let mut tapes = Vec::with_capacity(8);
    let mut probs = |net: &ModelParams, x: &ImageGrid| -> Result<ProbGrid> {
        let (logits, tape) = forward(net, x)?;
        tapes.push(tape);
        softmax_pixelwise(&logits)
    };
    for b in 0..2 {
        let (p1, p2) = (probs(&nets[0], &s.x[b])?, probs(&nets[1], &s.xa[b])?);
        let l_sup = sup_loss(&p1, &p2, &s.noisy[b])?;
        let l_con = sym_kl_pixelwise(&p1, &p2)?;
        let zero = LossGrid::new(l_sup.height(), l_sup.width(), vec![0.0; l_sup.data().len()])?;
        v[0] += gda_loss(&l_sup, &zero, &s.clean[b], &s.w[b])?;
        v[1] += gda_loss(&zero, &l_con, &s.clean[b], &s.w[b])?;
    }
    for (d, xa) in Direction::BOTH.into_iter().zip(&s.fused_aug) {
        let (p1, p2) = (probs(&nets[0], s.fused.image(d))?, probs(&nets[1], xa)?);
        let (y, w) = (s.fused.labels(d), s.fused.weights(d));
        v[2] += weighted_ce_mean(&p1, y, w)? + weighted_ce_mean(&p2, y, w)?;
        v[3] += dice_loss(&p1, y)? + dice_loss(&p2, y)?;
        v[4] += cor_direction_loss(&p1, &p2, w)?;
    }
    Ok((v.map(|x| x * PAIR_SCALE), tapes))
}

fn term_value(v: &[f64; 5], term: Term) -> f64 {
    match term {
        Term::Sup => v[0],
        Term::Con => v[1],
        Term::KtCe => v[2],
        Term::KtDice => v[3],
        Term::Cor => v[4],
        Term::Total => v.iter().sum(),
    }
}

/// Analytic gradient of one term with respect to both networks.
fn analytic(nets: &[ModelParams], s: &Scenario, term: Term) -> Result<[ParamGradients; 2]> {
    let t = term.terms();
    let mut g = [ParamGradients::zeros_like(&nets[0]), ParamGradients::zeros_like(&nets[1])];
    let mut push = |x1: &ImageGrid, x2: &ImageGrid, f: &dyn Fn(&ProbGrid, &ProbGrid) -> Result<[crate::grid::LogitGrid; 2]>| -> Result<()> {
        let (l1, t1) = forward(&nets[0], x1)?;
        let (l2, t2) = forward(&nets[1], x2)?;
        let [g1, g2] = f(&softmax_pixelwise(&l1)?, &softmax_pixelwise(&l2)?)?;
        g[0].add_assign(&backward(&t1, &g1)?);
        g[1].add_assign(&backward(&t2, &g2)?);
        Ok(())
    };
    for b in 0..2 {
        push(&s.x[b], &s.xa[b], &|p1, p2| gda_grads(p1, p2, &s.noisy[b], &s.w[b], &s.clean[b], t, PAIR_SCALE))?;
    }
    for (d, xa) in Direction::BOTH.into_iter().zip(&s.fused_aug) {
        let (y, w) = (s.fused.labels(d), s.fused.weights(d));
        push(s.fused.image(d), xa, &|p1, p2| kt_grads(p1, p2, y, w, t, PAIR_SCALE))?;
    }
    Ok(g)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the check for one seed over every parameter of both networks.
pub fn grad_check(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let x = [random_image(cfg.image_size, &mut rng)?, random_image(cfg.image_size, &mut rng)?];
    // The trainer's input normalisation, fitted to these two images.
    let (input_shift, input_scale) = input_normalisation(x.iter());
    let model = ModelConfig {
        base_width: cfg.base_width,
        input_shift,
        input_scale,
        ..ModelConfig::default()
    };
    let mut nets = [
        ModelParams::init(model, &mut SeededRng::fork(seed, 1))?,
        ModelParams::init(model, &mut SeededRng::fork(seed, 2))?,
    ];
    let s = build(&nets, x, cfg, &mut rng)?;
    let analytic: Vec<Vec<f64>> = Term::ALL
        .iter()
        .map(|&t| {
            let [a, b] = analytic(&nets, &s, t)?;
            Ok(a.flat().into_iter().chain(b.flat()).collect())
        })
        .collect::<Result<_>>()?;

    let (_, base_tapes) = objective(&nets, &s)?;
    let per_net = nets[0].num_params();
    let mut errors = vec![Vec::with_capacity(2 * per_net); Term::ALL.len()];
    let mut crossed = vec![Vec::new(); Term::ALL.len()];
    let mut unresolved = 0;
    let mut one_sided = 0;
    for k in 0..2 * per_net {
        let (net, idx) = (k / per_net, k % per_net);
        let mut step = cfg.step;
        for attempt in 0..=MAX_HALVINGS {
            let (mut numeric, mut smooth) = central_difference(&mut nets, &s, &base_tapes, net, idx, step)?;
            if !smooth && attempt < MAX_HALVINGS {
                step *= 0.5;
                continue;
            }
            if !smooth {
                // The base point sits on a kink; the analytic gradient follows
                // the base branches, so compare with the side that keeps them.
                match one_sided_difference(&mut nets, &s, &base_tapes, net, idx, step)? {
                    Some(n) => {
                        numeric = n;
                        smooth = true;
                        one_sided += 1;
                    }
                    None => unresolved += 1,
                }
            }
            for (ti, n) in numeric.iter().enumerate() {
                let a = analytic[ti][k];
                let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
                // A kink that never separates from the base point counts as a failure.
                let err = if smooth { err } else { f64::INFINITY };
                if attempt == 0 {
                    errors[ti].push(err);
                } else {
                    crossed[ti].push(err);
                }
            }
            break;
        }
    }
    let terms = Term::ALL
        .iter()
        .zip(errors.iter_mut())
        .zip(&crossed)
        .map(|((&term, e), c)| TermReport {
            term,
            max: e.iter().copied().fold(0.0, f64::max),
            median: median(e),
            params: e.len(),
            crossed: c.len(),
            crossed_max: c.iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok(GradCheckReport {
        seed,
        terms,
        one_sided,
        unresolved,
    })
}

/// Halvings of the step tried for parameters whose full step crosses a kink.
const MAX_HALVINGS: usize = 10;

/// Central difference of every term along one parameter, and whether both
/// probes stayed on the base point's branches.
fn central_difference(
    nets: &mut [ModelParams; 2],
    s: &Scenario,
    base_tapes: &[ForwardTape],
    net: usize,
    idx: usize,
    step: f64,
) -> Result<([f64; 6], bool)> {
    let orig = nets[net].get(idx);
    let plus = (orig as f64 + step) as f32;
    let minus = (orig as f64 - step) as f32;
    nets[net].set(idx, plus);
    let (vp, tp) = objective(&nets[..], s)?;
    nets[net].set(idx, minus);
    let (vm, tm) = objective(&nets[..], s)?;
    nets[net].set(idx, orig);
    let smooth = base_tapes
        .iter()
        .zip(&tp)
        .zip(&tm)
        .all(|((b, p), m)| b.same_branches(p) && b.same_branches(m));
    // Divide by the step actually realised in f32.
    let h = plus as f64 - minus as f64;
    Ok((Term::ALL.map(|t| (term_value(&vp, t) - term_value(&vm, t)) / h), smooth))
}

/// Second-order one-sided difference from probes at `step` and `2 * step`
/// on whichever side keeps the base branches.
fn one_sided_difference(
    nets: &mut [ModelParams; 2],
    s: &Scenario,
    base_tapes: &[ForwardTape],
    net: usize,
    idx: usize,
    step: f64,
) -> Result<Option<[f64; 6]>> {
    let orig = nets[net].get(idx);
    let (v0, _) = objective(&nets[..], s)?;
    for sign in [1.0, -1.0] {
        let x1 = (orig as f64 + sign * step) as f32;
        let x2 = (orig as f64 + sign * 2.0 * step) as f32;
        nets[net].set(idx, x1);
        let (v1, t1) = objective(&nets[..], s)?;
        nets[net].set(idx, x2);
        let (v2, t2) = objective(&nets[..], s)?;
        nets[net].set(idx, orig);
        let smooth = base_tapes
            .iter()
            .zip(&t1)
            .zip(&t2)
            .all(|((b, p), q)| b.same_branches(p) && b.same_branches(q));
        if smooth {
            // Derivative at x0 of the quadratic through the three probes.
            let (x0, x1, x2) = (orig as f64, x1 as f64, x2 as f64);
            let c0 = (2.0 * x0 - x1 - x2) / ((x0 - x1) * (x0 - x2));
            let c1 = (x0 - x2) / ((x1 - x0) * (x1 - x2));
            let c2 = (x0 - x1) / ((x2 - x0) * (x2 - x1));
            return Ok(Some(Term::ALL.map(|t| {
                c0 * term_value(&v0, t) + c1 * term_value(&v1, t) + c2 * term_value(&v2, t)
            })));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn objective_terms_sum_to_total() {
        let cfg = GradCheckConfig::default();
        let model = ModelConfig {
            base_width: 4,
            ..ModelConfig::default()
        };
        let nets = [
            ModelParams::init(model, &mut SeededRng::new(1)).unwrap(),
            ModelParams::init(model, &mut SeededRng::new(2)).unwrap(),
        ];
        let mut rng = SeededRng::new(3);
        let x = [random_image(8, &mut rng).unwrap(), random_image(8, &mut rng).unwrap()];
        let s = build(&nets, x, &cfg, &mut rng).unwrap();
        let (v, tapes) = objective(&nets, &s).unwrap();
        assert_eq!(tapes.len(), 8);
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        assert_eq!(term_value(&v, Term::Total), v.iter().sum::<f64>());
    }

    #[test]
    fn one_seed_passes() {
        let r = grad_check(0, &GradCheckConfig::default()).unwrap();
        for t in &r.terms {
            eprintln!("{t:?}");
        }
        assert!(r.passes(1e-4, 1e-3), "{r:?}");
    }
}
