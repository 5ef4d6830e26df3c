//! Boundary extraction, exact Euclidean distance to the label boundary, and
//! the epoch-scheduled distance-aware weight map.

use crate::error::{GsdError, Result};
use crate::grid::{LabelGrid, WeightGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub(crate) fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" | "four" => Ok(Connectivity::Four),
            "8" | "eight" => Ok(Connectivity::Eight),
            _ => Err(GsdError::Config(format!("unknown connectivity {s:?}"))),
        }
    }
}

/// Weight cap `T`, epoch horizon `E` and neighbourhood used for boundaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdaConfig {
    pub cap: f64,
    pub max_epochs: usize,
    pub connectivity: Connectivity,
}

impl GdaConfig {
    pub fn new(cap: f64, max_epochs: usize) -> Result<Self> {
        let cfg = Self {
            cap,
            max_epochs,
            connectivity: Connectivity::Four,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap >= 1.0) || !self.cap.is_finite() {
            return Err(GsdError::InvalidInput(format!("weight cap {} must be >= 1", self.cap)));
        }
        if self.max_epochs == 0 {
            return Err(GsdError::InvalidInput("max epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pixels with at least one neighbour of a different label, in row-major order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundarySet {
    pub coords: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn extract_boundary(labels: &LabelGrid, connectivity: Connectivity) -> BoundarySet {
    let (h, w) = (labels.height() as isize, labels.width() as isize);
    let mut coords = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let l = labels.get(i as usize, j as usize);
            let differs = connectivity.offsets().iter().any(|&(di, dj)| {
                let (u, v) = (i + di, j + dj);
                u >= 0 && v >= 0 && u < h && v < w && labels.get(u as usize, v as usize) != l
            });
            if differs {
                coords.push((i as usize, j as usize));
            }
        }
    }
    BoundarySet { coords }
}

const UNREACHED: i64 = i64::MAX / 4;

/// Exact squared Euclidean distance from every pixel to the nearest seed.
///
/// Two separable passes: a per-column 1-D scan followed by a per-row lower
/// envelope of parabolas. All arithmetic is integral, including the envelope
/// breakpoints, so the result is exact. Returns `None` when there are no seeds.
pub fn squared_distance_to_seeds(height: usize, width: usize, seeds: &[(usize, usize)]) -> Option<Vec<i64>> {
    if seeds.is_empty() || height == 0 || width == 0 {
        return None;
    }
    let mut is_seed = vec![false; height * width];
    for &(i, j) in seeds {
        is_seed[i * width + j] = true;
    }

    // Column pass: squared vertical distance to the nearest seed in the column.
    let mut g = vec![UNREACHED; height * width];
    for j in 0..width {
        let mut last: Option<usize> = None;
        for i in 0..height {
            if is_seed[i * width + j] {
                last = Some(i);
            }
            if let Some(s) = last {
                let d = (i - s) as i64;
                g[i * width + j] = d * d;
            }
        }
        let mut next: Option<usize> = None;
        for i in (0..height).rev() {
            if is_seed[i * width + j] {
                next = Some(i);
            }
            if let Some(s) = next {
                let d = (s - i) as i64;
                let cell = &mut g[i * width + j];
                *cell = (*cell).min(d * d);
            }
        }
    }

    // Row pass: lower envelope of parabolas (q - x)^2 + g(x).
    let mut out = vec![0i64; height * width];
    let mut verts: Vec<i64> = Vec::with_capacity(width);
    // Breakpoints as rationals num/den with den > 0; breaks[k] is where verts[k] takes over.
    let mut breaks: Vec<(i64, i64)> = Vec::with_capacity(width);
    for i in 0..height {
        let row = &g[i * width..(i + 1) * width];
        verts.clear();
        breaks.clear();
        for q in 0..width as i64 {
            let fq = row[q as usize];
            if fq >= UNREACHED {
                continue;
            }
            loop {
                let Some(&v) = verts.last() else {
                    verts.push(q);
                    breaks.push((i64::MIN / 4, 1));
                    break;
                };
                let fv = row[v as usize];
                let num = (fq + q * q) - (fv + v * v);
                let den = 2 * (q - v);
                let (bn, bd) = *breaks.last().unwrap();
                // Intersection at or before the current breakpoint hides vertex v.
                if num as i128 * bd as i128 <= bn as i128 * den as i128 {
                    verts.pop();
                    breaks.pop();
                } else {
                    verts.push(q);
                    breaks.push((num, den));
                    break;
                }
            }
        }
        if verts.is_empty() {
            // Row without any reachable column cannot happen when seeds exist,
            // since every column with a seed fills all of its rows.
            out[i * width..(i + 1) * width].fill(UNREACHED);
            continue;
        }
        let mut k = 0;
        for q in 0..width as i64 {
            while k + 1 < verts.len() {
                let (bn, bd) = breaks[k + 1];
                if (bn as i128) <= (q as i128) * (bd as i128) {
                    k += 1;
                } else {
                    break;
                }
            }
            let v = verts[k];
            out[i * width + q as usize] = (q - v) * (q - v) + row[v as usize];
        }
    }
    Some(out)
}

/// Raw distance-to-boundary map. Boundary pixels are 0; an empty boundary
/// yields the cap `cfg.cap` everywhere.
pub fn distance_to_boundary(labels: &LabelGrid, boundary: &BoundarySet, cfg: &GdaConfig) -> WeightGrid {
    let (h, w) = (labels.height(), labels.width());
    match squared_distance_to_seeds(h, w, &boundary.coords) {
        Some(sq) => WeightGrid::new(h, w, sq.iter().map(|&d| (d as f64).sqrt()).collect())
            .expect("distances are finite and non-negative"),
        None => WeightGrid::filled(h, w, cfg.cap),
    }
}

/// Clipped, epoch-decayed weights: `max(min(d, T) - (e/E) T, 1)`.
pub fn gda_weights(raw: &WeightGrid, epoch: usize, cfg: &GdaConfig) -> Result<WeightGrid> {
    cfg.validate()?;
    if epoch > cfg.max_epochs {
        return Err(GsdError::InvalidInput(format!(
            "epoch {epoch} exceeds max epochs {}",
            cfg.max_epochs
        )));
    }
    let shift = epoch as f64 / cfg.max_epochs as f64 * cfg.cap;
    let data = raw
        .data()
        .iter()
        .map(|&d| (d.min(cfg.cap) - shift).max(1.0))
        .collect();
    WeightGrid::new(raw.height(), raw.width(), data)
}

/// Convenience: weights for `labels` at `epoch`.
pub fn gda_weights_for(labels: &LabelGrid, epoch: usize, cfg: &GdaConfig) -> Result<WeightGrid> {
    let b = extract_boundary(labels, cfg.connectivity);
    gda_weights(&distance_to_boundary(labels, &b, cfg), epoch, cfg)
}
