//! SLIC superpixels for intensity (or multi-channel) images.
//!
//! Clustering runs in a joint colour/position space with distance
//! `sqrt(dc^2 + (ds / S)^2 * m^2)`, where colours are scaled to `[0, 100]`,
//! `S` is the grid spacing and `m` the compactness. Centres start on a regular
//! grid, move to the lowest-gradient pixel of their 3x3 neighbourhood, and each
//! centre only claims pixels inside a `2S x 2S` window. A final pass relabels
//! every 4-connected component as its own region and merges fragments smaller
//! than a quarter of the mean region size into an adjacent region.

use crate::error::{GsdError, Result};
use crate::grid::ImageGrid;

const COLOR_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicConfig {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iters: usize,
    pub enforce_connectivity: bool,
}

impl SlicConfig {
    /// About one region per 64 pixels, compactness 10, 10 iterations.
    pub fn for_size(height: usize, width: usize) -> Self {
        Self {
            n_segments: (height * width).div_ceil(64).max(1),
            compactness: 10.0,
            max_iters: 10,
            enforce_connectivity: true,
        }
    }
}

/// Region ids in `[0, num_regions)`; every id is used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelGrid {
    height: usize,
    width: usize,
    num_regions: usize,
    data: Vec<u32>,
}

impl SuperpixelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(GsdError::shape(height * width, data.len()));
        }
        let num_regions = data.iter().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_regions];
        for &v in &data {
            seen[v as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(GsdError::InvalidInput("superpixel ids are not contiguous".into()));
        }
        Ok(Self {
            height,
            width,
            num_regions,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_regions(&self) -> usize {
        self.num_regions
    }
    pub fn data(&self) -> &[u32] {
        &self.data
    }
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.width + j]
    }
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_regions];
        for &v in &self.data {
            sizes[v as usize] += 1;
        }
        sizes
    }
}

impl crate::grid::Shaped for SuperpixelGrid {
    fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Clone, Debug)]
struct Center {
    i: f64,
    j: f64,
    color: Vec<f64>,
}

fn color_at(image: &ImageGrid, i: usize, j: usize) -> impl Iterator<Item = f64> + '_ {
    image.pixel(i, j).iter().map(|v| v * COLOR_SCALE)
}

fn gradient(image: &ImageGrid, i: usize, j: usize) -> f64 {
    let (h, w) = (image.height(), image.width());
    let c = |a: usize, b: usize| image.pixel(a, b);
    let (up, down) = (i.saturating_sub(1), (i + 1).min(h - 1));
    let (left, right) = (j.saturating_sub(1), (j + 1).min(w - 1));
    let mut g = 0.0;
    for k in 0..image.channels() {
        let dv = c(down, j)[k] - c(up, j)[k];
        let dh = c(i, right)[k] - c(i, left)[k];
        g += dv * dv + dh * dh;
    }
    g
}

pub fn slic(image: &ImageGrid, cfg: &SlicConfig) -> Result<SuperpixelGrid> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    if n == 0 {
        return Err(GsdError::InvalidInput("empty image".into()));
    }
    if cfg.n_segments == 0 || cfg.n_segments > n {
        return Err(GsdError::InvalidInput(format!(
            "n_segments {} must be in [1, {n}]",
            cfg.n_segments
        )));
    }
    if !(cfg.compactness > 0.0) {
        return Err(GsdError::InvalidInput("compactness must be positive".into()));
    }

    let step = (n as f64 / cfg.n_segments as f64).sqrt();
    let rows = ((h as f64 / step).round() as usize).max(1);
    let cols = ((w as f64 / step).round() as usize).max(1);
    let (row_step, col_step) = (h as f64 / rows as f64, w as f64 / cols as f64);

    let mut centers: Vec<Center> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let ci = (r as f64 + 0.5) * row_step - 0.5;
            let cj = (c as f64 + 0.5) * col_step - 0.5;
            let (si, sj) = (ci.floor().max(0.0) as usize, cj.floor().max(0.0) as usize);
            // Move only when a strictly flatter pixel exists nearby.
            let mut best = (gradient(image, si, sj), ci, cj);
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (u, v) = (si as isize + di, sj as isize + dj);
                    if u < 0 || v < 0 || u >= h as isize || v >= w as isize {
                        continue;
                    }
                    let g = gradient(image, u as usize, v as usize);
                    if g < best.0 {
                        best = (g, u as f64, v as f64);
                    }
                }
            }
            let (ci, cj) = (best.1, best.2);
            let (pi, pj) = (ci.round() as usize, cj.round() as usize);
            centers.push(Center {
                i: ci,
                j: cj,
                color: color_at(image, pi.min(h - 1), pj.min(w - 1)).collect(),
            });
        }
    }

    let spatial = cfg.compactness / step;
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..cfg.max_iters.max(1) {
        dist.fill(f64::INFINITY);
        for (k, ctr) in centers.iter().enumerate() {
            let i0 = (ctr.i - step).floor().max(0.0) as usize;
            let i1 = ((ctr.i + step).ceil() as usize).min(h - 1);
            let j0 = (ctr.j - step).floor().max(0.0) as usize;
            let j1 = ((ctr.j + step).ceil() as usize).min(w - 1);
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let dc: f64 = color_at(image, i, j)
                        .zip(&ctr.color)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let (di, dj) = (i as f64 - ctr.i, j as f64 - ctr.j);
                    let d = dc + (di * di + dj * dj) * spatial * spatial;
                    let p = i * w + j;
                    // Strict comparison: the lowest centre id wins ties.
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        let ch = image.channels();
        let mut sums = vec![(0.0f64, 0.0f64, vec![0.0f64; ch], 0usize); centers.len()];
        for i in 0..h {
            for j in 0..w {
                let l = labels[i * w + j];
                if l == u32::MAX {
                    continue;
                }
                let s = &mut sums[l as usize];
                s.0 += i as f64;
                s.1 += j as f64;
                for (acc, v) in s.2.iter_mut().zip(color_at(image, i, j)) {
                    *acc += v;
                }
                s.3 += 1;
            }
        }
        for (ctr, (si, sj, sc, cnt)) in centers.iter_mut().zip(sums) {
            if cnt > 0 {
                let c = cnt as f64;
                ctr.i = si / c;
                ctr.j = sj / c;
                ctr.color = sc.into_iter().map(|v| v / c).collect();
            }
        }
    }

    // Pixels no window reached (possible only with extreme aspect ratios) go to the nearest centre.
    for p in 0..n {
        if labels[p] == u32::MAX {
            let (i, j) = ((p / w) as f64, (p % w) as f64);
            let k = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1.i - i).powi(2) + (a.1.j - j).powi(2);
                    let db = (b.1.i - i).powi(2) + (b.1.j - j).powi(2);
                    da.total_cmp(&db).then(a.0.cmp(&b.0))
                })
                .map(|(k, _)| k)
                .unwrap();
            labels[p] = k as u32;
        }
    }

    let data = if cfg.enforce_connectivity {
        let min_size = (n / centers.len().max(1) / 4).max(1);
        enforce_connectivity(image, &labels, h, w, min_size)
    } else {
        compact_ids(&labels)
    };
    SuperpixelGrid::new(h, w, data)
}

fn compact_ids(labels: &[u32]) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len() as u32;
            *map.entry(l).or_insert(next)
        })
        .collect()
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Splits clusters into 4-connected components; small components join the
/// colour-nearest adjacent region that was finalised earlier in scan order.
fn enforce_connectivity(image: &ImageGrid, labels: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let n = h * w;
    let mut out = vec![u32::MAX; n];
    let mut region_color: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..n {
        if out[start] != u32::MAX {
            continue;
        }
        // Flood the component of `start` under the cluster labels.
        component.clear();
        stack.push(start);
        out[start] = u32::MAX - 1;
        while let Some(p) = stack.pop() {
            component.push(p);
            let (i, j) = ((p / w) as isize, (p % w) as isize);
            for (di, dj) in NEIGHBORS {
                let (u, v) = (i + di, j + dj);
                if u < 0 || v < 0 || u >= h as isize || v >= w as isize {
                    continue;
                }
                let q = u as usize * w + v as usize;
                if out[q] == u32::MAX && labels[q] == labels[start] {
                    out[q] = u32::MAX - 1;
                    stack.push(q);
                }
            }
        }
        let mut color = vec![0.0; image.channels()];
        for &p in &component {
            for (acc, v) in color.iter_mut().zip(color_at(image, p / w, p % w)) {
                *acc += v;
            }
        }
        let target = if component.len() < min_size {
            // Adjacent regions finalised earlier; the scan order guarantees one
            // exists unless this component contains pixel 0.
            let mut best: Option<(f64, u32)> = None;
            for &p in &component {
                let (i, j) = ((p / w) as isize, (p % w) as isize);
                for (di, dj) in NEIGHBORS {
                    let (u, v) = (i + di, j + dj);
                    if u < 0 || v < 0 || u >= h as isize || v >= w as isize {
                        continue;
                    }
                    let r = out[u as usize * w + v as usize];
                    if r >= u32::MAX - 1 {
                        continue;
                    }
                    let (rc, rn) = &region_color[r as usize];
                    let d: f64 = rc
                        .iter()
                        .zip(&color)
                        .map(|(a, b)| {
                            let diff = a / *rn as f64 - b / component.len() as f64;
                            diff * diff
                        })
                        .sum();
                    if best.is_none_or(|(bd, br)| d < bd || (d == bd && r < br)) {
                        best = Some((d, r));
                    }
                }
            }
            best.map(|(_, r)| r)
        } else {
            None
        };
        let id = match target {
            Some(r) => {
                let entry = &mut region_color[r as usize];
                for (acc, v) in entry.0.iter_mut().zip(&color) {
                    *acc += v;
                }
                entry.1 += component.len();
                r
            }
            None => {
                region_color.push((color, component.len()));
                (region_color.len() - 1) as u32
            }
        };
        for &p in &component {
            out[p] = id;
        }
    }
    out
}

/// Grayscale preview: mean intensity with region boundaries drawn white.
pub fn boundary_overlay(image: &ImageGrid, regions: &SuperpixelGrid) -> Result<ImageGrid> {
    let (h, w) = (image.height(), image.width());
    if (regions.height(), regions.width()) != (h, w) {
        return Err(GsdError::shape(format!("{h}x{w}"), format!("{}x{}", regions.height(), regions.width())));
    }
    let c = image.channels();
    let data = (0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            let id = regions.get(i, j);
            let edge = (i + 1 < h && regions.get(i + 1, j) != id) || (j + 1 < w && regions.get(i, j + 1) != id);
            if edge {
                1.0
            } else {
                image.pixel(i, j).iter().sum::<f64>() / c as f64
            }
        })
        .collect();
    ImageGrid::new(h, w, 1, data)
}
