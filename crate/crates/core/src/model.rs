//! A two-level encoder-decoder per-pixel classifier with a hand-written
//! reverse pass.
//!
//! Layout of every activation is `[pixel, channel]` (row-major pixels,
//! channels contiguous), the same as the grids. Convolutions are im2col
//! followed by one GEMM. Parameters are stored as `f32` (the checkpoint
//! precision); all arithmetic runs in `f64`.
//!
//! ```text
//! x ─ enc1a ─ enc1b ─┬─ pool ─ enc2a ─ enc2b ─ up ─┐
//!                    └──────────── skip ───────────┴─ concat ─ dec1a ─ dec1b ─ head
//! ```

use std::io::Write as _;
use std::path::Path;

use crate::error::{GsdError, Result};
use crate::grid::{same_hw, BinaryMask, ImageGrid, LabelGrid, LogitGrid, ProbGrid, WeightGrid, PROB_FLOOR};
use crate::rng::SeededRng;

const MAGIC: &[u8; 4] = b"GSDM";
const FORMAT_VERSION: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first level (`F`); the second level has `2F`.
    pub base_width: usize,
    /// Inputs enter the first layer as `(x - input_shift) * input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 8,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.base_width == 0 {
            return Err(GsdError::Config(format!("invalid model dimensions {self:?}")));
        }
        if !self.input_shift.is_finite() || !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(GsdError::Config(format!("invalid input normalisation {self:?}")));
        }
        Ok(())
    }

    /// `(name, kernel, c_in, c_out)` for every layer, in forward order.
    fn layer_specs(&self) -> [(&'static str, usize, usize, usize); 7] {
        let (c, k, f) = (self.in_channels, self.num_classes, self.base_width);
        [
            ("enc1a", 3, c, f),
            ("enc1b", 3, f, f),
            ("enc2a", 3, f, 2 * f),
            ("enc2b", 3, 2 * f, 2 * f),
            ("dec1a", 3, 3 * f, f),
            ("dec1b", 3, f, f),
            ("head", 1, f, k),
        ]
    }
}

/// One convolution: weights laid out `[ky][kx][c_in][c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layers: Vec<ConvLayer>,
}

impl ModelParams {
    /// Fan-in scaled uniform initialisation (`U(-b, b)`, `b = sqrt(6 / fan_in)`
    /// before a rectifier, `sqrt(3 / fan_in)` for the head); zero biases.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        let layers = specs
            .iter()
            .enumerate()
            .map(|(idx, &(name, kernel, c_in, c_out))| {
                let fan_in = (kernel * kernel * c_in) as f64;
                let gain = if idx + 1 == specs.len() { 3.0 } else { 6.0 };
                let bound = (gain / fan_in).sqrt();
                let weight = (0..kernel * kernel * c_in * c_out)
                    .map(|_| rng.uniform_range(-bound, bound) as f32)
                    .collect();
                ConvLayer {
                    name: name.to_string(),
                    kernel,
                    c_in,
                    c_out,
                    weight,
                    bias: vec![0.0; c_out],
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }
    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in flat order: each layer's weights, then its biases.
    pub fn flat(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    fn locate(&self, mut idx: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if idx < l.weight.len() {
                return (li, false, idx);
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return (li, true, idx);
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn get(&self, idx: usize) -> f32 {
        match self.locate(idx) {
            (l, false, i) => self.layers[l].weight[i],
            (l, true, i) => self.layers[l].bias[i],
        }
    }

    pub fn set(&mut self, idx: usize, value: f32) {
        match self.locate(idx) {
            (l, false, i) => self.layers[l].weight[i] = value,
            (l, true, i) => self.layers[l].bias[i] = value,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Serialises to the `GSDM` layout (all integers little-endian):
    ///
    /// ```text
    /// "GSDM" | u32 version | u32 c_in | u32 classes | u32 width
    /// f64 input_shift | f64 input_scale | u32 tensors
    /// per tensor: u32 name_len | name | u32 rank | u32 dims[rank]
    /// f32 data of every tensor, in table order
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.config.in_channels as u32,
            self.config.num_classes as u32,
            self.config.base_width as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config.input_shift.to_le_bytes());
        out.extend_from_slice(&self.config.input_scale.to_le_bytes());
        out.extend_from_slice(&(2 * self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let tensors: [(String, Vec<usize>); 2] = [
                (format!("{}.weight", l.name), vec![l.kernel, l.kernel, l.c_in, l.c_out]),
                (format!("{}.bias", l.name), vec![l.c_out]),
            ];
            for (name, dims) in tensors {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for d in dims {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
            }
        }
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(GsdError::Format {
                offset: 0,
                message: "bad magic, expected GSDM".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GsdError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let config = ModelConfig {
            in_channels: r.u32()? as usize,
            num_classes: r.u32()? as usize,
            base_width: r.u32()? as usize,
            input_shift: r.f64()?,
            input_scale: r.f64()?,
        };
        config.validate().map_err(|e| GsdError::Format {
            offset: 8,
            message: e.to_string(),
        })?;
        let specs = config.layer_specs();
        let table_offset = r.pos;
        let count = r.u32()? as usize;
        if count != 2 * specs.len() {
            return Err(GsdError::Format {
                offset: table_offset,
                message: format!("expected {} tensors, found {count}", 2 * specs.len()),
            });
        }
        for &(name, kernel, c_in, c_out) in &specs {
            let expected: [(String, Vec<usize>); 2] = [
                (format!("{name}.weight"), vec![kernel, kernel, c_in, c_out]),
                (format!("{name}.bias"), vec![c_out]),
            ];
            for (want_name, want_dims) in expected {
                let at = r.pos;
                let len = r.u32()? as usize;
                let got_name = r.take(len)?;
                let rank = r.u32()? as usize;
                let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if got_name != want_name.as_bytes() || dims != want_dims {
                    return Err(GsdError::Format {
                        offset: at,
                        message: format!("layer table entry does not match {want_name} {want_dims:?}"),
                    });
                }
            }
        }
        let data_len: usize = specs.iter().map(|&(_, k, ci, co)| k * k * ci * co + co).sum::<usize>() * 4;
        if bytes.len() - r.pos != data_len {
            return Err(GsdError::Truncated {
                expected: r.pos + data_len,
                actual: bytes.len(),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        for &(name, kernel, c_in, c_out) in &specs {
            let weight = (0..kernel * kernel * c_in * c_out).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let bias = (0..c_out).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            layers.push(ConvLayer {
                name: name.to_string(),
                kernel,
                c_in,
                c_out,
                weight,
                bias,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GsdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| GsdError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| GsdError::io(&tmp, e))?;
    f.sync_all().map_err(|e| GsdError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| GsdError::io(path, e))
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GsdError::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            weight: params.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight).chain(self.bias.iter_mut().zip(&other.bias)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()).flatten() {
            *v *= k;
        }
    }

    /// Flat order matching [`ModelParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).flatten().all(|v| v.is_finite())
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.weight.len() == params.layers.len()
            && params
                .layers
                .iter()
                .enumerate()
                .all(|(i, l)| self.weight[i].len() == l.weight.len() && self.bias[i].len() == l.bias.len())
    }
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    height: usize,
    width: usize,
    config: ModelConfig,
    /// `f64` copies of the weights, one per layer.
    weights: Vec<Vec<f64>>,
    /// im2col matrices of every layer input (the head's is `acts[5]`).
    cols: Vec<Vec<f64>>,
    /// Rectified outputs of the six hidden convolutions.
    acts: Vec<Vec<f64>>,
    /// For each pooled value, the source index into `acts[1]`.
    pool_arg: Vec<usize>,
}

impl ForwardTape {
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// True when both passes took the same branch at every rectifier and
    /// every pooling window, i.e. the network is the same smooth function
    /// of its parameters at both points.
    pub fn same_branches(&self, other: &ForwardTape) -> bool {
        self.hw() == other.hw()
            && self.pool_arg == other.pool_arg
            && self.acts.len() == other.acts.len()
            && self
                .acts
                .iter()
                .zip(&other.acts)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0)))
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given slices
    // (checked by the callers' shapes) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3 zero-padded patches: row `p` holds `[ky][kx][c]` around pixel `p`.
fn im2col3(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; h * w * k];
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * k..(i * w + j + 1) * k];
            for dy in 0..3 {
                let y = i as isize + dy as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = j as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = (y as usize * w + xx as usize) * c;
                    let dst = (dy * 3 + dx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
fn col2im3(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut x = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let row = &cols[(i * w + j) * k..(i * w + j + 1) * k];
            for dy in 0..3 {
                let y = i as isize + dy as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = j as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let dst = (y as usize * w + xx as usize) * c;
                    let src = (dy * 3 + dx) * c;
                    for (a, b) in x[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *a += b;
                    }
                }
            }
        }
    }
    x
}

/// `cols (n x k) * weight (k x c_out) + bias`.
fn conv_forward(cols: &[f64], n: usize, k: usize, weight: &[f64], bias: &[f32], c_out: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().map(|&b| b as f64)).collect();
    gemm(n, k, c_out, (cols, k as isize, 1), (weight, c_out as isize, 1), 1.0, &mut out);
    out
}

/// Accumulates weight and bias gradients; returns `d cols` if requested.
fn conv_backward(
    cols: &[f64],
    n: usize,
    k: usize,
    weight: &[f64],
    c_out: usize,
    g_out: &[f64],
    g_weight: &mut [f64],
    g_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    gemm(k, n, c_out, (cols, 1, k as isize), (g_out, c_out as isize, 1), 1.0, g_weight);
    for row in g_out.chunks_exact(c_out) {
        for (b, g) in g_bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    want_input.then(|| {
        let mut g_cols = vec![0.0; n * k];
        gemm(n, c_out, k, (g_out, c_out as isize, 1), (weight, 1, c_out as isize), 0.0, &mut g_cols);
        g_cols
    })
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `g` wherever the rectified output was not positive.
fn relu_mask(g: &mut [f64], act: &[f64]) {
    for (g, &a) in g.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; ties go to the first element in row-major window order.
fn max_pool(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * c];
    let mut arg = vec![0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let mut best = (2 * i * w + 2 * j) * c + ch;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[(i * wo + j) * c + ch] = x[best];
                arg[(i * wo + j) * c + ch] = best;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling of `src` into channels `[0, c)` of a
/// `3F`-wide concat buffer, with the skip tensor in channels `[c, c + f)`.
fn upsample_concat(src: &[f64], skip: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let wo = w / 2;
    let cc = c + f;
    let mut out = vec![0.0; h * w * cc];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let q = (i / 2) * wo + j / 2;
            out[p * cc..p * cc + c].copy_from_slice(&src[q * c..(q + 1) * c]);
            out[p * cc + c..(p + 1) * cc].copy_from_slice(&skip[p * f..(p + 1) * f]);
        }
    }
    out
}

/// Forward pass. Height and width must be even.
pub fn forward(params: &ModelParams, x: &ImageGrid) -> Result<(LogitGrid, ForwardTape)> {
    let cfg = params.config;
    let (h, w) = (x.height(), x.width());
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(GsdError::InvalidInput(format!("image {h}x{w} must have even, non-zero sides")));
    }
    if x.channels() != cfg.in_channels {
        return Err(GsdError::shape(cfg.in_channels, x.channels()));
    }
    let f = cfg.base_width;
    let (n, nq) = (h * w, (h / 2) * (w / 2));
    let weights: Vec<Vec<f64>> = params
        .layers
        .iter()
        .map(|l| l.weight.iter().map(|&v| v as f64).collect())
        .collect();
    let layer = |idx: usize, cols: &[f64], rows: usize| {
        let l = &params.layers[idx];
        conv_forward(cols, rows, l.fan_in(), &weights[idx], &l.bias, l.c_out)
    };

    let input: Vec<f64> = x.data().iter().map(|v| (v - cfg.input_shift) * cfg.input_scale).collect();
    let cols0 = im2col3(&input, h, w, cfg.in_channels);
    let mut a1 = layer(0, &cols0, n);
    relu_in_place(&mut a1);
    let cols1 = im2col3(&a1, h, w, f);
    let mut a2 = layer(1, &cols1, n);
    relu_in_place(&mut a2);
    let (pooled, pool_arg) = max_pool(&a2, h, w, f);
    let cols2 = im2col3(&pooled, h / 2, w / 2, f);
    let mut a3 = layer(2, &cols2, nq);
    relu_in_place(&mut a3);
    let cols3 = im2col3(&a3, h / 2, w / 2, 2 * f);
    let mut a4 = layer(3, &cols3, nq);
    relu_in_place(&mut a4);
    let cat = upsample_concat(&a4, &a2, h, w, 2 * f, f);
    let cols4 = im2col3(&cat, h, w, 3 * f);
    let mut a5 = layer(4, &cols4, n);
    relu_in_place(&mut a5);
    let cols5 = im2col3(&a5, h, w, f);
    let mut a6 = layer(5, &cols5, n);
    relu_in_place(&mut a6);
    let logits = layer(6, &a6, n);

    if logits.iter().any(|v| !v.is_finite()) {
        return Err(GsdError::NonFinite("model logits".into()));
    }
    let tape = ForwardTape {
        height: h,
        width: w,
        config: cfg,
        weights,
        cols: vec![cols0, cols1, cols2, cols3, cols4, cols5],
        acts: vec![a1, a2, a3, a4, a5, a6],
        pool_arg,
    };
    Ok((LogitGrid::from_raw(h, w, cfg.num_classes, logits), tape))
}

/// Logits only.
pub fn predict(params: &ModelParams, x: &ImageGrid) -> Result<LogitGrid> {
    forward(params, x).map(|(l, _)| l)
}

/// Exact gradients of a scalar loss given its gradient at the logits.
pub fn backward(tape: &ForwardTape, g_logits: &LogitGrid) -> Result<ParamGradients> {
    let cfg = tape.config;
    let (h, w) = (tape.height, tape.width);
    if (g_logits.height(), g_logits.width()) != (h, w) || g_logits.num_classes() != cfg.num_classes {
        return Err(GsdError::shape(
            format!("{h}x{w}x{}", cfg.num_classes),
            format!("{}x{}x{}", g_logits.height(), g_logits.width(), g_logits.num_classes()),
        ));
    }
    let f = cfg.base_width;
    let (n, nq) = (h * w, (h / 2) * (w / 2));
    let specs = cfg.layer_specs();
    let mut gw: Vec<Vec<f64>> = specs.iter().map(|&(_, k, ci, co)| vec![0.0; k * k * ci * co]).collect();
    let mut gb: Vec<Vec<f64>> = specs.iter().map(|&(_, _, _, co)| vec![0.0; co]).collect();
    let fan = |idx: usize| specs[idx].1 * specs[idx].1 * specs[idx].2;

    let mut step = |idx: usize, cols: &[f64], rows: usize, g: &[f64], want: bool| {
        conv_backward(
            cols,
            rows,
            fan(idx),
            &tape.weights[idx],
            specs[idx].3,
            g,
            &mut gw[idx],
            &mut gb[idx],
            want,
        )
    };

    let mut g6 = step(6, &tape.acts[5], n, g_logits.data(), true).expect("requested");
    relu_mask(&mut g6, &tape.acts[5]);
    let gc5 = step(5, &tape.cols[5], n, &g6, true).expect("requested");
    let mut g5 = col2im3(&gc5, h, w, f);
    relu_mask(&mut g5, &tape.acts[4]);
    let gc4 = step(4, &tape.cols[4], n, &g5, true).expect("requested");
    let g_cat = col2im3(&gc4, h, w, 3 * f);

    let (c_up, cc) = (2 * f, 3 * f);
    let wq = w / 2;
    let mut g4 = vec![0.0; nq * c_up];
    let mut g2 = vec![0.0; n * f];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let q = (i / 2) * wq + j / 2;
            let row = &g_cat[p * cc..(p + 1) * cc];
            for (a, b) in g4[q * c_up..(q + 1) * c_up].iter_mut().zip(&row[..c_up]) {
                *a += b;
            }
            for (a, b) in g2[p * f..(p + 1) * f].iter_mut().zip(&row[c_up..]) {
                *a += b;
            }
        }
    }
    relu_mask(&mut g4, &tape.acts[3]);
    let gc3 = step(3, &tape.cols[3], nq, &g4, true).expect("requested");
    let mut g3 = col2im3(&gc3, h / 2, w / 2, 2 * f);
    relu_mask(&mut g3, &tape.acts[2]);
    let gc2 = step(2, &tape.cols[2], nq, &g3, true).expect("requested");
    let g_pool = col2im3(&gc2, h / 2, w / 2, f);
    for (&src, g) in tape.pool_arg.iter().zip(&g_pool) {
        g2[src] += g;
    }
    relu_mask(&mut g2, &tape.acts[1]);
    let gc1 = step(1, &tape.cols[1], n, &g2, true).expect("requested");
    let mut g1 = col2im3(&gc1, h, w, f);
    relu_mask(&mut g1, &tape.acts[0]);
    step(0, &tape.cols[0], n, &g1, false);

    Ok(ParamGradients { weight: gw, bias: gb })
}

/// One differentiable term of a scalar loss on a single probability grid.
/// Pixel sums are multiplied by `scale` (usually `1 / N` or `1 / |clean|`).
#[derive(Clone, Copy, Debug)]
pub enum LossTerm<'a> {
    /// `scale * sum_p [mask] w_p * CE_p`.
    Ce {
        target: &'a LabelGrid,
        weights: Option<&'a WeightGrid>,
        mask: Option<&'a BinaryMask>,
        scale: f64,
    },
    /// `scale * DiceLoss` on the foreground channel.
    Dice { target: &'a LabelGrid, scale: f64 },
    /// `scale * sum_p [mask] w_p * symKL(p, partner)`; the partner is held fixed.
    SymKl {
        partner: &'a ProbGrid,
        weights: Option<&'a WeightGrid>,
        mask: Option<&'a BinaryMask>,
        scale: f64,
    },
}

fn pixel_factor(p: usize, weights: Option<&WeightGrid>, mask: Option<&BinaryMask>) -> f64 {
    if mask.is_some_and(|m| !m.data()[p]) {
        return 0.0;
    }
    weights.map_or(1.0, |w| w.data()[p])
}

/// Closed-form gradient at the softmax inputs of a sum of loss terms.
pub fn loss_grad_at_logits(probs: &ProbGrid, terms: &[LossTerm<'_>]) -> Result<LogitGrid> {
    let c = probs.num_classes();
    let n = probs.num_pixels();
    let mut out = vec![0.0; n * c];
    // Gradient w.r.t. the probabilities, pushed through the softmax at the end.
    let mut g_prob = vec![0.0; n * c];
    for term in terms {
        match *term {
            LossTerm::Ce {
                target,
                weights,
                mask,
                scale,
            } => {
                probs.check_labels(target)?;
                if let Some(w) = weights {
                    same_hw(probs, w)?;
                }
                if let Some(m) = mask {
                    same_hw(probs, m)?;
                }
                for p in 0..n {
                    let k = scale * pixel_factor(p, weights, mask);
                    let y = target.data()[p] as usize;
                    let px = probs.pixel(p);
                    if k == 0.0 || px[y] < PROB_FLOOR {
                        continue;
                    }
                    for (cls, o) in out[p * c..(p + 1) * c].iter_mut().enumerate() {
                        *o += k * (px[cls] - (cls == y) as u8 as f64);
                    }
                }
            }
            LossTerm::Dice { target, scale } => {
                probs.check_labels(target)?;
                let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
                for (p, &y) in target.data().iter().enumerate() {
                    let pf = probs.pixel(p)[1];
                    let yf = (y == 1) as u8 as f64;
                    inter += pf * yf;
                    psum += pf;
                    ysum += yf;
                }
                let den = psum + ysum + crate::losses::DICE_EPS;
                let num = 2.0 * inter + crate::losses::DICE_EPS;
                for (p, &y) in target.data().iter().enumerate() {
                    let yf = (y == 1) as u8 as f64;
                    g_prob[p * c + 1] += -scale * (2.0 * yf * den - num) / (den * den);
                }
            }
            LossTerm::SymKl {
                partner,
                weights,
                mask,
                scale,
            } => {
                probs.same_shape(partner)?;
                if let Some(w) = weights {
                    same_hw(probs, w)?;
                }
                if let Some(m) = mask {
                    same_hw(probs, m)?;
                }
                for p in 0..n {
                    let k = scale * pixel_factor(p, weights, mask);
                    if k == 0.0 {
                        continue;
                    }
                    let (a, b) = (probs.pixel(p), partner.pixel(p));
                    for cls in 0..c {
                        let la = crate::grid::clamped_ln(a[cls]);
                        let lb = crate::grid::clamped_ln(b[cls]);
                        let mut g = la - lb;
                        if a[cls] >= PROB_FLOOR {
                            g += (a[cls] - b[cls]) / a[cls];
                        }
                        g_prob[p * c + cls] += k * g;
                    }
                }
            }
        }
    }
    for p in 0..n {
        let px = probs.pixel(p);
        let g = &g_prob[p * c..(p + 1) * c];
        let dot: f64 = px.iter().zip(g).map(|(a, b)| a * b).sum();
        for cls in 0..c {
            out[p * c + cls] += px[cls] * (g[cls] - dot);
        }
    }
    Ok(LogitGrid::from_raw(probs.height(), probs.width(), c, out))
}
