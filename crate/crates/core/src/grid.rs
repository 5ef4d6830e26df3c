//! Dense 2-D grids with row-major, channel-last storage (`[i, j, c]`).
//!
//! All grids are plain values: construction validates the documented
//! invariants and nothing mutates them afterwards except through the
//! explicit `*_mut` accessors used by the in-crate algorithms.

use crate::error::{GsdError, Result};

/// Lower clamp applied to every probability before a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

/// Tolerance for the per-pixel simplex check on [`ProbGrid`].
pub const SIMPLEX_TOL: f64 = 1e-6;

#[inline]
pub(crate) fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(GsdError::InvalidInput(format!(
            "{what}: data length {actual} does not match shape ({expected})"
        )));
    }
    Ok(())
}

/// Intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_len("image", height * width * channels, data.len())?;
        if channels == 0 {
            return Err(GsdError::InvalidInput("image needs at least one channel".into()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(GsdError::InvalidInput(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }
    /// Pixel vector at `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let s = (i * self.width + j) * self.channels;
        &self.data[s..s + self.channels]
    }

    /// Builds an image by clipping arbitrary finite values into `[0, 1]`.
    pub fn from_clipped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        check_len("image", height * width * channels, data.len())?;
        for v in &mut data {
            if !v.is_finite() {
                return Err(GsdError::NonFinite("image value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

/// Integer class map; every id is in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        check_len("labels", height * width, data.len())?;
        if num_classes == 0 || num_classes > 256 {
            return Err(GsdError::InvalidInput(format!(
                "num_classes {num_classes} outside [1, 256]"
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v as usize >= num_classes) {
            return Err(GsdError::InvalidInput(format!(
                "label {} at pixel {pos} is not below num_classes {num_classes}",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Self {
        assert!((class as usize) < num_classes);
        Self {
            height,
            width,
            num_classes,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    /// Foreground mask of a binary label grid (class 1).
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == 1).collect(),
        }
    }

    /// Binary label grid from a foreground mask.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            num_classes: 2,
            data: mask.data.iter().map(|&b| b as u8).collect(),
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len() as f64
    }

    pub(crate) fn same_shape<T: Shaped>(&self, other: &T) -> Result<()> {
        same_hw(self, other)
    }
}

/// Raw per-pixel class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl LogitGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        check_len("logits", height * width * num_classes, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GsdError::NonFinite("logit".into()));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            data: vec![0.0; height * width * num_classes],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.num_classes..(p + 1) * self.num_classes]
    }

    pub(crate) fn from_raw(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * num_classes);
        Self {
            height,
            width,
            num_classes,
            data,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &LogitGrid) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Per-pixel class probabilities; each pixel lies on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        check_len("probabilities", height * width * num_classes, data.len())?;
        if num_classes == 0 {
            return Err(GsdError::InvalidInput("zero classes".into()));
        }
        for (p, px) in data.chunks_exact(num_classes).enumerate() {
            if px.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(GsdError::InvalidInput(format!(
                    "negative or non-finite probability at pixel {p}"
                )));
            }
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(GsdError::InvalidInput(format!(
                    "probabilities at pixel {p} sum to {s}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * num_classes);
        Self {
            height,
            width,
            num_classes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.num_classes..(p + 1) * self.num_classes]
    }
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.num_classes + c]
    }

    pub(crate) fn same_shape(&self, other: &ProbGrid) -> Result<()> {
        if (self.height, self.width, self.num_classes) != (other.height, other.width, other.num_classes) {
            return Err(GsdError::shape(
                format!("{}x{}x{}", self.height, self.width, self.num_classes),
                format!("{}x{}x{}", other.height, other.width, other.num_classes),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_labels(&self, labels: &LabelGrid) -> Result<()> {
        same_hw(self, labels)?;
        if labels.num_classes() != self.num_classes {
            return Err(GsdError::shape(
                format!("{} classes", self.num_classes),
                format!("{} classes", labels.num_classes()),
            ));
        }
        Ok(())
    }
}

/// Exact 0/1 mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_len("mask", height * width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub(crate) fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }
}

/// Positive per-pixel weights (raw distances or clipped GDA weights).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl WeightGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len("weights", height * width, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(GsdError::InvalidInput(format!("weight {v} is negative or non-finite")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
    pub fn scaled(&self, k: f64) -> WeightGrid {
        WeightGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }
}

/// Anything with a height and width.
pub trait Shaped {
    fn hw(&self) -> (usize, usize);
}

macro_rules! impl_shaped {
    ($($t:ty),*) => {$(
        impl Shaped for $t {
            fn hw(&self) -> (usize, usize) {
                (self.height, self.width)
            }
        }
    )*};
}
impl_shaped!(ImageGrid, LabelGrid, LogitGrid, ProbGrid, BinaryMask, WeightGrid);

pub(crate) fn same_hw<A: Shaped + ?Sized, B: Shaped + ?Sized>(a: &A, b: &B) -> Result<()> {
    let (ah, aw) = a.hw();
    let (bh, bw) = b.hw();
    if (ah, aw) != (bh, bw) {
        return Err(GsdError::shape(format!("{ah}x{aw}"), format!("{bh}x{bw}")));
    }
    Ok(())
}

/// Per-pixel softmax, stabilised by subtracting the pixel maximum.
pub fn softmax_pixelwise(logits: &LogitGrid) -> Result<ProbGrid> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(GsdError::NonFinite("softmax input".into()));
    }
    let c = logits.num_classes;
    let mut out = vec![0.0; logits.data.len()];
    for (src, dst) in logits.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, &z) in dst.iter_mut().zip(src) {
            *d = (z - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    Ok(ProbGrid::from_raw(logits.height, logits.width, c, out))
}

pub fn one_hot(labels: &LabelGrid) -> ProbGrid {
    let c = labels.num_classes;
    let mut out = vec![0.0; labels.data.len() * c];
    for (p, &l) in labels.data.iter().enumerate() {
        out[p * c + l as usize] = 1.0;
    }
    ProbGrid::from_raw(labels.height, labels.width, c, out)
}

/// Per-pixel argmax; ties go to the smallest class id.
pub fn argmax_pixelwise(probs: &ProbGrid) -> LabelGrid {
    let c = probs.num_classes;
    let data = probs
        .data
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelGrid {
        height: probs.height,
        width: probs.width,
        num_classes: c,
        data,
    }
}
