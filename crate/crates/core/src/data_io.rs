//! Synthetic data generation and the on-disk formats.
//!
//! * Images and labels: binary PGM (`P5`, maxval 255). Image bytes are
//!   `round(255 v)`; label bytes are class ids.
//! * Float grids: the `GSDT` container,
//!   `"GSDT" | u8 version | u8 dtype (1 = f32) | u8 rank | u32 dims[rank] | f32 payload`,
//!   little-endian, row-major with the channel axis last.
//! * Manifest: one `split<TAB>image<TAB>clean<TAB>noisy` line per sample,
//!   paths relative to the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{GsdError, Result};
use crate::grid::{BinaryMask, ImageGrid, LabelGrid, ProbGrid, WeightGrid};
use crate::model::{write_atomic, ByteReader};
use crate::noise::{measure_noise, simulate, NoiseReport, NoiseSpec};
use crate::rng::SeededRng;
use crate::superpixel::SuperpixelGrid;

const GSDT_MAGIC: &[u8; 4] = b"GSDT";
const GSDT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    /// Ellipse whose radius follows a closed random walk in angle.
    #[default]
    Blob,
}

impl std::str::FromStr for ShapeKind {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "blob" => Ok(ShapeKind::Blob),
            _ => Err(GsdError::Config(format!("unknown shape {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapesSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub shape: ShapeKind,
    pub fg_fraction_range: (f64, f64),
    /// Background mean intensity range.
    pub background_range: (f64, f64),
    /// Foreground minus background mean intensity.
    pub contrast_range: (f64, f64),
    /// Width of the soft intensity transition at the boundary, in pixels.
    pub edge_softness: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            n_train: 60,
            n_test: 40,
            image_size: 64,
            shape: ShapeKind::Blob,
            fg_fraction_range: (0.05, 0.3),
            background_range: (0.25, 0.45),
            contrast_range: (0.15, 0.4),
            edge_softness: 1.5,
            noise_sigma: 0.08,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fg_fraction_range;
        if self.n_train == 0 || self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(GsdError::Config(
                "need n_train >= 1 and an even image_size >= 8".into(),
            ));
        }
        if !(lo > 0.0 && lo <= hi && hi < 0.6) {
            return Err(GsdError::Config(format!("fg_fraction_range ({lo}, {hi}) must satisfy 0 < min <= max < 0.6")));
        }
        let (c0, c1) = self.contrast_range;
        let (b0, b1) = self.background_range;
        if !(0.0 <= b0 && b0 <= b1 && 0.0 < c0 && c0 <= c1 && b1 + c1 <= 1.0) {
            return Err(GsdError::Config("intensity ranges must keep means inside [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.edge_softness >= 0.0) {
            return Err(GsdError::Config("noise_sigma and edge_softness must be >= 0".into()));
        }
        Ok(())
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments. Returns
/// `(line number, key, value)`.
pub(crate) fn kv_lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GsdError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| GsdError::Config(format!("bad value {v:?} for {key}")))
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| GsdError::Config(format!("{key} expects `lo, hi`")))?;
    Ok((parse_value(key, a.trim())?, parse_value(key, b.trim())?))
}

impl ShapesSpec {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_train" => self.n_train = parse_value(key, v)?,
            "n_test" => self.n_test = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "shape" => self.shape = v.parse()?,
            "fg_fraction_range" => self.fg_fraction_range = parse_range(key, v)?,
            "background_range" => self.background_range = parse_range(key, v)?,
            "contrast_range" => self.contrast_range = parse_range(key, v)?,
            "edge_softness" => self.edge_softness = parse_value(key, v)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(GsdError::Config(format!("unknown spec key {key:?}"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults; ranges are `lo, hi`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (line, k, v) in kv_lines(text)? {
            spec.set(k, v).map_err(|e| GsdError::Config(format!("line {line}: {e}")))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let shape = match self.shape {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Blob => "blob",
        };
        let r = |(a, b): (f64, f64)| format!("{a}, {b}");
        format!(
            "n_train = {}\nn_test = {}\nimage_size = {}\nshape = {shape}\nfg_fraction_range = {}\n\
             background_range = {}\ncontrast_range = {}\nedge_softness = {}\nnoise_sigma = {}\nseed = {}\n",
            self.n_train,
            self.n_test,
            self.image_size,
            r(self.fg_fraction_range),
            r(self.background_range),
            r(self.contrast_range),
            self.edge_softness,
            self.noise_sigma,
            self.seed
        )
    }
}

/// One training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageGrid,
    pub clean: LabelGrid,
    pub noisy: LabelGrid,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Mean realised noise rate of the training split.
    pub fn mean_noise_rate(&self) -> Result<f64> {
        if self.train.is_empty() {
            return Ok(0.0);
        }
        let mut s = 0.0;
        for x in &self.train {
            s += measure_noise(&x.clean, &x.noisy)?.realized_rate;
        }
        Ok(s / self.train.len() as f64)
    }

    /// Mean foreground fraction of the noisy training labels.
    pub fn mean_foreground_fraction(&self) -> f64 {
        if self.train.is_empty() {
            return 0.0;
        }
        self.train.iter().map(|x| x.noisy.foreground_fraction()).sum::<f64>() / self.train.len() as f64
    }

    /// Replaces every training label with a simulated noisy copy of the
    /// clean one. Sample `k` uses a seed derived from `(spec.seed, k)`.
    pub fn apply_noise(&mut self, spec: &NoiseSpec) -> Result<Vec<NoiseReport>> {
        self.train
            .iter_mut()
            .enumerate()
            .map(|(k, x)| {
                let (noisy, report) = simulate(&x.clean, &per_sample_noise(spec, k))?;
                x.noisy = noisy;
                Ok(report)
            })
            .collect()
    }
}

pub(crate) fn per_sample_noise(spec: &NoiseSpec, index: usize) -> NoiseSpec {
    NoiseSpec {
        seed: SeededRng::fork(spec.seed, index as u64).next_u64(),
        ..*spec
    }
}

fn render_mask(size: usize, inside: impl Fn(f64, f64) -> bool) -> BinaryMask {
    BinaryMask::from_fn(size, size, |i, j| inside(i as f64, j as f64))
}

/// Closed random walk of radial scale factors around the contour.
fn radial_profile(rng: &mut SeededRng, knots: usize) -> Vec<f64> {
    let mut v = vec![0.0; knots + 1];
    for k in 1..=knots {
        v[k] = v[k - 1] + 0.08 * rng.normal();
    }
    // Remove the drift so the walk closes, then recentre.
    let drift = v[knots];
    for (k, x) in v.iter_mut().enumerate() {
        *x -= drift * k as f64 / knots as f64;
    }
    v.truncate(knots);
    let mean = v.iter().sum::<f64>() / knots as f64;
    v.iter().map(|x| (1.0 + (x - mean)).clamp(0.6, 1.4)).collect()
}

fn draw_shape(spec: &ShapesSpec, rng: &mut SeededRng) -> BinaryMask {
    let n = spec.image_size as f64;
    let (lo, hi) = spec.fg_fraction_range;
    let target = rng.uniform_range(lo, hi);
    let aspect = rng.uniform_range(0.6, 1.0 / 0.6);
    let angle = rng.uniform_range(0.0, std::f64::consts::PI);
    let profile = match spec.shape {
        ShapeKind::Ellipse => vec![1.0; 1],
        ShapeKind::Blob => radial_profile(rng, 24),
    };
    let base = (target * n * n / std::f64::consts::PI).sqrt();
    let (ca, cb) = (rng.uniform(), rng.uniform());
    let scale_at = |t: f64| {
        let k = profile.len() as f64;
        let u = t.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * k;
        let i = u.floor() as usize % profile.len();
        let frac = u - u.floor();
        profile[i] * (1.0 - frac) + profile[(i + 1) % profile.len()] * frac
    };
    let mut radius = base;
    let mut mask = BinaryMask::filled(spec.image_size, spec.image_size, false);
    // Rescale a few times so the rendered area lands near the target.
    for _ in 0..4 {
        let (ra, rb) = (radius * aspect.sqrt(), radius / aspect.sqrt());
        let reach = ra.max(rb) * 1.4;
        let margin = (reach + 1.0).min(n / 2.0);
        let ci = margin + ca * (n - 2.0 * margin).max(0.0);
        let cj = margin + cb * (n - 2.0 * margin).max(0.0);
        let (s, c) = angle.sin_cos();
        mask = render_mask(spec.image_size, |i, j| {
            let (di, dj) = (i - ci, j - cj);
            let (u, v) = (c * di + s * dj, -s * di + c * dj);
            let r = ((u / ra).powi(2) + (v / rb).powi(2)).sqrt();
            r <= scale_at(v.atan2(u))
        });
        let realised = mask.count() as f64 / (n * n);
        if realised == 0.0 {
            radius *= 1.5;
            continue;
        }
        radius *= (target / realised).sqrt();
    }
    mask
}

/// Separable box blur of a 0/1 mask, used for the soft intensity edge.
fn soften(mask: &BinaryMask, width: f64) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut v: Vec<f64> = mask.data().iter().map(|&b| b as u8 as f64).collect();
    let r = width.round() as isize;
    if r == 0 {
        return v;
    }
    for pass in 0..2 {
        let mut out = vec![0.0; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (mut s, mut cnt) = (0.0, 0.0);
                for d in -r..=r {
                    let (y, x) = if pass == 0 { (i, j + d) } else { (i + d, j) };
                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        s += v[(y as usize) * w + x as usize];
                        cnt += 1.0;
                    }
                }
                out[i as usize * w + j as usize] = s / cnt;
            }
        }
        v = out;
    }
    v
}

/// Generates one sample; retries until the foreground fraction is in range.
fn gen_sample(spec: &ShapesSpec, rng: &mut SeededRng) -> (ImageGrid, LabelGrid) {
    let n = spec.image_size;
    let (lo, hi) = spec.fg_fraction_range;
    let mask = loop {
        let m = draw_shape(spec, rng);
        let f = m.count() as f64 / (n * n) as f64;
        if f >= lo && f <= hi {
            break m;
        }
    };
    let bg = rng.uniform_range(spec.background_range.0, spec.background_range.1);
    let gap = rng.uniform_range(spec.contrast_range.0, spec.contrast_range.1);
    let soft = soften(&mask, spec.edge_softness);
    let data = soft
        .iter()
        .map(|&s| {
            let v = bg + gap * s + spec.noise_sigma * rng.normal();
            // Quantise now so the in-memory image equals its PGM round trip.
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    (
        ImageGrid::new(n, n, 1, data).expect("values clipped to [0, 1]"),
        LabelGrid::from_mask(&mask),
    )
}

/// In-memory dataset with `noisy == clean`. Sample `k` of the training split
/// uses stream `k`, sample `k` of the test split stream `n_train + k`.
pub fn generate(spec: &ShapesSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |k: usize| {
        let mut rng = SeededRng::fork(spec.seed, k as u64);
        let (image, clean) = gen_sample(spec, &mut rng);
        Sample {
            image,
            noisy: clean.clone(),
            clean,
        }
    };
    Ok(Dataset {
        train: (0..spec.n_train).map(make).collect(),
        test: (spec.n_train..spec.n_train + spec.n_test).map(make).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(GsdError::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub clean: PathBuf,
    pub noisy: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.split.as_str(),
                e.image.display(),
                e.clean.display(),
                e.noisy.display()
            );
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(GsdError::Config(format!(
                    "manifest line {}: expected 4 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                split: fields[0].parse()?,
                image: fields[1].into(),
                clean: fields[2].into(),
                noisy: fields[3].into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GsdError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Checks that every file exists and no image is in both splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for e in &self.entries {
            for p in [&e.image, &e.clean, &e.noisy] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(GsdError::io(
                        &full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    ));
                }
            }
            if let Some(prev) = seen.insert(e.image.clone(), e.split) {
                if prev != e.split {
                    return Err(GsdError::Config(format!(
                        "{} appears in both splits",
                        e.image.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Validates, then reads every sample.
    pub fn load(&self, num_classes: usize) -> Result<Dataset> {
        self.validate()?;
        let mut ds = Dataset::default();
        for e in &self.entries {
            let s = Sample {
                image: read_image(&self.resolve(&e.image))?,
                clean: read_labels(&self.resolve(&e.clean), num_classes)?,
                noisy: read_labels(&self.resolve(&e.noisy), num_classes)?,
            };
            s.clean.same_shape(&s.noisy)?;
            if (s.image.height(), s.image.width()) != (s.clean.height(), s.clean.width()) {
                return Err(GsdError::shape(
                    format!("{}x{}", s.clean.height(), s.clean.width()),
                    format!("{}x{}", s.image.height(), s.image.width()),
                ));
            }
            match e.split {
                Split::Train => ds.train.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        Ok(ds)
    }
}

/// Writes a generated dataset under `out_dir` and returns its manifest
/// (also written to `out_dir/manifest.tsv`).
pub fn gen_shapes(spec: &ShapesSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let ds = generate(spec)?;
    write_dataset(&ds, out_dir)
}

pub fn write_dataset(ds: &Dataset, out_dir: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (split, samples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        let dir = out_dir.join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| GsdError::io(&dir, e))?;
        for (k, s) in samples.iter().enumerate() {
            let image = PathBuf::from(format!("{}/image_{k:04}.pgm", split.as_str()));
            let clean = PathBuf::from(format!("{}/clean_{k:04}.pgm", split.as_str()));
            write_image(&out_dir.join(&image), &s.image)?;
            write_labels(&out_dir.join(&clean), &s.clean)?;
            let noisy = if s.noisy == s.clean {
                clean.clone()
            } else {
                let p = PathBuf::from(format!("{}/noisy_{k:04}.pgm", split.as_str()));
                write_labels(&out_dir.join(&p), &s.noisy)?;
                p
            };
            entries.push(ManifestEntry {
                split,
                image,
                clean,
                noisy,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Simulates noise for every training entry, writes `noisy_*.pgm` next to
/// the clean labels and rewrites the manifest in place.
pub fn add_noise_to_manifest(manifest_path: &Path, spec: &NoiseSpec) -> Result<Vec<NoiseReport>> {
    let mut manifest = DatasetManifest::read(manifest_path)?;
    manifest.validate()?;
    let mut reports = Vec::new();
    let mut k = 0;
    for e in manifest.entries.iter_mut().filter(|e| e.split == Split::Train) {
        let clean = read_labels(&manifest.root.join(&e.clean), 2)?;
        let (noisy, report) = simulate(&clean, &per_sample_noise(spec, k))?;
        let name = e
            .clean
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.replacen("clean", "noisy", 1))
            .filter(|n| Path::new(n) != e.clean.as_path())
            .unwrap_or_else(|| format!("noisy_{k:04}.pgm"));
        let rel = e.clean.with_file_name(name);
        write_labels(&manifest.root.join(&rel), &noisy)?;
        e.noisy = rel;
        reports.push(report);
        k += 1;
    }
    manifest.write(manifest_path)?;
    Ok(reports)
}

fn write_pgm(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    write_atomic(path, &out)
}

/// Parses a `P5` file; returns `(height, width, payload offset)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(GsdError::Format {
            offset: 0,
            message: "not a binary PGM (missing P5)".into(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(GsdError::Format {
                offset: pos,
                message: "expected a header number".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GsdError::Format {
                offset: start,
                message: "header number out of range".into(),
            })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(GsdError::Format {
            offset: pos,
            message: format!("maxval must be 255, found {maxval}"),
        });
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(GsdError::Format {
            offset: pos,
            message: "missing whitespace after maxval".into(),
        });
    }
    pos += 1;
    let expected = pos + width * height;
    if bytes.len() != expected {
        return Err(GsdError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((height, width, pos))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| GsdError::io(path, e))
}

pub fn image_to_pgm(image: &ImageGrid) -> Result<Vec<u8>> {
    if image.channels() != 1 {
        return Err(GsdError::InvalidInput("PGM holds single-channel images".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn image_from_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let (h, w, off) = parse_pgm(bytes)?;
    ImageGrid::new(h, w, 1, bytes[off..].iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    write_atomic(path, &image_to_pgm(image)?)
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    image_from_pgm(&read_file(path)?)
}

pub fn labels_from_pgm(bytes: &[u8], num_classes: usize) -> Result<LabelGrid> {
    let (h, w, off) = parse_pgm(bytes)?;
    if let Some(i) = bytes[off..].iter().position(|&b| b as usize >= num_classes) {
        return Err(GsdError::Format {
            offset: off + i,
            message: format!("label id {} >= {num_classes} classes", bytes[off + i]),
        });
    }
    LabelGrid::new(h, w, num_classes, bytes[off..].to_vec())
}

pub fn write_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    write_pgm(path, labels.height(), labels.width(), labels.data())
}

pub fn read_labels(path: &Path, num_classes: usize) -> Result<LabelGrid> {
    labels_from_pgm(&read_file(path)?, num_classes)
}

/// Encodes a row-major `f32` grid of any rank.
pub fn gsdt_bytes(dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(GSDT_MAGIC);
    out.extend_from_slice(&[GSDT_VERSION, DTYPE_F32, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a `GSDT` container into its dims and payload.
pub fn parse_gsdt(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != GSDT_MAGIC {
        return Err(GsdError::Format {
            offset: 0,
            message: "bad magic, expected GSDT".into(),
        });
    }
    let head = r.take(3)?;
    if head[0] != GSDT_VERSION {
        return Err(GsdError::Format {
            offset: 4,
            message: format!("unsupported version {}", head[0]),
        });
    }
    if head[1] != DTYPE_F32 {
        return Err(GsdError::Format {
            offset: 5,
            message: format!("unsupported dtype code {}", head[1]),
        });
    }
    let dims = (0..head[2]).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let expected = r.pos + 4 * count;
    if bytes.len() != expected {
        return Err(GsdError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = (0..count).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    Ok((dims, data))
}

pub fn probs_to_gsdt(p: &ProbGrid) -> Vec<u8> {
    gsdt_bytes(&[p.height(), p.width(), p.num_classes()], p.data())
}

pub fn probs_from_gsdt(bytes: &[u8]) -> Result<ProbGrid> {
    let (dims, data) = parse_gsdt(bytes)?;
    if dims.len() != 3 {
        return Err(GsdError::Format {
            offset: 6,
            message: format!("probability grid needs rank 3, found {}", dims.len()),
        });
    }
    ProbGrid::new(dims[0], dims[1], dims[2], data)
}

pub fn weights_to_gsdt(w: &WeightGrid) -> Vec<u8> {
    gsdt_bytes(&[w.height(), w.width()], w.data())
}

pub fn weights_from_gsdt(bytes: &[u8]) -> Result<WeightGrid> {
    let (dims, data) = parse_gsdt(bytes)?;
    if dims.len() != 2 {
        return Err(GsdError::Format {
            offset: 6,
            message: format!("weight grid needs rank 2, found {}", dims.len()),
        });
    }
    WeightGrid::new(dims[0], dims[1], data)
}

/// Superpixel ids as a rank-2 `GSDT` grid (ids are exact in `f32` below 2^24).
pub fn write_segments(path: &Path, regions: &SuperpixelGrid) -> Result<()> {
    let data: Vec<f64> = regions.data().iter().map(|&v| v as f64).collect();
    write_atomic(path, &gsdt_bytes(&[regions.height(), regions.width()], &data))
}

pub fn write_probs(path: &Path, p: &ProbGrid) -> Result<()> {
    write_atomic(path, &probs_to_gsdt(p))
}
pub fn read_probs(path: &Path) -> Result<ProbGrid> {
    probs_from_gsdt(&read_file(path)?)
}
pub fn write_weights(path: &Path, w: &WeightGrid) -> Result<()> {
    write_atomic(path, &weights_to_gsdt(w))
}
pub fn read_weights(path: &Path) -> Result<WeightGrid> {
    weights_from_gsdt(&read_file(path)?)
}
