//! Dice metric, per-epoch metric rows and the last-10-epochs report.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GsdError, Result};
use crate::grid::LabelGrid;

/// Number of trailing epochs averaged by [`final_report`].
pub const REPORT_WINDOW: usize = 10;

/// `100 * 2|P ∩ G| / (|P| + |G|)` on the foreground (class 1); two empty
/// masks score 100.
pub fn dice_score(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    if pred.num_classes() != 2 || gt.num_classes() != 2 {
        return Err(GsdError::InvalidInput("dice_score needs binary labels".into()));
    }
    dice_score_class(pred, gt, 1)
}

/// Dice of one class id, in percent.
pub fn dice_score_class(pred: &LabelGrid, gt: &LabelGrid, class: u8) -> Result<f64> {
    pred.same_shape(gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p == class && g == class) as usize;
        np += (p == class) as usize;
        ng += (g == class) as usize;
    }
    if np + ng == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (np + ng) as f64)
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub mode: String,
    pub seed: u64,
    pub l_gda: f64,
    pub l_kt: f64,
    pub l_cor: f64,
    pub l_total: f64,
    pub clean_fraction: f64,
    /// Test Dice, in percent.
    pub test_dice: f64,
}

pub const CSV_HEADER: &str = "epoch,mode,seed,l_gda,l_kt,l_cor,l_total,clean_fraction,test_dice";

impl MetricRow {
    /// Fixed formatting so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6}",
            self.epoch,
            self.mode,
            self.seed,
            self.l_gda,
            self.l_kt,
            self.l_cor,
            self.l_total,
            self.clean_fraction,
            self.test_dice
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(GsdError::Config(format!("metric row needs 9 fields, found {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| GsdError::Config(format!("bad number {:?} in column {}", f[i], i + 1)))
        };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| GsdError::Config(format!("bad epoch {:?}", f[0])))?,
            mode: f[1].to_string(),
            seed: f[2].parse().map_err(|_| GsdError::Config(format!("bad seed {:?}", f[2])))?,
            l_gda: num(3)?,
            l_kt: num(4)?,
            l_cor: num(5)?,
            l_total: num(6)?,
            clean_fraction: num(7)?,
            test_dice: num(8)?,
        })
    }
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(GsdError::Config(format!("metrics file must start with {CSV_HEADER:?}"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRow::parse_csv).collect()
}

/// Writes the whole table atomically.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    crate::model::write_atomic(path, metrics_to_csv(rows).as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| GsdError::io(path, e))?;
    metrics_from_csv(&text)
}

/// Mean and population standard deviation of the last ten test Dice values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalReport {
    pub mean: f64,
    pub std: f64,
    pub epochs_used: usize,
    /// Set when fewer than ten rows were available.
    pub short_history: bool,
}

impl std::fmt::Display for FinalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn final_report(rows: &[MetricRow]) -> Result<FinalReport> {
    final_report_last(rows, REPORT_WINDOW)
}

/// [`final_report`] over the last `window` rows.
pub fn final_report_last(rows: &[MetricRow], window: usize) -> Result<FinalReport> {
    if rows.is_empty() || window == 0 {
        return Err(GsdError::Degenerate("no metric rows".into()));
    }
    let tail = &rows[rows.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    let mean = tail.iter().map(|r| r.test_dice).sum::<f64>() / n;
    let var = tail.iter().map(|r| (r.test_dice - mean).powi(2)).sum::<f64>() / n;
    Ok(FinalReport {
        mean,
        std: var.sqrt(),
        epochs_used: tail.len(),
        short_history: rows.len() < window,
    })
}
