//! Accuracy, Dice and IoU between predicted and reference label masks.
//!
//! Aggregates are macro means over the classes that appear in either mask;
//! a class absent from both is skipped rather than scored as a perfect 1.
//! Background (class 0) counts like any other class; the `fg_*` fields
//! repeat the aggregation over classes `1..K` only.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(LabelMask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        LabelMask {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.data.iter().position(|&c| c as usize >= k) {
            Some(i) => Err(Error::InvalidLabel(format!(
                "pixel {i} has class {} but K = {k}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    /// Reference pixels of this class.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ac: f64,
    pub dc: f64,
    pub iou: f64,
    pub fg_dc: Option<f64>,
    pub fg_iou: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

/// Raw tallies from which a [`MetricsReport`] is derived. Accumulates over
/// any number of mask pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    pub correct: u64,
    pub total: u64,
    pub intersection: Vec<u64>,
    pub predicted: Vec<u64>,
    pub reference: Vec<u64>,
}

impl Counts {
    pub fn new(k: usize) -> Self {
        Counts {
            correct: 0,
            total: 0,
            intersection: vec![0; k],
            predicted: vec![0; k],
            reference: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if (pred.width, pred.height) != (truth.width, truth.height) || pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.width, pred.height, truth.width, truth.height
            )));
        }
        let k = self.intersection.len();
        pred.check_classes(k)?;
        truth.check_classes(k)?;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            self.predicted[p as usize] += 1;
            self.reference[t as usize] += 1;
            if p == t {
                self.correct += 1;
                self.intersection[p as usize] += 1;
            }
        }
        self.total += pred.len() as u64;
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let mut per_class = Vec::new();
        for c in 0..self.intersection.len() {
            let (i, p, t) = (self.intersection[c], self.predicted[c], self.reference[c]);
            let union = p + t - i;
            if p + t == 0 {
                continue;
            }
            per_class.push(ClassMetrics {
                class: c,
                dice: 2.0 * i as f64 / (p + t) as f64,
                iou: i as f64 / union as f64,
                support: t,
            });
        }
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| s / n as f64)
        };
        let dc = mean(&mut per_class.iter().map(|c| c.dice)).unwrap_or(0.0);
        let iou = mean(&mut per_class.iter().map(|c| c.iou)).unwrap_or(0.0);
        let fg_dc = mean(&mut per_class.iter().filter(|c| c.class > 0).map(|c| c.dice));
        let fg_iou = mean(&mut per_class.iter().filter(|c| c.class > 0).map(|c| c.iou));
        MetricsReport {
            ac: if self.total == 0 {
                0.0
            } else {
                self.correct as f64 / self.total as f64
            },
            dc,
            iou,
            fg_dc,
            fg_iou,
            per_class,
        }
    }
}

pub fn evaluate(pred: &LabelMask, truth: &LabelMask, k: usize) -> Result<MetricsReport> {
    let mut counts = Counts::new(k);
    counts.add(pred, truth)?;
    Ok(counts.report())
}

/// Checks `Dice = 2 IoU / (1 + IoU)` for every class in the report.
pub fn dice_iou_identity_check(report: &MetricsReport) -> bool {
    report
        .per_class
        .iter()
        .all(|c| (c.dice - 2.0 * c.iou / (1.0 + c.iou)).abs() <= 1e-9)
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "ac,dc,iou,fg_dc,fg_iou";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.ac,
            self.dc,
            self.iou,
            opt(self.fg_dc),
            opt(self.fg_iou)
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
