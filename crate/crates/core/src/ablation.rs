//! Parameter sweeps over negation families, their aggregation, and the
//! transcribed reported results used for comparison plots.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Family, Model};
use crate::encoding::{MembershipConfig, NegationConfig};
use crate::train::{self, EncodeConfig, Sample, TrainConfig};
use crate::{derive_seed, Error, Result};

/// Reported AC/DC/IoU values for the four sweeps on two datasets,
/// transcribed verbatim. Suspect cells carry a note instead of a correction.
pub const REPORTED_TABLES_CSV: &str = include_str!("../fixtures/reported_tables.csv");

pub const DEFAULT_LAMBDAS: [f64; 9] = [0.5, 0.8, 0.9, 1.0, 1.2, 1.4, 1.5, 2.0, 2.5];
pub const DEFAULT_ALPHAS: [f64; 6] = [0.1, 0.2, 0.4, 0.6, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationPlan {
    pub families: Vec<Family>,
    pub baselines: bool,
    pub sugeno_lambdas: Vec<f64>,
    pub yager_alphas: Vec<f64>,
    pub repeats: usize,
    pub train: TrainConfig,
    /// Template for every cell; `family` and `in_channels` are set per cell.
    pub arch: ArchConfig,
    pub membership: MembershipConfig,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            families: vec![Family::UNet, Family::UNetPP],
            baselines: true,
            sugeno_lambdas: DEFAULT_LAMBDAS.to_vec(),
            yager_alphas: DEFAULT_ALPHAS.to_vec(),
            repeats: 3,
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            membership: MembershipConfig::default(),
        }
    }
}

/// One training run of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub family: Family,
    pub negation: Option<NegationConfig>,
    pub repeat: usize,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::InvalidConfig("plan has no families".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        self.train.validate()?;
        self.membership.validate()?;
        for &lambda in &self.sugeno_lambdas {
            NegationConfig::Sugeno { lambda }.validate()?;
        }
        for &alpha in &self.yager_alphas {
            NegationConfig::Yager { alpha }.validate()?;
        }
        if self.cells().is_empty() {
            return Err(Error::InvalidConfig("plan has no cells".into()));
        }
        Ok(())
    }

    /// Cells in output order: family, then baseline, Sugeno grid, Yager
    /// grid, with repeats innermost.
    pub fn cells(&self) -> Vec<Cell> {
        let mut negs: Vec<Option<NegationConfig>> = Vec::new();
        if self.baselines {
            negs.push(None);
        }
        negs.extend(
            self.sugeno_lambdas
                .iter()
                .map(|&lambda| Some(NegationConfig::Sugeno { lambda })),
        );
        negs.extend(
            self.yager_alphas
                .iter()
                .map(|&alpha| Some(NegationConfig::Yager { alpha })),
        );
        let mut cells = Vec::new();
        for &family in &self.families {
            for &negation in &negs {
                for repeat in 0..self.repeats {
                    cells.push(Cell {
                        family,
                        negation,
                        repeat,
                    });
                }
            }
        }
        cells
    }

    /// Arch and training config for a cell. Every cell of a given repeat
    /// shares its seed, so arms differ only in the input transform.
    pub fn cell_configs(&self, cell: &Cell) -> (ArchConfig, TrainConfig) {
        let seed = derive_seed(self.train.seed, cell.repeat as u64);
        let encode = cell.negation.map(|negation| EncodeConfig {
            membership: self.membership,
            negation,
        });
        let arch = ArchConfig {
            family: cell.family,
            in_channels: if encode.is_some() { 3 } else { 1 },
            ..self.arch.clone()
        };
        let train = TrainConfig {
            seed,
            encode,
            ..self.train.clone()
        };
        (arch, train)
    }
}

/// One row of the results CSV. Metrics are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub family: Family,
    pub negation: Option<String>,
    pub param: Option<f64>,
    pub repeat: usize,
    pub ac: Option<f64>,
    pub dc: Option<f64>,
    pub iou: Option<f64>,
}

impl AblationRecord {
    pub const CSV_HEADER: &'static str = "family,negation,param,repeat,ac,dc,iou";

    fn key(&self) -> CellKey {
        CellKey::new(self.family, self.negation.clone(), self.param)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub record: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub records: Vec<AblationRecord>,
    pub failures: Vec<CellFailure>,
}

fn run_cell(
    plan: &AblationPlan,
    cell: &Cell,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<(f64, f64, f64)> {
    let (arch, cfg) = plan.cell_configs(cell);
    let mut model = Model::<f32>::build(arch, cfg.seed)?;
    train::train(&mut model, train_set, test_set, &cfg)?;
    let r = train::evaluate_model(&mut model, test_set, cfg.encode.as_ref())?;
    Ok((r.ac, r.dc, r.iou))
}

/// Runs every cell on the `train.split_fraction` split of `samples`, with up
/// to `jobs` cells in flight. A failing cell is recorded with empty metrics
/// and does not stop the sweep. `on_done` is called under a lock as each
/// cell finishes; records are returned in plan order regardless.
pub fn run(
    plan: &AblationPlan,
    samples: &[Sample],
    jobs: usize,
    on_done: impl Fn(&AblationRecord, Option<&str>) + Sync,
) -> Result<AblationOutcome> {
    plan.validate()?;
    let (train_set, test_set) = train::split(samples, plan.train.split_fraction, plan.train.seed)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cells = plan.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let lock = Mutex::new(());
    let results: Vec<(AblationRecord, Option<String>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let outcome = run_cell(plan, cell, &train_set, &test_set);
                let metrics = outcome.as_ref().ok().copied();
                let record = AblationRecord {
                    family: cell.family,
                    negation: cell.negation.map(|n| n.family().to_string()),
                    param: cell.negation.map(|n| n.param()),
                    repeat: cell.repeat,
                    ac: metrics.map(|m| m.0),
                    dc: metrics.map(|m| m.1),
                    iou: metrics.map(|m| m.2),
                };
                let err = outcome.err().map(|e| e.to_string());
                let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
                on_done(&record, err.as_deref());
                (record, err)
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, (rec, err)) in results.into_iter().enumerate() {
        if let Some(message) = err {
            failures.push(CellFailure { record: i, message });
        }
        records.push(rec);
    }
    Ok(AblationOutcome { records, failures })
}

pub fn write_records<W: Write>(w: W, records: &[AblationRecord]) -> Result<()> {
    write_rows(w, AblationRecord::CSV_HEADER, records)
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<AblationRecord>> {
    read_rows(r)
}

fn write_rows<W: Write, S: Serialize>(w: W, header: &str, rows: &[S]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(header.split(','))?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()
        .map_err(|e| Error::io(std::path::Path::new("<csv>"), e))?;
    Ok(())
}

fn read_rows<R: Read, S: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<S>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Identity of a sweep cell, ordered by family, negation, then parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub family: Family,
    pub negation: Option<String>,
    pub param: Option<f64>,
}

impl CellKey {
    pub fn new(family: Family, negation: Option<String>, param: Option<f64>) -> Self {
        CellKey {
            family,
            negation,
            param,
        }
    }

    fn sort_key(&self) -> (u8, Option<&str>, Option<u64>) {
        let fam = match self.family {
            Family::UNet => 0,
            Family::UNetPP => 1,
        };
        // Non-negative finite params order like their bit patterns.
        (fam, self.negation.as_deref(), self.param.map(f64::to_bits))
    }

    pub fn label(&self) -> String {
        match (&self.negation, self.param) {
            (Some(n), Some(p)) => {
                format!("{n} {}={p}", if n == "sugeno" { "lambda" } else { "alpha" })
            }
            _ => "baseline".to_string(),
        }
    }
}

impl Eq for CellKey {}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ac,
    Dc,
    Iou,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ac, Metric::Dc, Metric::Iou];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ac => "ac",
            Metric::Dc => "dc",
            Metric::Iou => "iou",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ac" => Ok(Metric::Ac),
            "dc" => Ok(Metric::Dc),
            "iou" => Ok(Metric::Iou),
            _ => Err(Error::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub family: Family,
    pub negation: Option<String>,
    pub param: Option<f64>,
    /// Successful repeats.
    pub n: usize,
    pub ac_mean: Option<f64>,
    pub ac_std: Option<f64>,
    pub dc_mean: Option<f64>,
    pub dc_std: Option<f64>,
    pub iou_mean: Option<f64>,
    pub iou_std: Option<f64>,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str =
        "family,negation,param,n,ac_mean,ac_std,dc_mean,dc_std,iou_mean,iou_std";

    pub fn key(&self) -> CellKey {
        CellKey::new(self.family, self.negation.clone(), self.param)
    }

    pub fn mean(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Ac => self.ac_mean,
            Metric::Dc => self.dc_mean,
            Metric::Iou => self.iou_mean,
        }
    }

    pub fn std(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Ac => self.ac_std,
            Metric::Dc => self.dc_std,
            Metric::Iou => self.iou_std,
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Per-cell mean and std over successful repeats, sorted by cell.
pub fn summarize(records: &[AblationRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<CellKey, Vec<&AblationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.key()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let ok: Vec<_> = rs.iter().filter(|r| r.ac.is_some()).collect();
            let stat = |f: fn(&AblationRecord) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                mean_std(&v)
            };
            let (ac, dc, iou) = (stat(|r| r.ac), stat(|r| r.dc), stat(|r| r.iou));
            SummaryRow {
                family: key.family,
                negation: key.negation,
                param: key.param,
                n: ok.len(),
                ac_mean: ac.map(|s| s.0),
                ac_std: ac.map(|s| s.1),
                dc_mean: dc.map(|s| s.0),
                dc_std: dc.map(|s| s.1),
                iou_mean: iou.map(|s| s.0),
                iou_std: iou.map(|s| s.1),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    write_rows(w, SummaryRow::CSV_HEADER, rows)
}

pub fn read_summary<R: Read>(r: R) -> Result<Vec<SummaryRow>> {
    read_rows(r)
}

/// Highest-scoring cell; ties go to the smallest [`CellKey`], so the result
/// does not depend on input order.
pub fn best_cell<I>(cells: I) -> Option<(CellKey, f64)>
where
    I: IntoIterator<Item = (CellKey, f64)>,
{
    cells.into_iter().filter(|(_, v)| v.is_finite()).fold(
        None,
        |best: Option<(CellKey, f64)>, (k, v)| match best {
            Some((bk, bv)) if bv > v || (bv == v && bk <= k) => Some((bk, bv)),
            _ => Some((k, v)),
        },
    )
}

pub fn best_summary_cell(rows: &[SummaryRow], metric: Metric) -> Option<(CellKey, f64)> {
    best_cell(
        rows.iter()
            .filter_map(|r| r.mean(metric).map(|v| (r.key(), v))),
    )
}

/// One transcribed reported-results cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedRow {
    /// Sweep id, `<family>_<negation family>`.
    pub table: String,
    pub dataset: String,
    pub family: Family,
    pub negation: Option<String>,
    pub param: Option<f64>,
    pub ac: f64,
    pub dc: f64,
    pub iou: f64,
    pub suspect: Option<String>,
}

impl ReportedRow {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.family, self.negation.clone(), self.param)
    }

    pub fn value(&self, m: Metric) -> f64 {
        match m {
            Metric::Ac => self.ac,
            Metric::Dc => self.dc,
            Metric::Iou => self.iou,
        }
    }
}

pub fn read_reported<R: Read>(r: R) -> Result<Vec<ReportedRow>> {
    read_rows(r)
}

pub fn reported_tables() -> Vec<ReportedRow> {
    read_reported(REPORTED_TABLES_CSV.as_bytes()).expect("bundled fixture parses")
}

/// Best cell of one reported sweep on one dataset.
pub fn best_reported_cell(
    rows: &[ReportedRow],
    table: &str,
    dataset: &str,
    metric: Metric,
) -> Option<(CellKey, f64)> {
    best_cell(
        rows.iter()
            .filter(|r| r.table == table && r.dataset == dataset)
            .map(|r| (r.key(), r.value(metric))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn default_grid_row_count() {
        let plan = AblationPlan::default();
        assert_eq!(plan.cells().len(), 2 * (1 + 9 + 6) * 3);
    }

    #[test]
    fn baselines_only_plan() {
        let plan = AblationPlan {
            sugeno_lambdas: vec![],
            yager_alphas: vec![],
            ..Default::default()
        };
        let cells = plan.cells();
        assert_eq!(cells.len(), 2 * 3);
        assert!(cells.iter().all(|c| c.negation.is_none()));
    }

    #[test]
    fn invalid_plans() {
        let bad = AblationPlan {
            sugeno_lambdas: vec![0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AblationPlan {
            yager_alphas: vec![1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let empty = AblationPlan {
            baselines: false,
            sugeno_lambdas: vec![],
            yager_alphas: vec![],
            ..Default::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn arms_share_seed_within_repeat() {
        let plan = AblationPlan::default();
        let cells = plan.cells();
        let (a, ta) = plan.cell_configs(&cells[0]);
        let ifs = cells
            .iter()
            .find(|c| c.negation.is_some() && c.repeat == 0)
            .unwrap();
        let (b, tb) = plan.cell_configs(ifs);
        assert_eq!(ta.seed, tb.seed);
        assert_eq!((a.in_channels, b.in_channels), (1, 3));
        let other = cells.iter().find(|c| c.repeat == 1).unwrap();
        assert_ne!(plan.cell_configs(other).1.seed, ta.seed);
    }

    fn sample_records() -> Vec<AblationRecord> {
        let mut out = Vec::new();
        for (neg, param, base) in [
            (None, None, 0.90),
            (Some("sugeno"), Some(2.0), 0.93),
            (Some("yager"), Some(0.4), 0.91),
        ] {
            for r in 0..3 {
                let v = base + 0.01 * r as f64;
                out.push(AblationRecord {
                    family: Family::UNet,
                    negation: neg.map(String::from),
                    param,
                    repeat: r,
                    ac: Some(v),
                    dc: Some(v - 0.02),
                    iou: Some(v - 0.05),
                });
            }
        }
        out.push(AblationRecord {
            family: Family::UNetPP,
            negation: None,
            param: None,
            repeat: 0,
            ac: None,
            dc: None,
            iou: None,
        });
        out
    }

    #[test]
    fn records_roundtrip_through_csv() {
        let recs = sample_records();
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(AblationRecord::CSV_HEADER));
        assert!(text.contains("unetpp,,,0,,,"));
        assert_eq!(read_records(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn summary_statistics() {
        let rows = summarize(&sample_records());
        assert_eq!(rows.len(), 4);
        let sug = rows
            .iter()
            .find(|r| r.negation.as_deref() == Some("sugeno"))
            .unwrap();
        assert_eq!(sug.n, 3);
        assert!((sug.ac_mean.unwrap() - 0.94).abs() < 1e-12);
        assert!((sug.ac_std.unwrap() - 0.01).abs() < 1e-12);
        let failed = rows.iter().find(|r| r.family == Family::UNetPP).unwrap();
        assert_eq!((failed.n, failed.ac_mean), (0, None));
        let mut buf = Vec::new();
        write_summary(&mut buf, &rows).unwrap();
        assert_eq!(read_summary(&buf[..]).unwrap(), rows);
        let (best, v) = best_summary_cell(&rows, Metric::Ac).unwrap();
        assert_eq!(best.param, Some(2.0));
        assert!((v - 0.94).abs() < 1e-12);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fixture_shape() {
        let rows = reported_tables();
        assert_eq!(rows.len(), 2 * 2 * 10 + 2 * 2 * 7);
        assert_eq!(rows.iter().filter(|r| r.suspect.is_some()).count(), 3);
        let suspect = rows
            .iter()
            .find(|r| r.table == "unetpp_sugeno" && r.dataset == "IBSR" && r.param == Some(1.5))
            .unwrap();
        assert_eq!(suspect.dc, 0.9927);
        assert!(suspect.suspect.is_some());
        let lambdas: Vec<f64> = rows
            .iter()
            .filter(|r| r.table == "unet_sugeno" && r.dataset == "IBSR")
            .filter_map(|r| r.param)
            .collect();
        assert_eq!(lambdas, DEFAULT_LAMBDAS);
        let alphas: Vec<f64> = rows
            .iter()
            .filter(|r| r.table == "unet_yager" && r.dataset == "IBSR")
            .filter_map(|r| r.param)
            .collect();
        assert_eq!(alphas, DEFAULT_ALPHAS);
    }

    #[test]
    fn reported_best_cells() {
        let rows = reported_tables();
        let (k, v) = best_reported_cell(&rows, "unet_sugeno", "IBSR", Metric::Ac).unwrap();
        assert_eq!(
            (k.negation.as_deref(), k.param, v),
            (Some("sugeno"), Some(2.0), 0.9976)
        );
        let (k, v) = best_reported_cell(&rows, "unet_yager", "IBSR", Metric::Ac).unwrap();
        assert_eq!((k.param, v), (Some(0.4), 0.9982));
        let (k, v) = best_reported_cell(&rows, "unetpp_sugeno", "OASIS", Metric::Ac).unwrap();
        assert_eq!((k.param, v), (Some(0.9), 0.9795));
    }

    #[test]
    fn best_cell_tie_goes_to_smallest_key() {
        let a = CellKey::new(Family::UNet, Some("sugeno".into()), Some(0.5));
        let b = CellKey::new(Family::UNet, Some("sugeno".into()), Some(2.0));
        for items in [
            vec![(a.clone(), 1.0), (b.clone(), 1.0)],
            vec![(b.clone(), 1.0), (a.clone(), 1.0)],
        ] {
            assert_eq!(best_cell(items).unwrap().0, a);
        }
    }

    proptest! {
        #[test]
        fn best_cell_ignores_row_order(seed in any::<u64>()) {
            let rows = reported_tables();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for table in ["unet_sugeno", "unetpp_sugeno", "unet_yager", "unetpp_yager"] {
                for ds in ["IBSR", "OASIS"] {
                    for m in Metric::ALL {
                        prop_assert_eq!(
                            best_reported_cell(&rows, table, ds, m),
                            best_reported_cell(&shuffled, table, ds, m)
                        );
                    }
                }
            }
        }
    }
}
