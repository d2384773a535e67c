//! Static grouped bar charts rendered as standalone SVG.

use std::fmt::Write as _;

use crate::ablation::{CellKey, Metric, ReportedRow, SummaryRow};
use crate::arch::Family;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 70.0;
const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<Option<f64>>,
    /// Half-height of an error bar per category.
    pub errors: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Axis range padded around the data and snapped to a step of 0.01 or 0.1.
fn y_range(chart: &BarChart) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &chart.series {
        for (i, v) in s.values.iter().enumerate() {
            if let Some(v) = v {
                let e = s.errors.as_ref().map_or(0.0, |e| e[i]);
                lo = lo.min(v - e);
                hi = hi.max(v + e);
            }
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let step = if hi - lo < 0.1 { 0.01 } else { 0.1 };
    let lo = ((lo - step) / step).floor() * step;
    let hi = ((hi + step / 2.0) / step).ceil() * step;
    (lo.max(0.0), hi.min(1.0).max(lo + step))
}

impl BarChart {
    pub fn render(&self) -> String {
        let (lo, hi) = y_range(self);
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let y = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v.clamp(lo, hi) - lo) / (hi - lo));
        let ncat = self.categories.len().max(1) as f64;
        let group_w = plot_w / ncat;
        let nser = self.series.len().max(1) as f64;
        let bar_w = group_w * 0.8 / nser;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            esc(&self.title)
        );
        for i in 0..=5 {
            let v = lo + (hi - lo) * i as f64 / 5.0;
            let yy = y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_LEFT}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
                MARGIN_LEFT + plot_w,
                MARGIN_LEFT - 6.0,
                yy + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h / 2.0,
            esc(&self.y_label)
        );
        for (ci, cat) in self.categories.iter().enumerate() {
            let gx = MARGIN_LEFT + group_w * ci as f64;
            for (si, ser) in self.series.iter().enumerate() {
                let Some(v) = ser.values.get(ci).copied().flatten() else {
                    continue;
                };
                let x = gx + group_w * 0.1 + bar_w * si as f64;
                let top = y(v);
                let _ = writeln!(
                    s,
                    r#"<rect class="bar" x="{x:.1}" y="{top:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                    MARGIN_TOP + plot_h - top,
                    PALETTE[si % PALETTE.len()],
                    esc(&format!("{} / {cat}", ser.name))
                );
                if let Some(e) = ser.errors.as_ref().map(|e| e[ci]).filter(|&e| e > 0.0) {
                    let cx = x + bar_w / 2.0;
                    let _ = writeln!(
                        s,
                        r#"<line class="err" x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                        y(v - e),
                        y(v + e)
                    );
                }
            }
            let lx = gx + group_w / 2.0;
            let ly = MARGIN_TOP + plot_h + 14.0;
            let _ = writeln!(
                s,
                r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-35 {lx:.1} {ly:.1})">{}</text>"#,
                esc(cat)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN_LEFT}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="black"/>"#,
            MARGIN_TOP + plot_h,
            MARGIN_LEFT + plot_w
        );
        for (si, ser) in self.series.iter().enumerate() {
            let lx = WIDTH - MARGIN_RIGHT + 14.0;
            let ly = MARGIN_TOP + 18.0 * si as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                PALETTE[si % PALETTE.len()],
                lx + 18.0,
                ly + 10.0,
                esc(&ser.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn category(key: &CellKey) -> String {
    match (&key.negation, key.param) {
        (Some(n), Some(p)) => format!("{}={p}", if n == "sugeno" { "λ" } else { "α" }),
        _ => key.family.as_str().to_string() + " baseline",
    }
}

fn ordered_keys<'a>(
    keys: impl Iterator<Item = &'a CellKey>,
    family: Family,
    negation: &str,
) -> Vec<CellKey> {
    let mut out: Vec<CellKey> = keys
        .filter(|k| {
            k.family == family && (k.negation.is_none() || k.negation.as_deref() == Some(negation))
        })
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Baseline plus every grid value of one negation family, as mean ± std
/// of a local sweep.
pub fn summary_chart(
    rows: &[SummaryRow],
    family: Family,
    negation: &str,
    metric: Metric,
) -> Option<BarChart> {
    let all: Vec<CellKey> = rows.iter().map(SummaryRow::key).collect();
    let keys = ordered_keys(all.iter(), family, negation);
    if !keys.iter().any(|k| k.negation.is_some()) {
        return None;
    }
    let find = |k: &CellKey| rows.iter().find(|r| &r.key() == k);
    Some(BarChart {
        title: format!("{family} / {negation} / {}", metric.as_str().to_uppercase()),
        y_label: metric.as_str().to_uppercase(),
        categories: keys.iter().map(category).collect(),
        series: vec![Series {
            name: "mean ± std".into(),
            values: keys
                .iter()
                .map(|k| find(k).and_then(|r| r.mean(metric)))
                .collect(),
            errors: Some(
                keys.iter()
                    .map(|k| find(k).and_then(|r| r.std(metric)).unwrap_or(0.0))
                    .collect(),
            ),
        }],
    })
}

/// One reported sweep with a series per dataset.
pub fn reported_chart(rows: &[ReportedRow], table: &str, metric: Metric) -> Option<BarChart> {
    let sel: Vec<&ReportedRow> = rows.iter().filter(|r| r.table == table).collect();
    let first = sel.first()?;
    let negation = sel.iter().find_map(|r| r.negation.clone())?;
    let keys_owned: Vec<CellKey> = sel.iter().map(|r| r.key()).collect();
    let keys = ordered_keys(keys_owned.iter(), first.family, &negation);
    let mut datasets: Vec<&str> = sel.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    let series = datasets
        .iter()
        .map(|ds| Series {
            name: format!("{ds} (reported)"),
            values: keys
                .iter()
                .map(|k| {
                    sel.iter()
                        .find(|r| r.dataset == *ds && &r.key() == k)
                        .map(|r| r.value(metric))
                })
                .collect(),
            errors: None,
        })
        .collect();
    Some(BarChart {
        title: format!(
            "{} / {negation} / {} (reported)",
            first.family,
            metric.as_str().to_uppercase()
        ),
        y_label: metric.as_str().to_uppercase(),
        categories: keys.iter().map(category).collect(),
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::reported_tables;

    #[test]
    fn renders_one_rect_per_value() {
        let chart = BarChart {
            title: "a <b> & c".into(),
            y_label: "DC".into(),
            categories: vec!["x".into(), "y".into(), "z".into()],
            series: vec![
                Series {
                    name: "s1".into(),
                    values: vec![Some(0.9), None, Some(0.95)],
                    errors: Some(vec![0.01, 0.0, 0.0]),
                },
                Series {
                    name: "s2".into(),
                    values: vec![Some(0.92), Some(0.93), Some(0.94)],
                    errors: None,
                },
            ],
        };
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches(r#"class="bar""#).count(), 5);
        assert_eq!(svg.matches(r#"class="err""#).count(), 1);
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
    }

    #[test]
    fn reported_chart_layout() {
        let rows = reported_tables();
        let c = reported_chart(&rows, "unet_sugeno", Metric::Ac).unwrap();
        assert_eq!(c.categories.len(), 10);
        assert_eq!(c.categories[0], "unet baseline");
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.series[0].values[8], Some(0.9976));
        assert!(reported_chart(&rows, "nope", Metric::Ac).is_none());
    }

    #[test]
    fn y_range_brackets_data() {
        let c = BarChart {
            title: String::new(),
            y_label: String::new(),
            categories: vec!["a".into()],
            series: vec![Series {
                name: "s".into(),
                values: vec![Some(0.987)],
                errors: None,
            }],
        };
        let (lo, hi) = y_range(&c);
        assert!(lo < 0.987 && hi > 0.987 && hi <= 1.0);
    }
}
