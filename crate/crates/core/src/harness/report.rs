//! CSV tables and SVG figures derived from stored run results.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;

use super::config::{ImbalanceMode, Method, Protocol};
use super::run::RunResult;
use crate::dataio::Stage;
use crate::error::{Result, SslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Per-class F1, accuracy and macro-F1 per run.
    Table2,
    /// Macro-F1 against label fraction.
    Fig2,
    /// Balanced versus imbalanced pretraining.
    Fig3,
    /// Cross-subject transfer macro-F1.
    Table3,
}

impl Layout {
    pub fn id(self) -> &'static str {
        match self {
            Layout::Table2 => "table2",
            Layout::Fig2 => "fig2",
            Layout::Fig3 => "fig3",
            Layout::Table3 => "table3",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Layout {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Layout::Table2),
            "fig2" | "fig2_curve" => Ok(Layout::Fig2),
            "fig3" | "fig3_bars" => Ok(Layout::Fig3),
            "table3" => Ok(Layout::Table3),
            _ => Err(SslError::Report(format!("unknown layout `{s}`"))),
        }
    }
}

/// A rendered CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| SslError::Report(e.to_string());
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.into_inner().map_err(|e| SslError::Report(e.to_string()))
    }
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

/// `best` / `second` marks for the two highest values (ties share a mark).
fn ranks(values: &[f64]) -> Vec<&'static str> {
    let mut distinct: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    values
        .iter()
        .map(|v| match distinct.iter().position(|d| d == v) {
            Some(0) => "best",
            Some(1) => "second",
            _ => "",
        })
        .collect()
}

fn check_dataset(results: &[RunResult]) -> Result<()> {
    let Some(first) = results.first() else {
        return Err(SslError::Report("no results".into()));
    };
    if let Some(other) = results.iter().find(|r| r.config.dataset != first.config.dataset) {
        return Err(SslError::Report(format!(
            "results mix datasets `{}` and `{}`",
            first.config.dataset, other.config.dataset
        )));
    }
    Ok(())
}

fn mean_mf1(r: &RunResult) -> Option<f64> {
    r.summary.as_ref().map(|s| s.macro_f1.mean)
}

pub const TABLE2_METRICS: [&str; 7] = ["W", "N1", "N2", "N3", "REM", "ACC", "MF1"];

pub fn table2(results: &[RunResult]) -> Result<Table> {
    check_dataset(results)?;
    let rows: Vec<(&RunResult, [f64; 7])> = results
        .iter()
        .filter_map(|r| {
            let s = r.summary.as_ref()?;
            let mut v = [0.0; 7];
            for st in Stage::ALL {
                v[st.index()] = s.per_class_f1[st.index()].mean;
            }
            v[5] = s.accuracy.mean;
            v[6] = s.macro_f1.mean;
            Some((r, v))
        })
        .collect();
    // Rows compete only against runs with the same backbone, TE mode, label
    // fraction and imbalance handling.
    let group = |r: &RunResult| {
        let c = &r.config;
        (c.model.backbone.to_string(), c.model.te, num(c.label_fraction), c.imbalance)
    };
    let mut marks = vec![[""; 7]; rows.len()];
    for (i, (r, _)) in rows.iter().enumerate() {
        let peers: Vec<usize> = (0..rows.len()).filter(|&j| group(rows[j].0) == group(r)).collect();
        for c in 0..7 {
            let pos = peers.iter().position(|&j| j == i).unwrap_or(0);
            marks[i][c] = ranks(&peers.iter().map(|&j| rows[j].1[c]).collect::<Vec<_>>())[pos];
        }
    }
    let mut header: Vec<String> = ["algorithm", "backbone", "te", "label_fraction", "imbalance"].map(String::from).to_vec();
    header.extend(TABLE2_METRICS.map(String::from));
    header.push("flags".into());
    let body = rows
        .iter()
        .enumerate()
        .map(|(i, (r, v))| {
            let c = &r.config;
            let mut row = vec![
                c.algorithm.to_string(),
                c.model.backbone.to_string(),
                c.model.te.to_string(),
                num(c.label_fraction),
                imbalance_id(c.imbalance).to_string(),
            ];
            row.extend(v.iter().map(|x| num(*x)));
            let flags: Vec<String> = (0..7)
                .filter(|&m| !marks[i][m].is_empty())
                .map(|m| format!("{}={}", TABLE2_METRICS[m], marks[i][m]))
                .collect();
            row.push(flags.join(";"));
            row
        })
        .collect();
    Ok(Table { header, rows: body })
}

fn imbalance_id(m: ImbalanceMode) -> &'static str {
    match m {
        ImbalanceMode::None => "none",
        ImbalanceMode::OversamplePretext => "oversample_pretext",
        ImbalanceMode::ClassAwareLoss => "class_aware_loss",
        ImbalanceMode::TwoStage => "two_stage",
    }
}

/// Backbone id, suffixed with the temporal encoder when it is not the
/// backbone's own and with the imbalance handling when there is one.
fn variant(r: &RunResult) -> String {
    let c = &r.config;
    let mut v = c.model.backbone.to_string();
    if c.model.te != c.model.backbone.native_te() {
        v.push_str(&format!("+{}", c.model.te));
    }
    if c.imbalance != ImbalanceMode::None {
        v.push_str(&format!("/{}", imbalance_id(c.imbalance)));
    }
    v
}

/// One curve per (algorithm, variant): `(fraction, mean MF1, std)`.
pub type Curves = BTreeMap<(Method, String), Vec<(f64, f64, f64)>>;

pub fn fig2_curves(results: &[RunResult]) -> Result<Curves> {
    check_dataset(results)?;
    let mut curves: Curves = BTreeMap::new();
    for r in results {
        if let Some(s) = &r.summary {
            curves
                .entry((r.config.algorithm, variant(r)))
                .or_default()
                .push((r.config.label_fraction, s.macro_f1.mean, s.macro_f1.std));
        }
    }
    for pts in curves.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(curves)
}

pub fn fig2(results: &[RunResult]) -> Result<Table> {
    let curves = fig2_curves(results)?;
    let header = ["algorithm", "backbone", "label_fraction", "mf1_mean", "mf1_std"].map(String::from).to_vec();
    let rows = curves
        .iter()
        .flat_map(|((m, b), pts)| pts.iter().map(move |p| vec![m.to_string(), b.clone(), num(p.0), num(p.1), num(p.2)]))
        .collect();
    Ok(Table { header, rows })
}

/// Balanced (oversampled) against imbalanced pretraining MF1.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceDelta {
    pub algorithm: Method,
    pub backbone: String,
    pub label_fraction: f64,
    pub mf1_imbalanced: f64,
    pub mf1_balanced: f64,
    pub delta: f64,
}

pub fn fig3_deltas(results: &[RunResult]) -> Result<Vec<ImbalanceDelta>> {
    check_dataset(results)?;
    let key = |r: &RunResult| (r.config.algorithm, r.config.model.backbone.to_string(), num(r.config.label_fraction));
    let mut out = Vec::new();
    for bal in results.iter().filter(|r| r.config.imbalance == ImbalanceMode::OversamplePretext) {
        let partner = results.iter().find(|r| r.config.imbalance == ImbalanceMode::None && key(r) == key(bal));
        if let (Some(imb), Some(b)) = (partner.and_then(mean_mf1), mean_mf1(bal)) {
            out.push(ImbalanceDelta {
                algorithm: bal.config.algorithm,
                backbone: bal.config.model.backbone.to_string(),
                label_fraction: bal.config.label_fraction,
                mf1_imbalanced: imb,
                mf1_balanced: b,
                delta: (b - imb).abs(),
            });
        }
    }
    out.sort_by(|a, b| (a.algorithm, &a.backbone).cmp(&(b.algorithm, &b.backbone)).then(a.label_fraction.total_cmp(&b.label_fraction)));
    Ok(out)
}

pub fn fig3(results: &[RunResult]) -> Result<Table> {
    let header = ["algorithm", "backbone", "label_fraction", "mf1_imbalanced", "mf1_balanced", "delta"]
        .map(String::from)
        .to_vec();
    let rows = fig3_deltas(results)?
        .iter()
        .map(|d| {
            vec![
                d.algorithm.to_string(),
                d.backbone.clone(),
                num(d.label_fraction),
                num(d.mf1_imbalanced),
                num(d.mf1_balanced),
                num(d.delta),
            ]
        })
        .collect();
    Ok(Table { header, rows })
}

/// Rows are `source->target` scenarios, columns the methods present.
pub fn table3(results: &[RunResult]) -> Result<Table> {
    check_dataset(results)?;
    let mut grid: BTreeMap<(String, String), BTreeMap<Method, f64>> = BTreeMap::new();
    for r in results {
        if let (Protocol::Transfer { source, target }, Some(f)) = (&r.config.protocol, mean_mf1(r)) {
            grid.entry((source.clone(), target.clone())).or_default().insert(r.config.algorithm, f);
        }
    }
    let methods: Vec<Method> = Method::ALL.into_iter().filter(|m| grid.values().any(|row| row.contains_key(m))).collect();
    let mut header = vec!["scenario".to_string()];
    header.extend(methods.iter().map(|m| m.to_string()));
    header.push("flags".into());
    let rows = grid
        .iter()
        .map(|((s, t), vals)| {
            let v: Vec<f64> = methods.iter().map(|m| vals.get(m).copied().unwrap_or(f64::NAN)).collect();
            let marks = ranks(&v);
            let mut row = vec![format!("{s}->{t}")];
            row.extend(v.iter().map(|x| if x.is_nan() { String::new() } else { num(*x) }));
            let flags: Vec<String> =
                methods.iter().zip(&marks).filter(|(_, k)| !k.is_empty()).map(|(m, k)| format!("{m}={k}")).collect();
            row.push(flags.join(";"));
            row
        })
        .collect();
    Ok(Table { header, rows })
}

fn plot_err<E: std::fmt::Debug>(e: E) -> SslError {
    SslError::Report(format!("plot: {e:?}"))
}

fn plot_fig2(curves: &Curves, path: &Path) -> Result<()> {
    let fractions: Vec<f64> = {
        let mut f: Vec<f64> = curves.values().flatten().map(|p| p.0).collect();
        f.sort_by(f64::total_cmp);
        f.dedup();
        f
    };
    let pos = |x: f64| fractions.iter().position(|&f| f == x).unwrap_or(0) as f64;
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5..(fractions.len() as f64 - 0.5), 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_labels(fractions.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < fractions.len() {
                format!("{}%", fractions[i as usize] * 100.0)
            } else {
                String::new()
            }
        })
        .x_desc("labeled fraction")
        .y_desc("macro F1")
        .draw()
        .map_err(plot_err)?;
    for (i, ((m, b), pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().map(|p| (pos(p.0), p.1)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("{m} ({b})"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Grouped bars: one group per label, one bar per series.
fn plot_bars(groups: &[(String, Vec<f64>)], series: &[&str], y_desc: &str, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = groups.iter().flat_map(|g| g.1.iter().copied()).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-3) * 1.15;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5..(groups.len() as f64 - 0.5), 0.0..top)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < groups.len() {
                groups[i as usize].0.clone()
            } else {
                String::new()
            }
        })
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / series.len().max(1) as f64;
    for (s, name) in series.iter().enumerate() {
        let color = Palette99::pick(s).to_rgba();
        chart
            .draw_series(groups.iter().enumerate().filter(|(_, g)| g.1[s].is_finite()).map(|(i, g)| {
                let x0 = i as f64 - 0.4 + s as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width * 0.9, g.1[s])], color.filled())
            }))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Writes `<layout>.csv` (and a figure where the layout has one) under
/// `out_dir`; returns the written paths.
pub fn aggregate_report(results: &[RunResult], layout: Layout, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| SslError::io(out_dir, e))?;
    let table = match layout {
        Layout::Table2 => table2(results)?,
        Layout::Fig2 => fig2(results)?,
        Layout::Fig3 => fig3(results)?,
        Layout::Table3 => table3(results)?,
    };
    let csv_path = out_dir.join(format!("{layout}.csv"));
    std::fs::write(&csv_path, table.to_csv()?).map_err(|e| SslError::io(&csv_path, e))?;
    let mut written = vec![csv_path];
    let svg = out_dir.join(format!("{layout}.svg"));
    match layout {
        Layout::Fig2 => plot_fig2(&fig2_curves(results)?, &svg)?,
        Layout::Fig3 => {
            let groups: Vec<(String, Vec<f64>)> = fig3_deltas(results)?
                .iter()
                .map(|d| (format!("{} {}%", d.algorithm, d.label_fraction * 100.0), vec![d.mf1_imbalanced, d.mf1_balanced]))
                .collect();
            plot_bars(&groups, &["imbalanced", "balanced"], "macro F1", &svg)?;
        }
        Layout::Table3 => {
            let t = table3(results)?;
            let series: Vec<&str> = t.header[1..t.header.len() - 1].iter().map(String::as_str).collect();
            let groups: Vec<(String, Vec<f64>)> = t
                .rows
                .iter()
                .map(|r| (r[0].clone(), r[1..r.len() - 1].iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect()))
                .collect();
            plot_bars(&groups, &series, "target macro F1", &svg)?;
        }
        Layout::Table2 => return Ok(written),
    }
    written.push(svg);
    Ok(written)
}
