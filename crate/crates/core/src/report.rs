//! Markdown tables, SVG bar charts and attention-weight summaries built from
//! the long-format report CSV.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::evaluation::{mean_std, EvalRegion, MetricsReport, REPORT_COLUMNS};
use crate::labels::{Modality, SubRegion};
use crate::prompting::Variant;

/// One parsed line of a report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub case_id: String,
    pub region: EvalRegion,
    pub dice: f64,
    pub iou: f64,
    pub variant: String,
    pub fold: usize,
    pub seed: u64,
}

/// Splits a header line and locates every required column.
fn column_index(header: &str, required: &[&str]) -> Result<Vec<usize>> {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    required
        .iter()
        .map(|name| {
            cols.iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::format(*name, "missing column"))
        })
        .collect()
}

fn field<'a>(fields: &[&'a str], idx: usize, name: &str, line: usize) -> Result<&'a str> {
    fields
        .get(idx)
        .map(|s| s.trim())
        .ok_or_else(|| Error::format(name, format!("line {line}: too few fields")))
}

fn parse_num<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(name, format!("line {line}: cannot parse {s:?}")))
}

/// Parses a report CSV. Columns may appear in any order; extra columns are
/// ignored.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format("case_id", "empty report"))?;
    let idx = column_index(header, &REPORT_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        let get = |k: usize| field(&f, idx[k], REPORT_COLUMNS[k], n);
        let region_name = get(1)?;
        let region = EvalRegion::from_name(region_name)
            .map_err(|_| Error::format("region", format!("line {n}: unknown region {region_name:?}")))?;
        let dice: f64 = parse_num(get(2)?, "dice", n)?;
        let iou: f64 = parse_num(get(3)?, "iou", n)?;
        for (name, v) in [("dice", dice), ("iou", iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::format(name, format!("line {n}: {v} outside [0, 1]")));
            }
        }
        rows.push(ReportRow {
            case_id: get(0)?.to_string(),
            region,
            dice,
            iou,
            variant: get(4)?.to_string(),
            fold: parse_num(get(5)?, "fold", n)?,
            seed: parse_num(get(6)?, "seed", n)?,
        });
    }
    Ok(rows)
}

/// Scores of one run label (the `variant` column), pooled over folds.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub dice: [Vec<f64>; 5],
    pub iou: [Vec<f64>; 5],
}

impl RunSummary {
    pub fn dice(&self, r: EvalRegion) -> (f64, f64) {
        mean_std(&self.dice[r.index()])
    }

    pub fn iou(&self, r: EvalRegion) -> (f64, f64) {
        mean_std(&self.iou[r.index()])
    }

    pub fn from_report(report: &MetricsReport) -> Self {
        Self {
            label: report.variant.clone(),
            dice: EvalRegion::ALL.map(|r| report.dice_values(r)),
            iou: EvalRegion::ALL.map(|r| report.iou_values(r)),
        }
    }
}

/// Groups rows by run label, in order of first appearance.
pub fn summarize(rows: &[ReportRow]) -> Vec<RunSummary> {
    let mut order: Vec<RunSummary> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for row in rows {
        let i = *pos.entry(&row.variant).or_insert_with(|| {
            order.push(RunSummary {
                label: row.variant.clone(),
                dice: Default::default(),
                iou: Default::default(),
            });
            order.len() - 1
        });
        order[i].dice[row.region.index()].push(row.dice);
        order[i].iou[row.region.index()].push(row.iou);
    }
    order
}

/// Run label for a variant, optionally restricted to one modality.
pub fn run_label(variant: Variant, single: Option<Modality>) -> String {
    match single {
        Some(m) => format!("{}:{}", variant.name(), m.name()),
        None => variant.name().to_string(),
    }
}

fn split_label(label: &str) -> (Option<Variant>, Option<&str>) {
    let (v, m) = match label.split_once(':') {
        Some((v, m)) => (v, Some(m)),
        None => (label, None),
    };
    (Variant::from_name(v).ok(), m)
}

/// Row heading used by the per-modality and per-sub-region tables.
fn modality_heading(label: &str) -> String {
    match split_label(label) {
        (_, Some(m)) => m.to_string(),
        (Some(v), None) if v == Variant::BASELINE => "Multi-modal (fine-tuned)".to_string(),
        (Some(v), None) => format!("Multi-modal ({})", v.label()),
        (None, None) => label.to_string(),
    }
}

fn ablation_heading(label: &str) -> String {
    match split_label(label) {
        (Some(v), None) => v.label().to_string(),
        (Some(v), Some(m)) => format!("{} [{m}]", v.label()),
        _ => label.to_string(),
    }
}

fn pm((mean, std): (f64, f64)) -> String {
    if mean.is_nan() {
        "n/a".to_string()
    } else {
        format!("{mean:.4} ± {std:.4}")
    }
}

fn markdown(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n", headers.join(" | "));
    s.push_str(&format!("|{}\n", headers.iter().map(|_| "---|").collect::<String>()));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

const SUBREGION_COLUMNS: [EvalRegion; 4] = [EvalRegion::Ncr, EvalRegion::Ed, EvalRegion::Et, EvalRegion::Wt];

fn region_dice_table(first: &str, runs: &[RunSummary], heading: impl Fn(&str) -> String) -> String {
    let mut headers = vec![first.to_string()];
    headers.extend(SUBREGION_COLUMNS.iter().map(|r| format!("{} Dice", r.name())));
    let headers: Vec<&str> = headers.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|run| {
            let mut row = vec![heading(&run.label)];
            row.extend(SUBREGION_COLUMNS.iter().map(|&r| pm(run.dice(r))));
            row
        })
        .collect();
    markdown(&headers, &rows)
}

/// Ablation layout: one row per variant, Dice of NCR, ED, ET and WT. Known
/// variants are listed in ablation order.
pub fn ablation_table(runs: &[RunSummary]) -> String {
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by_key(|r| {
        let (v, _) = split_label(&r.label);
        v.and_then(|v| Variant::ALL.iter().position(|&x| x == v)).unwrap_or(Variant::ALL.len())
    });
    let owned: Vec<RunSummary> = sorted.into_iter().cloned().collect();
    region_dice_table("Method", &owned, ablation_heading)
}

/// Per-sub-region layout: one row per modality setting.
pub fn subregion_table(runs: &[RunSummary]) -> String {
    region_dice_table("Modality", &modality_order(runs), modality_heading)
}

/// Per-modality layout: whole-tumor Dice and IoU for each modality setting.
pub fn modality_table(runs: &[RunSummary]) -> String {
    let rows: Vec<Vec<String>> = modality_order(runs)
        .iter()
        .map(|r| vec![modality_heading(&r.label), pm(r.dice(EvalRegion::Wt)), pm(r.iou(EvalRegion::Wt))])
        .collect();
    markdown(&["Modality", "Dice", "IoU"], &rows)
}

/// Single-modality runs first in acquisition order, then multi-modal runs.
fn modality_order(runs: &[RunSummary]) -> Vec<RunSummary> {
    let mut v: Vec<RunSummary> = runs.to_vec();
    v.sort_by_key(|r| match split_label(&r.label).1 {
        Some(m) => Modality::ORDER.iter().position(|x| x.name() == m).unwrap_or(4),
        None => 5,
    });
    v
}

/// Grouped bar chart of per-region Dice means with ±std whiskers.
pub fn bar_chart_svg(title: &str, runs: &[RunSummary], regions: &[EvalRegion]) -> String {
    const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (50.0, 150.0, 40.0, 40.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let group_w = plot_w / regions.len().max(1) as f64;
    let bar_w = group_w * 0.8 / runs.len().max(1) as f64;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    for (g, region) in regions.iter().enumerate() {
        let x0 = left + g as f64 * group_w + group_w * 0.1;
        for (k, run) in runs.iter().enumerate() {
            let (mean, std) = run.dice(*region);
            if mean.is_nan() {
                continue;
            }
            let x = x0 + k as f64 * bar_w;
            let color = PALETTE[k % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                y(mean),
                bar_w * 0.9,
                y(0.0) - y(mean)
            );
            let cx = x + bar_w * 0.45;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                y(mean + std),
                y(mean - std)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + (g as f64 + 0.5) * group_w,
            h - bottom + 18.0,
            region.name()
        );
    }
    for (k, run) in runs.iter().enumerate() {
        let ly = top + 10.0 + k as f64 * 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 10.0,
            ly - 10.0,
            PALETTE[k % PALETTE.len()],
            w - right + 28.0,
            ly,
            escape(&ablation_heading(&run.label))
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Attention weights of one slice and sub-region.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub case_id: String,
    pub slice: usize,
    pub region: SubRegion,
    /// One weight per modality, in the order of the CSV header.
    pub alpha: Vec<f64>,
}

pub fn attention_records(case_id: &str, alphas: &[(usize, AttentionWeights)]) -> Vec<AttentionRecord> {
    let mut out = Vec::with_capacity(alphas.len() * 3);
    for (z, a) in alphas {
        for r in SubRegion::ALL {
            out.push(AttentionRecord {
                case_id: case_id.to_string(),
                slice: *z,
                region: r,
                alpha: a.for_region(r),
            });
        }
    }
    out
}

/// `case,slice,sub_region,alpha_<modality>...`
pub fn attention_csv(records: &[AttentionRecord], modalities: &[Modality]) -> String {
    let mut s = String::from("case,slice,sub_region");
    for m in modalities {
        let _ = write!(s, ",alpha_{}", m.name());
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{},{}", r.case_id, r.slice, r.region.name());
        for a in &r.alpha {
            let _ = write!(s, ",{a:.6}");
        }
        s.push('\n');
    }
    s
}

/// Parses [`attention_csv`] output, returning modality names and records.
pub fn parse_attention_csv(text: &str) -> Result<(Vec<String>, Vec<AttentionRecord>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format("case", "empty attention file"))?;
    let idx = column_index(header, &["case", "slice", "sub_region"])?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let alpha_cols: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.strip_prefix("alpha_").map(|m| (i, m.to_string())))
        .collect();
    if alpha_cols.is_empty() {
        return Err(Error::format("alpha_*", "missing column"));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        let name = field(&f, idx[2], "sub_region", n)?;
        let region = SubRegion::ALL
            .into_iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| Error::format("sub_region", format!("line {n}: unknown sub-region {name:?}")))?;
        let alpha = alpha_cols
            .iter()
            .map(|(k, m)| parse_num(field(&f, *k, m, n)?, &format!("alpha_{m}"), n))
            .collect::<Result<Vec<f64>>>()?;
        records.push(AttentionRecord {
            case_id: field(&f, idx[0], "case", n)?.to_string(),
            slice: parse_num(field(&f, idx[1], "slice", n)?, "slice", n)?,
            region,
            alpha,
        });
    }
    Ok((alpha_cols.into_iter().map(|(_, m)| m).collect(), records))
}

/// Mean ± std of each modality weight, one row per sub-region.
pub fn attention_summary_table(modalities: &[String], records: &[AttentionRecord]) -> String {
    let mut headers = vec!["Sub-region".to_string()];
    headers.extend(modalities.iter().map(|m| format!("α {m}")));
    let headers: Vec<&str> = headers.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = SubRegion::ALL
        .iter()
        .map(|&r| {
            let mut row = vec![r.name().to_string()];
            for k in 0..modalities.len() {
                let v: Vec<f64> = records.iter().filter(|x| x.region == r).map(|x| x.alpha[k]).collect();
                row.push(pm(mean_std(&v)));
            }
            row
        })
        .collect();
    markdown(&headers, &rows)
}
