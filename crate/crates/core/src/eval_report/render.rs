//! Tables, ROC data and small raster figures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{auc_from_scores, AggregateReport, ConfusionMatrix, EvalError, MetricValues, ScoredSet, TestSet};

/// Column order of the results table; each metric has a Test-1 and a Test-2
/// column.
pub const TABLE_METRICS: [(&str, &str); 5] = [
    ("precision", "Precision"),
    ("recall", "Recall"),
    ("f1", "F1-Score"),
    ("accuracy", "Top-1 Accuracy"),
    ("auc", "AUC"),
];

fn metric(values: &MetricValues, key: &str) -> f64 {
    match key {
        "precision" => values.precision,
        "recall" => values.recall,
        "f1" => values.f1,
        "accuracy" => values.accuracy,
        "auc" => values.auc,
        _ => unreachable!("unknown metric {key}"),
    }
}

fn models_in_order(report: &AggregateReport) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !out.contains(&r.model.as_str()) {
            out.push(&r.model);
        }
    }
    out
}

fn test_sets(report: &AggregateReport) -> Vec<TestSet> {
    [TestSet::Test1, TestSet::Test2]
        .into_iter()
        .filter(|&t| report.has_test_set(t))
        .collect()
}

/// Markdown table of fold means. Precision, recall, F1 and accuracy get two
/// decimals, AUC three. Test-2 columns appear only if any Test-2 rows exist.
/// `display_name` maps stored model keys to row labels.
pub fn table_markdown(report: &AggregateReport, display_name: impl Fn(&str) -> String) -> String {
    let sets = test_sets(report);
    let mut out = String::from("| Model |");
    let mut rule = String::from("|---|");
    for (_, title) in TABLE_METRICS {
        for t in &sets {
            let _ = write!(out, " {title} ({}) |", t.display_name());
            rule.push_str("---:|");
        }
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for model in models_in_order(report) {
        let _ = write!(out, "| {} |", display_name(model));
        for (key, _) in TABLE_METRICS {
            for &t in &sets {
                match report.row(model, t) {
                    Some(row) => {
                        let v = metric(&row.summary.mean, key);
                        if key == "auc" {
                            let _ = write!(out, " {v:.3} |");
                        } else {
                            let _ = write!(out, " {v:.2} |");
                        }
                    }
                    None => out.push_str(" - |"),
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Full-precision CSV with a mean and std column per metric and test set.
pub fn table_csv(report: &AggregateReport) -> String {
    let sets = test_sets(report);
    let mut out = String::from("model");
    for (key, _) in TABLE_METRICS {
        for t in &sets {
            let _ = write!(out, ",{key}_{t}_mean,{key}_{t}_std");
        }
    }
    out.push('\n');
    for model in models_in_order(report) {
        out.push_str(model);
        for (key, _) in TABLE_METRICS {
            for &t in &sets {
                match report.row(model, t) {
                    Some(row) => {
                        let _ = write!(out, ",{},{}", metric(&row.summary.mean, key), metric(&row.summary.std, key));
                    }
                    None => out.push_str(",,"),
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this are called positive; the first point uses
    /// `+inf`.
    pub threshold: f64,
}

/// ROC operating points from the strictest threshold down, one point per
/// distinct score, starting at (0, 0) and ending at (1, 1).
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<RocPoint>, EvalError> {
    let scores = set.scores();
    let labels = set.labels();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassSet);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: s,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a polyline of ROC points.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// Pools every fold's scores into a single set (ids prefixed by fold so they
/// stay unique) and returns its curve with the pooled AUC.
pub fn pooled_roc(sets: &[ScoredSet]) -> Result<(Vec<RocPoint>, f64), EvalError> {
    if sets.is_empty() {
        return Err(EvalError::EmptyRequest("no scored sets"));
    }
    let scores: Vec<f64> = sets.iter().flat_map(|s| s.scores()).collect();
    let labels: Vec<u8> = sets.iter().flat_map(|s| s.labels()).collect();
    let pooled = ScoredSet::from_slices(&scores, &labels)?;
    Ok((roc_curve(&pooled)?, auc_from_scores(&scores, &labels)?))
}

/// RGB raster with a few drawing primitives.
#[derive(Debug, Clone)]
pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

pub type Rgb = [u8; 3];

pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

// 3x5 glyphs, one row per entry, bit 2 is the left column.
const GLYPHS: [(char, [u8; 5]); 13] = [
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 7, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 1, 1]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('.', [0, 0, 0, 0, 2]),
    ('-', [0, 0, 7, 0, 0]),
    (' ', [0, 0, 0, 0, 0]),
];

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Canvas {
            width,
            height,
            data: fill.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, c);
            }
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Draws digits, '.', '-' and spaces; other characters are skipped.
    pub fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: Rgb) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for col in 0..3 {
                        if bits & (4 >> col) != 0 {
                            self.fill_rect(cx + col * scale, y + r as i64 * scale, scale, scale, c);
                        }
                    }
                }
            }
            cx += 4 * scale;
        }
    }

    pub fn text_width(s: &str, scale: i64) -> i64 {
        (s.chars().count() as i64 * 4 - 1).max(0) * scale
    }

    /// PNG bytes with each `(keyword, text)` pair stored as a tEXt chunk.
    pub fn encode_png(&self, text: &[(&str, &str)]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            for (k, v) in text {
                enc.add_text_chunk(k.to_string(), v.to_string()).expect("valid tEXt keyword");
            }
            let mut w = enc.write_header().expect("in-memory PNG header");
            w.write_image_data(&self.data).expect("in-memory PNG data");
        }
        out
    }
}

const ROC_SIZE: i64 = 400;
const MARGIN: i64 = 40;

/// ROC curves on a unit square: one coloured polyline per curve, in
/// [`PALETTE`] order, over a dashed chance diagonal. Tick labels mark 0, 0.5
/// and 1 on both axes.
pub fn roc_figure(curves: &[Vec<RocPoint>]) -> Result<Canvas, EvalError> {
    if curves.is_empty() {
        return Err(EvalError::EmptyRequest("no ROC curves"));
    }
    let side = ROC_SIZE + 2 * MARGIN;
    let mut c = Canvas::new(side as usize, side as usize, [255, 255, 255]);
    let to_px = |fpr: f64, tpr: f64| -> (i64, i64) {
        (
            MARGIN + (fpr * ROC_SIZE as f64).round() as i64,
            MARGIN + ROC_SIZE - (tpr * ROC_SIZE as f64).round() as i64,
        )
    };
    let grey = [160, 160, 160];
    for i in (0..=ROC_SIZE).step_by(8) {
        let (x, y) = to_px(i as f64 / ROC_SIZE as f64, i as f64 / ROC_SIZE as f64);
        c.line((x, y), ((x + 3).min(MARGIN + ROC_SIZE), (y - 3).max(MARGIN)), grey);
    }
    let black = [0, 0, 0];
    c.line(to_px(0.0, 0.0), to_px(1.0, 0.0), black);
    c.line(to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    c.line(to_px(1.0, 0.0), to_px(1.0, 1.0), black);
    c.line(to_px(0.0, 1.0), to_px(1.0, 1.0), black);
    for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let (x, _) = to_px(v, 0.0);
        c.text(x - Canvas::text_width(label, 2) / 2, MARGIN + ROC_SIZE + 8, label, 2, black);
        let (_, y) = to_px(0.0, v);
        c.text(MARGIN - 8 - Canvas::text_width(label, 2), y - 5, label, 2, black);
    }
    for (k, curve) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for w in curve.windows(2) {
            let a = to_px(w[0].fpr, w[0].tpr);
            let b = to_px(w[1].fpr, w[1].tpr);
            c.line(a, b, colour);
            c.line((a.0, a.1 - 1), (b.0, b.1 - 1), colour);
        }
    }
    Ok(c)
}

const CELL: i64 = 90;

/// One 2x2 panel per matrix, left to right. Rows are the true class
/// (positive first), columns the prediction. Cells are shaded by the row
/// fraction and labelled with the count.
pub fn confusion_figure(matrices: &[ConfusionMatrix]) -> Result<Canvas, EvalError> {
    if matrices.is_empty() {
        return Err(EvalError::EmptyRequest("no confusion matrices"));
    }
    let gap = 20;
    let width = gap + matrices.len() as i64 * (2 * CELL + gap);
    let height = 2 * CELL + 2 * gap;
    let mut c = Canvas::new(width as usize, height as usize, [255, 255, 255]);
    for (k, m) in matrices.iter().enumerate() {
        let x0 = gap + k as i64 * (2 * CELL + gap);
        let cells = [[m.tp, m.fn_], [m.fp, m.tn]];
        for (r, row) in cells.iter().enumerate() {
            let total = (row[0] + row[1]).max(1) as f64;
            for (col, &n) in row.iter().enumerate() {
                let frac = n as f64 / total;
                let shade = (255.0 - 200.0 * frac).round() as u8;
                let x = x0 + col as i64 * CELL;
                let y = gap + r as i64 * CELL;
                c.fill_rect(x, y, CELL, CELL, [shade, shade, 255]);
                let text_colour = if frac > 0.5 { [255, 255, 255] } else { [0, 0, 0] };
                let label = n.to_string();
                let tw = Canvas::text_width(&label, 3);
                c.text(x + (CELL - tw) / 2, y + (CELL - 15) / 2, &label, 3, text_colour);
            }
        }
        let black = [0, 0, 0];
        for i in 0..=2 {
            c.line((x0 + i * CELL, gap), (x0 + i * CELL, gap + 2 * CELL), black);
            c.line((x0, gap + i * CELL), (x0 + 2 * CELL, gap + i * CELL), black);
        }
    }
    Ok(c)
}
