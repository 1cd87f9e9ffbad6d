//! Grouped bar charts of report rows and a markdown summary table.
//!
//! Each chart has one group of bars per distinct (test set, fraction,
//! rank, alpha) cell in row order and one bar per method inside a group.
//! Charts carry no text; `summary.md` holds the numbers and the colour key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use crate::report::{Row, RowMethod};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub fn colour(method: RowMethod) -> Rgb<u8> {
    match method {
        RowMethod::Baseline => Rgb([140, 140, 140]),
        RowMethod::Fft => Rgb([31, 119, 180]),
        RowMethod::Lora => Rgb([255, 127, 14]),
        RowMethod::Pfm => Rgb([44, 160, 44]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mae,
    Rmse,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Rmse, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::Ssim => "ssim",
        }
    }

    fn of(self, r: &Row) -> f64 {
        match self {
            Metric::Mae => r.mae,
            Metric::Rmse => r.rmse,
            Metric::Ssim => r.ssim,
        }
    }
}

fn cell_label(r: &Row) -> String {
    let mut s = format!("{} {}%", r.test_dataset, r.data_fraction);
    if let (Some(rank), Some(alpha)) = (r.rank, r.alpha) {
        if r.command == "sweep" {
            let _ = write!(s, " r={rank} a={alpha}");
        }
    }
    s
}

/// Cells in first-seen order and methods in enum order.
fn layout(rows: &[Row]) -> (Vec<String>, Vec<RowMethod>) {
    let mut cells: Vec<String> = Vec::new();
    let mut methods: Vec<RowMethod> = Vec::new();
    for r in rows {
        let c = cell_label(r);
        if !cells.contains(&c) {
            cells.push(c);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods.sort();
    (cells, methods)
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(y1)..y0.max(y1) {
        for x in x0.min(x1)..x0.max(x1) {
            img.put_pixel(x, y, c);
        }
    }
}

pub fn bar_chart(rows: &[Row], metric: Metric) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (cells, methods) = layout(rows);
    let top = rows.iter().map(|r| metric.of(r)).fold(0.0f64, f64::max);
    let scale = if metric == Metric::Ssim { top.max(1.0) } else { top.max(f64::MIN_POSITIVE) };
    let plot_h = HEIGHT - 2 * MARGIN;
    let base_y = HEIGHT - MARGIN;
    for k in 1..=4 {
        let y = base_y - plot_h * k / 4;
        fill(&mut img, MARGIN, y, WIDTH - MARGIN, y + 1, GRID);
    }
    let group_w = (WIDTH - 2 * MARGIN) / cells.len().max(1) as u32;
    let bar_w = (group_w * 4 / 5 / methods.len().max(1) as u32).max(1);
    for r in rows {
        let (Some(g), Some(m)) = (
            cells.iter().position(|c| *c == cell_label(r)),
            methods.iter().position(|&m| m == r.method),
        ) else {
            continue;
        };
        let v = metric.of(r).max(0.0);
        let h = ((v / scale) * plot_h as f64).round().min(plot_h as f64) as u32;
        let x0 = MARGIN + g as u32 * group_w + group_w / 10 + m as u32 * bar_w;
        fill(&mut img, x0, base_y - h, x0 + bar_w.saturating_sub(1).max(1), base_y, colour(r.method));
    }
    fill(&mut img, MARGIN, MARGIN, MARGIN + 2, base_y, AXIS);
    fill(&mut img, MARGIN, base_y, WIDTH - MARGIN, base_y + 2, AXIS);
    img
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:+.digits$}")).unwrap_or_else(|| "-".into())
}

/// Markdown table of every row. Identical input gives identical bytes.
pub fn summary_markdown(rows: &[Row]) -> String {
    let (_, methods) = layout(rows);
    let mut out = String::from("# Experiment summary\n\n");
    let _ = writeln!(out, "{} rows.\n", rows.len());
    out.push_str("| command | train | test | split | method | fraction | r | alpha | trainable | n_train | MAE | RMSE | SSIM | dMAE | dRMSE | dSSIM | best |\n");
    out.push_str("|---|---|---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---|\n");
    for r in rows {
        let split = serde_json::to_value(r.split).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {} | {} | {} | {} |",
            r.command,
            r.train_dataset,
            r.test_dataset,
            split,
            r.method,
            r.data_fraction,
            r.rank.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.alpha.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.trainable_params,
            r.n_train,
            r.mae,
            r.rmse,
            r.ssim,
            opt(r.improvement_mae, 3),
            opt(r.improvement_rmse, 3),
            opt(r.improvement_ssim, 3),
            if r.best { "yes" } else { "" },
        );
    }
    out.push_str("\nBar colours: ");
    let key: Vec<String> = methods
        .iter()
        .map(|&m| {
            let Rgb([r, g, b]) = colour(m);
            format!("{m} #{r:02x}{g:02x}{b:02x}")
        })
        .collect();
    out.push_str(&key.join(", "));
    out.push_str(".\n");
    out
}

/// Writes `mae.png`, `rmse.png`, `ssim.png` and `summary.md` into `dir`.
pub fn render(rows: &[Row], dir: &Path) -> Result<Vec<PathBuf>> {
    anyhow::ensure!(!rows.is_empty(), "nothing to plot");
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for m in Metric::ALL {
        let path = dir.join(format!("{}.png", m.name()));
        bar_chart(rows, m).save(&path).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    let path = dir.join("summary.md");
    std::fs::write(&path, summary_markdown(rows)).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(written)
}
