//! Image and plot output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use image::{ImageBuffer, Luma, Rgb};
use sparse_vrnn::training::EvalRow;

/// Height in pixels of the color bar under each false-color rendering.
const BAR_ROWS: usize = 4;

/// Piecewise-linear blue-cyan-yellow-red map of `t` in [0, 1].
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [48.0, 18.0, 140.0]),
        (0.25, [30.0, 110.0, 230.0]),
        (0.5, [40.0, 210.0, 190.0]),
        (0.75, [250.0, 210.0, 40.0]),
        (1.0, [200.0, 30.0, 20.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|(s, _)| *s <= t).unwrap_or(0).min(STOPS.len() - 2);
    let (s0, c0) = STOPS[i];
    let (s1, c1) = STOPS[i + 1];
    let f = (t - s0) / (s1 - s0);
    [0, 1, 2].map(|k| (c0[k] + f * (c1[k] - c0[k])).round() as u8)
}

/// 8-bit rendering of values in `[lo, hi]` with a color bar along the
/// bottom; pixels where `valid` is false are black.
pub fn save_false_color(
    values: &[f64],
    valid: &[bool],
    height: usize,
    width: usize,
    (lo, hi): (f64, f64),
    path: &Path,
) -> anyhow::Result<()> {
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(width as u32, (height + BAR_ROWS) as u32);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let c = if valid[i] {
                colormap((values[i] - lo) / (hi - lo))
            } else {
                [0, 0, 0]
            };
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    for x in 0..width {
        let c = colormap(x as f64 / (width.max(2) - 1) as f64);
        for y in height..height + BAR_ROWS {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

/// Probabilities as a 16-bit image, 65535 = 1.
pub fn save_probability_png(values: &[f64], height: usize, width: usize, path: &Path) -> anyhow::Result<()> {
    let raw: Vec<u16> = values
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16)
        .collect();
    let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(width as u32, height as u32, raw)
        .context("probability buffer size")?;
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Line plot of RMSE per predicted frame with its 95% band and the
/// persistence baseline.
pub fn rmse_plot_svg(rows: &[EvalRow]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 30.0, 50.0);
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let y_max = rows
        .iter()
        .flat_map(|r| [finite(r.rmse_mean + r.rmse_ci95), finite(r.baseline_rmse)])
        .fold(0.0, f64::max)
        .max(1e-9);
    let step = nice_step(y_max);
    let y_top = (y_max / step).ceil() * step;
    let n = rows.len().max(2) as f64;
    let px = |i: f64| left + (i - 1.0) / (n - 1.0) * (w - left - right);
    let py = |v: f64| top + (1.0 - finite(v) / y_top) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let mut v = 0.0;
    while v <= y_top + step * 1e-9 {
        let y = py(v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            w - right,
            left - 6.0,
            y + 4.0,
            format_tick(v, step)
        );
        v += step;
    }
    for r in rows {
        let x = px(r.frame_index as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            h - bottom + 18.0,
            r.frame_index
        );
    }
    if !rows.is_empty() {
        let upper = rows.iter().map(|r| format!("{:.2},{:.2}", px(r.frame_index as f64), py(r.rmse_mean + r.rmse_ci95)));
        let lower = rows
            .iter()
            .rev()
            .map(|r| format!("{:.2},{:.2}", px(r.frame_index as f64), py((r.rmse_mean - r.rmse_ci95).max(0.0))));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(s, r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##, band.join(" "));
        let line = |f: &dyn Fn(&EvalRow) -> f64| -> String {
            rows.iter()
                .map(|r| format!("{:.2},{:.2}", px(r.frame_index as f64), py(f(r))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            line(&|r| r.rmse_mean)
        );
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="6 4"/>"##,
            line(&|r| r.baseline_rmse)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
        w - left - right,
        h - top - bottom
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">predicted frame</text>"#,
        (left + w - right) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">RMSE (m)</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="20" fill="#1f77b4">model, mean and 95% CI</text><text x="{:.2}" y="20" fill="#d62728">persistence baseline</text>"##,
        left,
        left + 220.0
    );
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
