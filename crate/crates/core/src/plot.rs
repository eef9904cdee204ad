//! Static SVG charts for metric histories and ablation tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Header plus rows of a comma-separated table without quoting.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Data("csv: empty input".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::Data(format!(
                "csv line {}: {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("csv: missing column {name}")))
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("csv: {s:?} is not a number")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_svg(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<path d=\"M{PAD} {PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        H - PAD,
        W - PAD
    );
    s
}

fn y_axis(s: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", PAD - 4.0, y + 4.0);
        let _ = writeln!(s, "<path d=\"M{PAD} {y:.1} H{}\" stroke=\"#ddd\"/>", W - PAD);
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi - lo < 1e-12 {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// Loss and accuracy curves from a training metrics CSV.
pub fn history_svg(csv: &str) -> Result<String> {
    let (header, rows) = parse_csv(csv)?;
    let x_col = column(&header, "epoch")?;
    let series = ["total_loss", "ce_loss", "kl_loss", "eval_accuracy"];
    let cols: Vec<usize> = series.iter().map(|n| column(&header, n)).collect::<Result<_>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| num(&r[x_col])).collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = cols
        .iter()
        .map(|&c| rows.iter().map(|r| num(&r[c])).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let (x_lo, x_hi) = range(xs.iter().copied());
    let (y_lo, y_hi) = range(ys.iter().flatten().copied());
    let px = |x: f64| PAD + (W - 2.0 * PAD) * (x - x_lo) / (x_hi - x_lo);
    let py = |y: f64| H - PAD - (H - 2.0 * PAD) * (y - y_lo) / (y_hi - y_lo);
    let mut s = open_svg("training history");
    y_axis(&mut s, y_lo, y_hi);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>", W / 2.0, H - 12.0);
    for (k, (name, y)) in series.iter().zip(&ys).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(y)
            .filter(|(_, v)| v.is_finite())
            .map(|(&x, &v)| format!("{:.1},{:.1}", px(x), py(v)))
            .collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            W - PAD - 90.0,
            PAD + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Mean accuracy per ablation row with ±1 std whiskers; skipped rows are
/// drawn as empty slots.
pub fn ablation_svg(csv: &str) -> Result<String> {
    let (header, rows) = parse_csv(csv)?;
    let c = |n| column(&header, n);
    let (cm, cr, cc, cs, cmode, cmean, cstd, cstatus) = (
        c("M")?,
        c("r")?,
        c("consistency")?,
        c("sharing")?,
        c("mode")?,
        c("accuracy_mean")?,
        c("accuracy_std")?,
        c("status")?,
    );
    let n = rows.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let py = |y: f64| H - PAD - (H - 2.0 * PAD) * y.clamp(0.0, 1.0);
    let mut s = open_svg("ablation: accuracy mean ± std");
    y_axis(&mut s, 0.0, 1.0);
    for (i, r) in rows.iter().enumerate() {
        let x = PAD + slot * (i as f64 + 0.5);
        let label = format!(
            "M{} r{} {}{} {}",
            r[cm],
            r[cr],
            if r[cc] == "true" { "C" } else { "-" },
            if r[cs] == "true" { "S" } else { "-" },
            r[cmode]
        );
        let _ = writeln!(
            s,
            "<text transform=\"translate({x:.1},{}) rotate(60)\" font-size=\"9\">{}</text>",
            H - PAD + 8.0,
            escape(&label)
        );
        if r[cstatus] != "ok" {
            continue;
        }
        let (mean, std) = (num(&r[cmean])?, num(&r[cstd])?);
        let w = (slot * 0.6).max(1.0);
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            x - w / 2.0,
            py(mean),
            H - PAD - py(mean),
            COLORS[i % COLORS.len()]
        );
        let _ = writeln!(
            s,
            "<path d=\"M{x:.1} {:.1} V{:.1}\" stroke=\"black\"/>",
            py(mean + std),
            py(mean - std)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
