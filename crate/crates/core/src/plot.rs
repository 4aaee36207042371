//! SVG figures drawn from the evaluation CSVs alone.

use crate::error::{Error, Result};
use plotters::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const FIG_RATE_VS_SNR: &str = "fig4_rate_vs_snr.svg";
pub const FIG_PSNR_VS_SNR: &str = "fig5_psnr_vs_snr.svg";
pub const FIG_PER_CLASS: &str = "fig6_per_class.svg";

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plotting failed: {e}")))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{} has no '{name}' column", path.display())))
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("not a number: '{s}'")))
}

fn bounds(series: &Series) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| {
        let m = ((hi - lo) * 0.08).max(1e-3);
        (lo - m, hi + m)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn line_chart<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &Series,
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

fn two_panels(out: &Path, left: (&str, &str, &str, &Series), right: (&str, &str, &str, &Series)) -> Result<()> {
    let root = SVGBackend::new(out, (1100, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (a, b) = root.split_horizontally(550);
    line_chart(&a, left.0, left.1, left.2, left.3)?;
    line_chart(&b, right.0, right.1, right.2, right.3)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn grouped(rows: &[Vec<String>], key: usize, x: usize, y: usize) -> Result<Series> {
    let mut m: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        m.entry(r[key].clone()).or_default().push((num(&r[x])?, num(&r[y])?));
    }
    Ok(m.into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v)
        })
        .collect())
}

/// Average rate and PSNR against SNR, one line per alpha.
pub fn plot_rate_vs_snr(csv_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let (h, rows) = read_table(csv_path)?;
    let (a, s, c, p) = (
        column(&h, "alpha", csv_path)?,
        column(&h, "snr_db", csv_path)?,
        column(&h, "avg_cpp", csv_path)?,
        column(&h, "avg_psnr", csv_path)?,
    );
    let label = |v: Series| -> Series { v.into_iter().map(|(k, p)| (format!("alpha={k}"), p)).collect() };
    let cpp = label(grouped(&rows, a, s, c)?);
    let psnr = label(grouped(&rows, a, s, p)?);
    let out = out_dir.join(FIG_RATE_VS_SNR);
    two_panels(
        &out,
        ("Average rate", "SNR (dB)", "CPP", &cpp),
        ("Average quality", "SNR (dB)", "PSNR (dB)", &psnr),
    )?;
    Ok(out)
}

/// PSNR against SNR for the adaptive model and every fixed-rate model.
pub fn plot_compare(csv_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let (h, rows) = read_table(csv_path)?;
    let (s, m, c, p) = (
        column(&h, "snr_db", csv_path)?,
        column(&h, "model_id", csv_path)?,
        column(&h, "cpp", csv_path)?,
        column(&h, "psnr", csv_path)?,
    );
    let psnr = grouped(&rows, m, s, p)?;
    let cpp = grouped(&rows, m, s, c)?;
    let out = out_dir.join(FIG_PSNR_VS_SNR);
    two_panels(
        &out,
        ("PSNR", "SNR (dB)", "PSNR (dB)", &psnr),
        ("Rate", "SNR (dB)", "CPP", &cpp),
    )?;
    Ok(out)
}

/// Per-class rate and PSNR, one line per model.
pub fn plot_per_class(csv_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let (h, rows) = read_table(csv_path)?;
    let (k, c, p) = (
        column(&h, "class", csv_path)?,
        column(&h, "avg_cpp", csv_path)?,
        column(&h, "avg_psnr", csv_path)?,
    );
    let m = h.iter().position(|x| x == "model_id");
    let rows: Vec<Vec<String>> = match m {
        Some(_) => rows,
        None => rows
            .into_iter()
            .map(|mut r| {
                r.push("model".into());
                r
            })
            .collect(),
    };
    let m = m.unwrap_or(h.len());
    let cpp = grouped(&rows, m, k, c)?;
    let psnr = grouped(&rows, m, k, p)?;
    let out = out_dir.join(FIG_PER_CLASS);
    two_panels(
        &out,
        ("Rate per class", "class", "CPP", &cpp),
        ("PSNR per class", "class", "PSNR (dB)", &psnr),
    )?;
    Ok(out)
}

/// Picks the figure from the CSV's columns.
pub fn plot_from_csv(csv_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let (h, _) = read_table(csv_path)?;
    let has = |n: &str| h.iter().any(|x| x == n);
    if has("class") {
        plot_per_class(csv_path, out_dir)
    } else if has("alpha") && has("avg_cpp") {
        plot_rate_vs_snr(csv_path, out_dir)
    } else if has("model_id") && has("cpp") {
        plot_compare(csv_path, out_dir)
    } else {
        Err(Error::Data(format!(
            "{} is not a ratesnr, compare or classes table",
            csv_path.display()
        )))
    }
}
