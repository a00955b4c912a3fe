//! Report files.
//!
//! `scaling.csv` has one row per run with the columns
//! `variant,params,flops,auc,uauc,seed,size,macs,status`. `flops` counts two
//! FLOPs per multiply-accumulate and `macs` one, both per sample. Failed runs
//! carry `NaN` metrics and a `failed: <reason>` status.
//!
//! `fits.csv` has one row per fit with the columns
//! `series,x_kind,x_units,a,b,residual,baseline_auc,points`.
//!
//! `scaling.svg` plots AUC against the fit abscissa on a log axis, one colour
//! per variant, with every fitted curve overlaid.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::scaling::{PowerLawFit, RunStatus, ScalingPoint, XKind};

pub const POINTS_HEADER: [&str; 9] = ["variant", "params", "flops", "auc", "uauc", "seed", "size", "macs", "status"];
const FITS_HEADER: [&str; 8] = ["series", "x_kind", "x_units", "a", "b", "residual", "baseline_auc", "points"];

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn check_header(r: &mut csv::Reader<impl Read>, want: &[&str]) -> Result<()> {
    let got = r.headers().map_err(csv_err)?;
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::Parse(format!("expected header {}, got {}", want.join(","), got.iter().collect::<Vec<_>>().join(","))));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, name: &str) -> Result<T> {
    let raw = rec.get(k).ok_or_else(|| Error::Parse(format!("missing column {name}")))?;
    raw.parse().map_err(|_| Error::Parse(format!("bad {name} value '{raw}'")))
}

pub fn write_points_csv<W: Write>(points: &[ScalingPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(POINTS_HEADER).map_err(csv_err)?;
    for p in points {
        out.write_record([
            p.variant.to_string(),
            p.params.to_string(),
            p.flops.to_string(),
            p.auc.to_string(),
            p.uauc.to_string(),
            p.seed.to_string(),
            p.size.clone(),
            p.macs.to_string(),
            p.status.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(r: R) -> Result<Vec<ScalingPoint>> {
    let mut rd = csv::Reader::from_reader(r);
    check_header(&mut rd, &POINTS_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(ScalingPoint {
            variant: field::<Variant>(&rec, 0, "variant")?,
            params: field(&rec, 1, "params")?,
            flops: field(&rec, 2, "flops")?,
            auc: field(&rec, 3, "auc")?,
            uauc: field(&rec, 4, "uauc")?,
            seed: field(&rec, 5, "seed")?,
            size: field(&rec, 6, "size")?,
            macs: field(&rec, 7, "macs")?,
            status: field::<RunStatus>(&rec, 8, "status")?,
        });
    }
    Ok(out)
}

pub fn write_fits_csv<W: Write>(fits: &[PowerLawFit], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FITS_HEADER).map_err(csv_err)?;
    for f in fits {
        out.write_record([
            f.series.clone(),
            f.x_kind.to_string(),
            f.x_units.clone(),
            f.a.to_string(),
            f.b.to_string(),
            f.residual.to_string(),
            f.baseline_auc.to_string(),
            f.points.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fits_csv<R: Read>(r: R) -> Result<Vec<PowerLawFit>> {
    let mut rd = csv::Reader::from_reader(r);
    check_header(&mut rd, &FITS_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(PowerLawFit {
            series: field(&rec, 0, "series")?,
            x_kind: field(&rec, 1, "x_kind")?,
            x_units: field(&rec, 2, "x_units")?,
            a: field(&rec, 3, "a")?,
            b: field(&rec, 4, "b")?,
            residual: field(&rec, 5, "residual")?,
            baseline_auc: field(&rec, 6, "baseline_auc")?,
            points: field(&rec, 7, "points")?,
        });
    }
    Ok(out)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Log-x scatter of successful points per variant with fitted curves.
pub fn render_svg(points: &[ScalingPoint], fits: &[PowerLawFit]) -> String {
    let kind = fits.first().map_or(XKind::Params, |f| f.x_kind);
    let ok: Vec<&ScalingPoint> = points.iter().filter(|p| p.status.is_ok() && p.x(kind) > 0.0).collect();
    let mut variants: Vec<Variant> = Vec::new();
    for p in &ok {
        if !variants.contains(&p.variant) {
            variants.push(p.variant);
        }
    }
    let color = |series: &str| {
        let k = variants.iter().position(|v| v.name() == series).unwrap_or(variants.len() % COLORS.len());
        COLORS[k % COLORS.len()]
    };

    let lx: Vec<f64> = ok.iter().map(|p| p.x(kind).log10()).collect();
    let (mut x0, mut x1) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    x0 = x0.floor();
    x1 = x1.ceil().max(x0 + 1.0);
    let curve = |f: &PowerLawFit| -> Vec<(f64, f64)> {
        (0..=64).map(|k| x0 + (x1 - x0) * k as f64 / 64.0).map(|l| (l, f.predict(10f64.powf(l)))).collect()
    };
    let mut ys: Vec<f64> = ok.iter().map(|p| p.auc).collect();
    for f in fits {
        ys.extend(curve(f).into_iter().map(|(_, y)| y).filter(|y| y.is_finite()));
    }
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.5, 1.0);
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    (y0, y1) = (y0 - pad, y1 + pad);

    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |l: f64| LEFT + (l - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for e in (x0 as i64)..=(x1 as i64) {
        let x = sx(e as f64);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ccc"/>"##, TOP, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{e}</text>"#, TOP + ph + 18.0);
    }
    for k in 0..=5 {
        let y = y0 + (y1 - y0) * k as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#eee"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.4}</text>"#, LEFT - 6.0, py + 4.0);
    }
    let xlabel = match kind {
        XKind::Params => "dense parameters (log scale)",
        XKind::Flops => "forward FLOPs per sample (log scale)",
    };
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#, LEFT + pw / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">held-out AUC</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (p, l) in ok.iter().zip(&lx) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"><title>{} {} seed {}: {:.4}</title></circle>"#,
            sx(*l),
            sy(p.auc),
            color(p.variant.name()),
            p.variant,
            escape(&p.size),
            p.seed,
            p.auc
        );
    }
    for f in fits {
        let pts: Vec<String> =
            curve(f).into_iter().filter(|(_, y)| y.is_finite()).map(|(l, y)| format!("{:.2},{:.2}", sx(l), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5" stroke-dasharray="5,3"/>"#,
            pts.join(" "),
            color(&f.series)
        );
    }

    let mut row = 0.0;
    let mut legend = |text: String, c: &str, dashed: bool| {
        let y = TOP + 10.0 + row * 18.0;
        let lx = LEFT + pw + 14.0;
        if dashed {
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{y}" x2="{:.2}" y2="{y}" stroke="{c}" stroke-dasharray="5,3"/>"#, lx + 16.0);
        } else {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{y}" r="3.5" fill="{c}"/>"#, lx + 8.0);
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 22.0, y + 4.0, escape(&text));
        row += 1.0;
    };
    for v in &variants {
        legend(v.to_string(), color(v.name()), false);
    }
    for f in fits {
        legend(format!("{:.3e}·x^{:.4}", f.a, f.b), color(&f.series), true);
    }
    if let Some(f) = fits.first() {
        legend(format!("baseline {}", f.baseline_auc), "black", false);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `scaling.csv`, plus `fits.csv` and `scaling.svg` when `fits` is
/// nonempty, into `out_dir` (created if missing). Returns the written paths.
pub fn emit_report(points: &[ScalingPoint], fits: &[PowerLawFit], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if points.is_empty() {
        return Err(Error::Precondition("a report needs at least one point".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("scaling.csv");
    write_points_csv(points, std::fs::File::create(&csv_path)?)?;
    written.push(csv_path);
    if !fits.is_empty() {
        let fits_path = out_dir.join("fits.csv");
        write_fits_csv(fits, std::fs::File::create(&fits_path)?)?;
        written.push(fits_path);
        let svg_path = out_dir.join("scaling.svg");
        std::fs::write(&svg_path, render_svg(points, fits))?;
        written.push(svg_path);
    }
    Ok(written)
}
