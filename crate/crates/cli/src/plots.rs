//! Plot bundle: per road class a time overlay, an amplitude-range summary and
//! a mean magnitude spectrum, each as a PNG and a CSV of the plotted values.
//! Figures carry no text; the CSV headers name the series.

use std::ops::Range;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use vtsyn_core::corpus::RoadClass;
use vtsyn_core::metrics::{amplitude_range_stats, fft_spectrum, RangeStats};

use crate::error::{CliError, Result};
use crate::report::EvalPair;

const SIZE: (u32, u32) = (800, 400);
const REAL: RGBColor = RGBColor(31, 119, 180);
const GENERATED: RGBColor = RGBColor(214, 39, 40);

fn draw_err(path: &Path) -> impl Fn(Box<dyn std::error::Error>) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn padded(lo: f64, hi: f64) -> Range<f64> {
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad)..(hi + pad)
}

fn bounds<'a>(series: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let to_err = |e: csv::Error| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(to_err)?;
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Two line series over a shared x axis.
fn line_plot(path: &Path, x: &[f64], a: &[f64], b: &[f64]) -> Result<()> {
    let err = draw_err(path);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let (ylo, yhi) = bounds([a, b]);
    let (xlo, xhi) = bounds([x]);
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(xlo..xhi, padded(ylo, yhi))
        .map_err(|e| err(Box::new(e)))?;
    for (ys, color) in [(a, REAL), (b, GENERATED)] {
        chart
            .draw_series(LineSeries::new(x.iter().copied().zip(ys.iter().copied()), color.stroke_width(2)))
            .map_err(|e| err(Box::new(e)))?;
    }
    root.present().map_err(|e| err(Box::new(e)))?;
    Ok(())
}

/// Box glyphs: whiskers at min/max, thin box p5–p95, thick box p25–p75.
fn range_plot(path: &Path, stats: &[(RangeStats, RGBColor)]) -> Result<()> {
    let err = draw_err(path);
    let root = BitMapBackend::new(path, (SIZE.1, SIZE.1)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let lo = stats.iter().map(|s| s.0.min).fold(f64::INFINITY, f64::min);
    let hi = stats.iter().map(|s| s.0.max).fold(f64::NEG_INFINITY, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(0.0..stats.len() as f64, padded(lo, hi))
        .map_err(|e| err(Box::new(e)))?;
    for (i, (s, color)) in stats.iter().enumerate() {
        let c = i as f64 + 0.5;
        let whisker = PathElement::new(vec![(c, s.min), (c, s.max)], color.stroke_width(2));
        let outer = Rectangle::new([(c - 0.3, s.p5), (c + 0.3, s.p95)], color.mix(0.25).filled());
        let inner = Rectangle::new([(c - 0.3, s.p25), (c + 0.3, s.p75)], color.filled());
        chart.draw_series(std::iter::once(whisker)).map_err(|e| err(Box::new(e)))?;
        chart.draw_series([outer, inner]).map_err(|e| err(Box::new(e)))?;
    }
    root.present().map_err(|e| err(Box::new(e)))?;
    Ok(())
}

fn mean_spectrum<'a>(signals: impl IntoIterator<Item = &'a [f64]>, fs: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut freqs = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for s in signals {
        let sp = fft_spectrum(s, fs)?;
        if acc.is_empty() {
            acc = vec![0.0; sp.magnitudes.len()];
            freqs = sp.freqs.clone();
        }
        for (a, m) in acc.iter_mut().zip(&sp.magnitudes) {
            *a += m;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    Ok((freqs, acc))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Renders the 18-figure bundle into `dir`; returns the PNG paths.
/// Overlays use the first pair of each class and its first generation;
/// ranges and spectra use channel 0 of every pair.
pub fn render_plots(pairs: &[EvalPair], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut written = Vec::new();
    for class in RoadClass::ALL {
        let members: Vec<&EvalPair> = pairs.iter().filter(|p| p.road_class == class).collect();
        let first = members
            .iter()
            .find(|p| !p.generated.is_empty())
            .ok_or_else(|| CliError::Data(format!("no generated signals for road class {class}")))?;
        let fs = first.real.sample_rate_hz;
        let name = class.name();

        let real = first.real.channel(0);
        let gen = first.generated[0].channel(0);
        let t: Vec<f64> = (0..real.len()).map(|i| i as f64 / fs).collect();
        let png = dir.join(format!("time_overlay_{name}.png"));
        write_csv(
            &png.with_extension("csv"),
            &["t_s", "real", "generated"],
            (0..t.len()).map(|i| vec![fmt(t[i]), fmt(real[i]), fmt(gen[i])]),
        )?;
        line_plot(&png, &t, real, gen)?;
        written.push(png);

        let real_sets: Vec<&[f64]> = members.iter().map(|p| p.real.channel(0)).collect();
        let gen_sets: Vec<&[f64]> = members
            .iter()
            .flat_map(|p| p.generated.iter().map(|g| g.channel(0)))
            .collect();
        let rs = amplitude_range_stats(&real_sets)?;
        let gs = amplitude_range_stats(&gen_sets)?;
        let png = dir.join(format!("range_{name}.png"));
        write_csv(
            &png.with_extension("csv"),
            &["series", "min", "p5", "p25", "p75", "p95", "max"],
            [("real", rs), ("generated", gs)].into_iter().map(|(k, s)| {
                vec![k.to_string(), fmt(s.min), fmt(s.p5), fmt(s.p25), fmt(s.p75), fmt(s.p95), fmt(s.max)]
            }),
        )?;
        range_plot(&png, &[(rs, REAL), (gs, GENERATED)])?;
        written.push(png);

        let (freqs, real_mag) = mean_spectrum(real_sets.iter().copied(), fs)?;
        let (_, gen_mag) = mean_spectrum(gen_sets.iter().copied(), fs)?;
        let png = dir.join(format!("spectrum_{name}.png"));
        write_csv(
            &png.with_extension("csv"),
            &["freq_hz", "real", "generated"],
            (0..freqs.len()).map(|i| vec![fmt(freqs[i]), fmt(real_mag[i]), fmt(gen_mag[i])]),
        )?;
        line_plot(&png, &freqs, &real_mag, &gen_mag)?;
        written.push(png);
    }
    Ok(written)
}
