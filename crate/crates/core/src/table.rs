//! CSV helpers and plain-text aligned tables.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Align {
    Left,
    Right,
}

/// Render rows under a header with space-padded columns and a rule line.
pub fn render_aligned(header: &[&str], align: &[Align], rows: &[Vec<String>]) -> String {
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain(std::iter::once(header[i].chars().count()))
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pad = widths[i] - c.chars().count();
                match align[i] {
                    Align::Left => format!("{c}{}", " ".repeat(pad)),
                    Align::Right => format!("{}{c}", " ".repeat(pad)),
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len().saturating_sub(1))));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Percentage with two decimals, e.g. `32.37%`.
pub fn percent(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

/// p-value in the `2.78e-65` style; values that underflowed are shown from
/// their log10.
pub fn p_value(p: f64, log10_p: f64) -> String {
    if p > 0.0 {
        format!("{p:.2e}")
    } else {
        let exp = log10_p.floor();
        let mantissa = 10f64.powf(log10_p - exp);
        format!("{mantissa:.2}e{exp}")
    }
}
