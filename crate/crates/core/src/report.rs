//! Report rendering. Everything here reads finished metrics and significance
//! rows; nothing is recomputed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{GroupMetrics, Grouping, MetricsRow};
use crate::modelio::{BatchSummary, GenerationParams};
use crate::prompts::PromptVariant;
use crate::stats::SignificanceRow;
use crate::table::{p_value, percent, render_aligned, Align};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub country: String,
    pub variant: PromptVariant,
    pub model_id: String,
    pub fnr: Option<f64>,
}

fn persona_free(v: PromptVariant) -> PromptVariant {
    match v {
        PromptVariant::Baseline | PromptVariant::Country => PromptVariant::Baseline,
        PromptVariant::Lang | PromptVariant::CountryLang => PromptVariant::Lang,
    }
}

/// Per-country FNR rows. Within each (model, language setting) block the
/// persona-free reference row comes first, then countries by name.
pub fn fnr_plot_rows(metrics: &[GroupMetrics]) -> Vec<PlotRow> {
    let mut rows: Vec<(String, PromptVariant, bool, PlotRow)> = metrics
        .iter()
        .filter_map(|m| {
            let variant = m.key.variant?;
            let is_ref = !variant.has_persona();
            if !is_ref && m.key.country.is_none() {
                return None;
            }
            Some((
                m.key.model_id.clone(),
                persona_free(variant),
                !is_ref,
                PlotRow {
                    country: m.key.display_name(),
                    variant,
                    model_id: m.key.model_id.clone(),
                    fnr: m.fnr,
                },
            ))
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.0, a.1, a.2, &a.3.country).cmp(&(&b.0, b.1, b.2, &b.3.country))
    });
    rows.into_iter().map(|r| r.3).collect()
}

/// Write the plot rows as CSV; returns the row count.
pub fn render_fnr_plotdata(metrics: &[GroupMetrics], path: &Path) -> Result<usize, csv::Error> {
    let rows = fnr_plot_rows(metrics);
    crate::table::write_csv(path, &rows)?;
    Ok(rows.len())
}

/// Rows of the metrics file for one grouping, as `GroupMetrics`.
pub fn metrics_for(rows: &[MetricsRow], grouping: Grouping) -> Vec<GroupMetrics> {
    rows.iter()
        .filter(|r| r.grouping == grouping)
        .map(MetricsRow::metrics)
        .collect()
}

fn fnr_cell(fnr: Option<f64>) -> String {
    fnr.map(percent).unwrap_or_else(|| "n/a".into())
}

/// FN / FNR / p-value per country, one block per (model, variant), with the
/// reference group on top.
pub fn fnr_table(by_country: &[GroupMetrics], significance: &[SignificanceRow]) -> String {
    let mut out = String::new();
    let mut blocks: Vec<(String, PromptVariant)> = significance
        .iter()
        .filter_map(|s| Some((s.model_id.clone(), s.variant?)))
        .collect();
    blocks.dedup();
    for (model, variant) in blocks {
        let sig: Vec<&SignificanceRow> = significance
            .iter()
            .filter(|s| s.model_id == model && s.variant == Some(variant))
            .collect();
        let reference = sig[0].reference.as_str();
        let mut rows = Vec::new();
        if let Some(r) = by_country
            .iter()
            .find(|m| m.key.model_id == model && m.key.display_name() == reference)
        {
            rows.push(vec![reference.to_string(), r.counts.fn_.to_string(), fnr_cell(r.fnr), "-".into()]);
        }
        for s in sig {
            let mark = if s.significant { "*" } else { "" };
            rows.push(vec![
                s.group.clone(),
                s.fn_.to_string(),
                fnr_cell(s.fnr),
                format!("{}{mark}", p_value(s.p_value, s.log10_p)),
            ]);
        }
        out.push_str(&format!("{model} / {variant}\n"));
        out.push_str(&render_aligned(
            &["Country", "FN", "FNR", "p-value"],
            &[Align::Left, Align::Right, Align::Right, Align::Right],
            &rows,
        ));
        out.push('\n');
    }
    out
}

/// F1 scores per model and variant.
pub fn f1_table(by_variant: &[GroupMetrics]) -> String {
    let rows: Vec<Vec<String>> = by_variant
        .iter()
        .map(|m| {
            vec![
                m.key.model_id.clone(),
                m.key.display_name(),
                format!("{:.4}", m.f1_hate),
                format!("{:.4}", m.f1_macro),
                format!("{:.4}", m.f1_micro),
                format!("{:.4}", m.f1_weighted),
                m.counts.invalid.to_string(),
            ]
        })
        .collect();
    render_aligned(
        &["Model", "Variant", "F1", "F1-macro", "F1-micro", "F1-weighted", "Invalid"],
        &[Align::Left, Align::Left, Align::Right, Align::Right, Align::Right, Align::Right, Align::Right],
        &rows,
    )
}

/// Written next to the results file by `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub model_id: String,
    pub backend: String,
    pub params: GenerationParams,
    /// `None` for backends without the notion (the mock).
    pub top_k_sent: Option<bool>,
    pub debias_alpha: f64,
    pub manifest_rows: usize,
    pub summary: BatchSummary,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ConfusionCounts, GroupKey};
    use crate::stats::{significance_table, TestOptions};

    fn group(variant: PromptVariant, country: Option<&str>, tp: u64, fn_: u64) -> GroupMetrics {
        GroupMetrics::from_counts(
            GroupKey {
                model_id: "m".into(),
                variant: Some(variant),
                country: country.map(str::to_string),
                language: None,
            },
            ConfusionCounts::new(tp, 100, 900, fn_),
        )
    }

    fn fixture() -> Vec<GroupMetrics> {
        let roster = crate::corpus::default_roster();
        let mut v: Vec<_> = roster
            .iter()
            .rev()
            .map(|c| group(PromptVariant::Country, Some(&c.name), 800, 516))
            .collect();
        v.push(group(PromptVariant::Baseline, None, 890, 426));
        v
    }

    #[test]
    fn plot_rows_reference_first_then_sorted() {
        let rows = fnr_plot_rows(&fixture());
        assert_eq!(rows.len(), 13);
        assert_eq!(rows[0].country, "baseline");
        assert_eq!(percent(rows[0].fnr.unwrap()), "32.37%");
        let names: Vec<_> = rows[1..].iter().map(|r| r.country.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(fnr_plot_rows(&fixture()), rows);
    }

    #[test]
    fn plot_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        assert_eq!(render_fnr_plotdata(&fixture(), &path).unwrap(), 13);
        let back: Vec<PlotRow> = crate::table::read_csv(&path).unwrap();
        assert_eq!(back, fnr_plot_rows(&fixture()));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("country,variant,model_id,fnr\nbaseline,baseline,m,0.3237"));
    }

    #[test]
    fn fnr_table_layout() {
        let metrics = fixture();
        let (base, rest) = metrics.split_last().unwrap();
        let sig = significance_table(base, rest, 0.05, TestOptions::default()).unwrap();
        let t = fnr_table(&metrics, &sig);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "m / country");
        assert!(lines[1].starts_with("Country") && lines[1].ends_with("p-value"));
        assert!(lines[3].starts_with("baseline") && lines[3].contains("426") && lines[3].contains("32.37%"));
        assert!(lines[3].ends_with('-'));
        assert!(lines[4].ends_with('*'));
        assert_eq!(lines.iter().filter(|l| l.contains('%')).count(), 13);
    }

    #[test]
    fn f1_table_columns() {
        let t = f1_table(&[group(PromptVariant::Baseline, None, 890, 426)]);
        assert!(t.lines().next().unwrap().contains("F1-macro"));
        assert!(t.lines().nth(2).unwrap().starts_with("m      baseline"));
    }
}
