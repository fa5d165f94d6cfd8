//! Significance of per-country false-negative rates against the baseline.
//!
//!     cargo run --example chi_square_table

use persona_bias::metrics::{ConfusionCounts, GroupKey, GroupMetrics};
use persona_bias::prompts::PromptVariant;
use persona_bias::stats::{chi_square_sf, significance_table, TestOptions};
use persona_bias::table::{p_value, percent, render_aligned, Align};

fn group(country: Option<&str>, tp: u64, fn_: u64) -> GroupMetrics {
    let key = GroupKey {
        model_id: "example".into(),
        variant: Some(if country.is_some() { PromptVariant::Country } else { PromptVariant::Baseline }),
        country: country.map(str::to_string),
        language: None,
    };
    GroupMetrics::from_counts(key, ConfusionCounts::new(tp, 120, 2500, fn_))
}

fn main() -> anyhow::Result<()> {
    println!("P(chi2_1 > 3.841459) = {:.6}\n", chi_square_sf(3.841459, 1.0));

    let baseline = group(None, 890, 426);
    let countries = [
        group(Some("Afghanistan"), 429, 858),
        group(Some("Nigeria"), 880, 436),
        group(Some("Qatar"), 560, 756),
    ];
    let rows = significance_table(&baseline, &countries, 0.05, TestOptions::default())?;
    let mut cells = vec![vec!["baseline".into(), "426".into(), percent(baseline.fnr.unwrap()), "-".into(), "".into()]];
    for r in &rows {
        cells.push(vec![
            r.group.clone(),
            r.fn_.to_string(),
            percent(r.fnr.unwrap()),
            p_value(r.p_value, r.log10_p),
            if r.significant { "*".into() } else { "".into() },
        ]);
    }
    print!(
        "{}",
        render_aligned(
            &["Country", "FN", "FNR", "p-value", ""],
            &[Align::Left, Align::Right, Align::Right, Align::Right, Align::Left],
            &cells
        )
    );
    Ok(())
}
