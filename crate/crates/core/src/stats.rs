//! Pearson chi-squared test on 2×2 tables of false negatives vs true
//! positives, with p-values from the regularized upper incomplete gamma
//! function.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::GroupMetrics;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("contingency cells must be finite and non-negative")]
    NegativeCell,
    #[error("group {0} has no hate cases")]
    Degenerate(String),
    #[error("contingency table has an all-zero row or column")]
    ZeroMarginal,
    #[error("reference group {0:?} not found")]
    MissingReference(String),
    #[error("{0}")]
    Csv(String),
}

/// Which 2×2 table to test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableShape {
    /// Columns (FN, TP) over hate cases only.
    #[default]
    HateCases,
    /// Columns (incorrect, correct) over all scored cases.
    AllCases,
}

/// Rows are (reference, compared group).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContingencyTable {
    pub cells: [[f64; 2]; 2],
}

impl ContingencyTable {
    pub fn new(cells: [[f64; 2]; 2]) -> Result<Self, StatsError> {
        if cells.iter().flatten().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(StatsError::NegativeCell);
        }
        Ok(Self { cells })
    }

    pub fn row_sums(&self) -> [f64; 2] {
        [self.cells[0][0] + self.cells[0][1], self.cells[1][0] + self.cells[1][1]]
    }

    pub fn col_sums(&self) -> [f64; 2] {
        [self.cells[0][0] + self.cells[1][0], self.cells[0][1] + self.cells[1][1]]
    }

    pub fn swapped(&self) -> Self {
        Self {
            cells: [self.cells[1], self.cells[0]],
        }
    }
}

fn table_row(m: &GroupMetrics, shape: TableShape) -> Result<[f64; 2], StatsError> {
    let c = &m.counts;
    let row = match shape {
        TableShape::HateCases => [c.fn_ as f64, c.tp as f64],
        TableShape::AllCases => [(c.fn_ + c.fp) as f64, (c.tp + c.tn) as f64],
    };
    if row[0] + row[1] == 0.0 {
        return Err(StatsError::Degenerate(m.key.display_name()));
    }
    Ok(row)
}

pub fn build_contingency(baseline: &GroupMetrics, group: &GroupMetrics) -> Result<ContingencyTable, StatsError> {
    build_contingency_with(baseline, group, TableShape::HateCases)
}

pub fn build_contingency_with(
    reference: &GroupMetrics,
    group: &GroupMetrics,
    shape: TableShape,
) -> Result<ContingencyTable, StatsError> {
    ContingencyTable::new([table_row(reference, shape)?, table_row(group, shape)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
    /// log10 of the p-value, finite even where `p_value` underflows to 0.
    pub log10_p: f64,
}

/// Pearson's statistic for a 2×2 table, optionally with Yates' correction,
/// and its upper-tail probability at one degree of freedom.
pub fn chi_square(table: &ContingencyTable, yates: bool) -> Result<ChiSquareResult, StatsError> {
    let [r1, r2] = table.row_sums();
    let [c1, c2] = table.col_sums();
    if r1 == 0.0 || r2 == 0.0 || c1 == 0.0 || c2 == 0.0 {
        return Err(StatsError::ZeroMarginal);
    }
    let n = r1 + r2;
    let [[a, b], [c, d]] = table.cells;
    let mut diff = (a * d - b * c).abs();
    if yates {
        diff = (diff - n / 2.0).max(0.0);
    }
    // n (ad - bc)^2 / (r1 r2 c1 c2), arranged to avoid overflow
    let statistic = n * (diff / (r1 * c1)) * (diff / (r2 * c2));
    let ln_p = ln_chi_square_sf(statistic, 1.0);
    Ok(ChiSquareResult {
        statistic,
        df: 1,
        p_value: ln_p.exp(),
        log10_p: ln_p / std::f64::consts::LN_10,
    })
}

/// ln of the chi-squared survival function with `df` degrees of freedom.
pub fn ln_chi_square_sf(statistic: f64, df: f64) -> f64 {
    ln_gamma_q(df / 2.0, statistic / 2.0)
}

pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    ln_chi_square_sf(statistic, df).exp()
}

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos approximation, reflection below 0.5).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const MAX_ITER: usize = 10_000;

/// ln Q(a, x), the regularized upper incomplete gamma function.
/// Series for P when x < a + 1, Lentz continued fraction for Q otherwise.
pub fn ln_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    let ln_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        let p = sum * ln_prefix.exp();
        (-p).ln_1p()
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        ln_prefix + h.ln()
    }
}

pub fn gamma_q(a: f64, x: f64) -> f64 {
    ln_gamma_q(a, x).exp()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The persona-free baseline group.
    #[default]
    Baseline,
    /// The compared group with the lowest FNR.
    LowestFnr,
    /// A named persona country.
    Country(String),
}

impl std::str::FromStr for Reference {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "baseline" => Reference::Baseline,
            "lowest-fnr" | "lowest_fnr" => Reference::LowestFnr,
            other => Reference::Country(other.to_string()),
        })
    }
}

/// Resolve the reference group against which `groups` are tested.
pub fn select_reference<'a>(
    baseline: Option<&'a GroupMetrics>,
    groups: &'a [GroupMetrics],
    reference: &Reference,
) -> Result<&'a GroupMetrics, StatsError> {
    match reference {
        Reference::Baseline => baseline.ok_or_else(|| StatsError::MissingReference("baseline".into())),
        Reference::LowestFnr => groups
            .iter()
            .filter(|g| g.fnr.is_some())
            .min_by(|a, b| a.fnr.partial_cmp(&b.fnr).expect("finite fnr"))
            .ok_or_else(|| StatsError::MissingReference("lowest-fnr".into())),
        Reference::Country(name) => groups
            .iter()
            .find(|g| g.key.country.as_deref() == Some(name))
            .ok_or_else(|| StatsError::MissingReference(name.clone())),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    #[serde(default)]
    pub yates: bool,
    #[serde(default)]
    pub shape: TableShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub model_id: String,
    pub variant: Option<crate::prompts::PromptVariant>,
    pub group: String,
    pub reference: String,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fnr: Option<f64>,
    pub statistic: f64,
    pub p_value: f64,
    pub log10_p: f64,
    pub alpha: f64,
    pub significant: bool,
}

/// Test every group against `reference`; one row per group, in input order.
pub fn significance_table(
    reference: &GroupMetrics,
    groups: &[GroupMetrics],
    alpha_level: f64,
    opts: TestOptions,
) -> Result<Vec<SignificanceRow>, StatsError> {
    groups
        .iter()
        .map(|g| {
            let table = build_contingency_with(reference, g, opts.shape)?;
            let r = chi_square(&table, opts.yates)?;
            Ok(SignificanceRow {
                model_id: g.key.model_id.clone(),
                variant: g.key.variant,
                group: g.key.display_name(),
                reference: reference.key.display_name(),
                fn_: g.counts.fn_,
                fnr: g.fnr,
                statistic: r.statistic,
                p_value: r.p_value,
                log10_p: r.log10_p,
                alpha: alpha_level,
                significant: r.p_value < alpha_level,
            })
        })
        .collect()
}

pub fn write_significance(path: &Path, rows: &[SignificanceRow]) -> Result<(), StatsError> {
    crate::table::write_csv(path, rows).map_err(|e| StatsError::Csv(format!("{}: {e}", path.display())))
}

pub fn read_significance(path: &Path) -> Result<Vec<SignificanceRow>, StatsError> {
    crate::table::read_csv(path).map_err(|e| StatsError::Csv(format!("{}: {e}", path.display())))
}
