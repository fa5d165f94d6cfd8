//! Consistency-penalty debias loss and export of paired training data.
//!
//! For a post `x`, its persona-prefixed twin `x_c` and gold label `y`:
//!
//! ```text
//! l_avg = (CE(scores(x), y) + CE(scores(x_c), y)) / 2
//! loss  = l_avg + alpha * l_avg   if the penalty is active
//!       = l_avg                   otherwise
//! ```
//!
//! The penalty is active when the plain prediction is correct and the
//! context prediction is not, or when either prediction is invalid. The gate
//! is treated as a constant: it scales the gradient but has none of its own.
//!
//! Scores are over the two label classes, hate at index 0 and neutral at 1.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CountryEntry, Label, LabeledPost};
use crate::prompts::{render_body, PersonaTemplate, SOURCE_LANGUAGE};

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("score vector contains a non-finite value")]
    NonFinite,
    #[error("alpha must be finite and non-negative, got {0}")]
    BadAlpha(f64),
    #[error("post {post_id} has no {language} translation")]
    MissingTranslation { post_id: String, language: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Scores = [f64; 2];

pub fn class_index(label: Label) -> usize {
    match label {
        Label::Hate => 0,
        Label::Neutral => 1,
    }
}

pub fn class_label(index: usize) -> Label {
    if index == 0 {
        Label::Hate
    } else {
        Label::Neutral
    }
}

/// Max-shifted softmax.
pub fn softmax(scores: &Scores) -> Scores {
    let m = scores[0].max(scores[1]);
    let e = [(scores[0] - m).exp(), (scores[1] - m).exp()];
    let z = e[0] + e[1];
    [e[0] / z, e[1] / z]
}

/// −log softmax(scores)[gold], via log-sum-exp.
pub fn cross_entropy(scores: &Scores, gold: Label) -> Result<f64, LossError> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let m = scores[0].max(scores[1]);
    let lse = m + ((scores[0] - m).exp() + (scores[1] - m).exp()).ln();
    Ok((lse - scores[class_index(gold)]).max(0.0))
}

/// Argmax label, ties to hate; `None` when the prediction was flagged invalid.
pub fn predict(scores: &Scores, valid: bool) -> Option<Label> {
    if !valid {
        return None;
    }
    Some(if scores[0] >= scores[1] { Label::Hate } else { Label::Neutral })
}

pub fn penalty_active(pred_plain: Option<Label>, pred_context: Option<Label>, gold: Label) -> bool {
    match (pred_plain, pred_context) {
        (None, _) | (_, None) => true,
        (Some(p), Some(c)) => p == gold && c != gold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossInputs {
    pub scores_plain: Scores,
    pub scores_context: Scores,
    pub gold: Label,
    pub alpha: f64,
    pub valid_plain: bool,
    pub valid_context: bool,
}

impl LossInputs {
    pub fn new(scores_plain: Scores, scores_context: Scores, gold: Label, alpha: f64) -> Self {
        Self {
            scores_plain,
            scores_context,
            gold,
            alpha,
            valid_plain: true,
            valid_context: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub loss: f64,
    pub l_class: f64,
    pub l_class_c: f64,
    pub l_avg: f64,
    pub penalty_applied: bool,
}

pub fn debias_loss(inputs: &LossInputs) -> Result<LossOutput, LossError> {
    if !(inputs.alpha >= 0.0 && inputs.alpha.is_finite()) {
        return Err(LossError::BadAlpha(inputs.alpha));
    }
    let l_class = cross_entropy(&inputs.scores_plain, inputs.gold)?;
    let l_class_c = cross_entropy(&inputs.scores_context, inputs.gold)?;
    let l_avg = (l_class + l_class_c) / 2.0;
    let penalty_applied = penalty_active(
        predict(&inputs.scores_plain, inputs.valid_plain),
        predict(&inputs.scores_context, inputs.valid_context),
        inputs.gold,
    );
    let loss = if penalty_applied {
        l_avg + inputs.alpha * l_avg
    } else {
        l_avg
    };
    Ok(LossOutput {
        loss,
        l_class,
        l_class_c,
        l_avg,
        penalty_applied,
    })
}

/// Analytic gradient of [`debias_loss`] with respect to (plain, context) scores.
pub fn debias_loss_gradient(inputs: &LossInputs) -> Result<(Scores, Scores), LossError> {
    let out = debias_loss(inputs)?;
    let scale = if out.penalty_applied { 1.0 + inputs.alpha } else { 1.0 } / 2.0;
    let g = class_index(inputs.gold);
    let grad = |scores: &Scores| {
        let p = softmax(scores);
        let mut d = [scale * p[0], scale * p[1]];
        d[g] -= scale;
        d
    };
    Ok((grad(&inputs.scores_plain), grad(&inputs.scores_context)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageMode {
    English,
    Multilingual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub post_id: String,
    pub text_plain: String,
    pub text_context: String,
    pub gold: Label,
    pub country: String,
    pub language_code: String,
}

/// One pair per (post, country) in post order then roster order. In
/// multilingual mode the message is the country-language translation.
pub fn training_pairs(
    train: &[LabeledPost],
    countries: &[CountryEntry],
    mode: LanguageMode,
    template: PersonaTemplate,
) -> Result<Vec<TrainingPair>, LossError> {
    let mut out = Vec::with_capacity(train.len() * countries.len());
    for post in train {
        for country in countries {
            let language = match mode {
                LanguageMode::English => SOURCE_LANGUAGE,
                LanguageMode::Multilingual => country.language_code.as_str(),
            };
            let message = if language == SOURCE_LANGUAGE {
                post.text.as_str()
            } else {
                post.translation(language).ok_or_else(|| LossError::MissingTranslation {
                    post_id: post.id.clone(),
                    language: language.to_string(),
                })?
            };
            let text_plain = render_body(message);
            let text_context = format!("{} {text_plain}", template.render(&country.name));
            out.push(TrainingPair {
                post_id: post.id.clone(),
                text_plain,
                text_context,
                gold: post.label,
                country: country.name.clone(),
                language_code: language.to_string(),
            });
        }
    }
    Ok(out)
}

/// Write the training-pair file for the debias subset; returns the pair count.
pub fn export_training_pairs(
    train: &[LabeledPost],
    debias_countries: &[CountryEntry],
    mode: LanguageMode,
    path: &Path,
) -> Result<usize, LossError> {
    let pairs = training_pairs(train, debias_countries, mode, PersonaTemplate::default())?;
    crate::io::write_jsonl(path, &pairs)?;
    Ok(pairs.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenVector {
    pub scores_plain: Scores,
    pub scores_context: Scores,
    pub gold: Label,
    pub alpha: f64,
    pub valid_plain: bool,
    pub valid_context: bool,
    pub expected: LossOutput,
}

impl GoldenVector {
    pub fn inputs(&self) -> LossInputs {
        LossInputs {
            scores_plain: self.scores_plain,
            scores_context: self.scores_context,
            gold: self.gold,
            alpha: self.alpha,
            valid_plain: self.valid_plain,
            valid_context: self.valid_context,
        }
    }
}

/// Canonical parity set: hand-picked corner cases followed by a seeded sweep
/// over scores, labels, validity flags and alpha (including `alpha`).
pub fn golden_vectors(alpha: f64, random: usize, seed: u64) -> Result<Vec<GoldenVector>, LossError> {
    use rand::{Rng, SeedableRng};
    let ln3 = 3f64.ln();
    let mut inputs = vec![
        LossInputs::new([ln3, 0.0], [0.0, ln3], Label::Hate, 0.5),
        LossInputs::new([2.0, -1.0], [1.5, 0.0], Label::Hate, alpha),
        LossInputs::new([2.0, -1.0], [-1.0, 2.0], Label::Hate, 0.0),
        LossInputs::new([0.5, 0.5], [0.5, 0.5], Label::Neutral, alpha),
        LossInputs::new([1000.0, 0.0], [0.0, 1000.0], Label::Hate, alpha),
        LossInputs::new([-3.0, 3.0], [3.0, -3.0], Label::Neutral, alpha),
        LossInputs {
            valid_context: false,
            ..LossInputs::new([0.0, 4.0], [0.0, 4.0], Label::Neutral, alpha)
        },
        LossInputs {
            valid_plain: false,
            ..LossInputs::new([1.0, 0.0], [1.0, 0.0], Label::Hate, alpha)
        },
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random {
        let mut s = || rng.random_range(-8.0..8.0);
        let plain = [s(), s()];
        let context = [s(), s()];
        let gold = if rng.random_bool(0.5) { Label::Hate } else { Label::Neutral };
        let a = if rng.random_bool(0.2) { alpha } else { rng.random_range(0.0..3.0) };
        inputs.push(LossInputs {
            valid_plain: rng.random_bool(0.9),
            valid_context: rng.random_bool(0.9),
            ..LossInputs::new(plain, context, gold, a)
        });
    }
    inputs
        .into_iter()
        .map(|i| {
            Ok(GoldenVector {
                scores_plain: i.scores_plain,
                scores_context: i.scores_context,
                gold: i.gold,
                alpha: i.alpha,
                valid_plain: i.valid_plain,
                valid_context: i.valid_context,
                expected: debias_loss(&i)?,
            })
        })
        .collect()
}

pub fn write_golden_vectors(path: &Path, vectors: &[GoldenVector]) -> Result<(), LossError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in vectors {
        serde_json::to_writer(&mut w, v).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_roster;

    fn ce_oracle(scores: &Scores, gold: Label) -> f64 {
        // direct softmax, no shifting; only for moderate scores
        let e = [scores[0].exp(), scores[1].exp()];
        -(e[class_index(gold)] / (e[0] + e[1])).ln()
    }

    #[test]
    fn cross_entropy_worked_values() {
        let ln3 = 3f64.ln();
        let ce = cross_entropy(&[ln3, 0.0], Label::Hate).unwrap();
        assert!((ce - 0.287_682).abs() < 1e-6);
        assert!((ce - -(0.75f64).ln()).abs() < 1e-15);
        for t in [-5.0, 0.0, 7.5] {
            for g in [Label::Hate, Label::Neutral] {
                assert!((cross_entropy(&[t, t], g).unwrap() - 2f64.ln()).abs() < 1e-15);
            }
        }
        let big = cross_entropy(&[1000.0, 0.0], Label::Hate).unwrap();
        assert!((0.0..1e-300).contains(&big));
        assert!((cross_entropy(&[1000.0, 0.0], Label::Neutral).unwrap() - 1000.0).abs() < 1e-9);
        assert!(matches!(cross_entropy(&[f64::NAN, 0.0], Label::Hate), Err(LossError::NonFinite)));
        assert!(matches!(cross_entropy(&[f64::INFINITY, 0.0], Label::Hate), Err(LossError::NonFinite)));
    }

    #[test]
    fn predictions() {
        assert_eq!(predict(&[2.0, 1.0], true), Some(Label::Hate));
        assert_eq!(predict(&[1.0, 2.0], true), Some(Label::Neutral));
        assert_eq!(predict(&[2.0, 1.0], false), None);
        assert_eq!(predict(&[0.5, 0.5], true), Some(Label::Hate));
    }

    #[test]
    fn penalty_gate() {
        let y = Label::Hate;
        let n = Label::Neutral;
        assert!(!penalty_active(Some(y), Some(y), y));
        assert!(penalty_active(Some(y), Some(n), y));
        assert!(penalty_active(None, Some(y), y));
        assert!(penalty_active(Some(y), None, y));
        assert!(!penalty_active(Some(n), Some(n), y));
        assert!(!penalty_active(Some(n), Some(y), y));
    }

    #[test]
    fn worked_loss_example() {
        let ln3 = 3f64.ln();
        let out = debias_loss(&LossInputs::new([ln3, 0.0], [0.0, ln3], Label::Hate, 0.5)).unwrap();
        // oracle: softmax (3/4, 1/4) and (1/4, 3/4)
        let l = -(0.75f64).ln();
        let lc = 4f64.ln();
        assert!((out.l_class - l).abs() < 1e-12);
        assert!((out.l_class_c - lc).abs() < 1e-12);
        assert!((out.l_avg - (l + lc) / 2.0).abs() < 1e-12);
        assert!(out.penalty_applied);
        assert!((out.loss - 1.5 * (l + lc) / 2.0).abs() < 1e-12);
        assert!((out.loss - 1.255_482).abs() < 1e-6);
    }

    #[test]
    fn inactive_penalty_and_zero_alpha() {
        let out = debias_loss(&LossInputs::new([3.0, 0.0], [2.0, 1.0], Label::Hate, 5.0)).unwrap();
        assert!(!out.penalty_applied);
        assert_eq!(out.loss, out.l_avg);
        let out = debias_loss(&LossInputs::new([3.0, 0.0], [0.0, 2.0], Label::Hate, 0.0)).unwrap();
        assert!(out.penalty_applied);
        assert_eq!(out.loss, out.l_avg);
        assert!(matches!(
            debias_loss(&LossInputs::new([0.0, 0.0], [0.0, 0.0], Label::Hate, -1.0)),
            Err(LossError::BadAlpha(_))
        ));
    }

    #[test]
    fn swap_keeps_average_but_not_gate() {
        let a = LossInputs::new([3.0, 0.0], [0.0, 2.0], Label::Hate, 1.0);
        let b = LossInputs::new(a.scores_context, a.scores_plain, a.gold, a.alpha);
        let (oa, ob) = (debias_loss(&a).unwrap(), debias_loss(&b).unwrap());
        assert!((oa.l_avg - ob.l_avg).abs() < 1e-15);
        assert!(oa.penalty_applied);
        assert!(!ob.penalty_applied);
    }

    #[test]
    fn pair_counts_and_shape() {
        let roster = default_roster();
        let debias = crate::corpus::debias_subset(&roster);
        let posts: Vec<_> = (0..5)
            .map(|i| LabeledPost::new(format!("p{i}"), format!("t{i}"), Label::Hate))
            .collect();
        let pairs = training_pairs(&posts, &debias, LanguageMode::English, PersonaTemplate::B).unwrap();
        assert_eq!(pairs.len(), 20);
        let p = &pairs[1];
        assert_eq!(p.country, "Brunei");
        assert_eq!(p.text_context, format!("{} {}", crate::prompts::render_persona("Brunei"), p.text_plain));
        assert!(training_pairs(&[], &debias, LanguageMode::English, PersonaTemplate::B).unwrap().is_empty());
    }

    #[test]
    fn multilingual_requires_translation() {
        let debias = crate::corpus::debias_subset(&default_roster());
        let mut post = LabeledPost::new("p", "t", Label::Neutral);
        for (l, t) in [("fa", "f"), ("ms", "m")] {
            post.translations.insert(l.into(), t.into());
        }
        match training_pairs(&[post.clone()], &debias, LanguageMode::Multilingual, PersonaTemplate::B) {
            Err(LossError::MissingTranslation { post_id, language }) => {
                assert_eq!((post_id.as_str(), language.as_str()), ("p", "ar"))
            }
            other => panic!("{other:?}"),
        }
        post.translations.insert("ar".into(), "a".into());
        let pairs = training_pairs(&[post], &debias, LanguageMode::Multilingual, PersonaTemplate::B).unwrap();
        let langs: Vec<_> = pairs.iter().map(|p| p.language_code.as_str()).collect();
        assert_eq!(langs, ["fa", "ms", "ar", "ar"]);
        assert!(pairs[0].text_plain.contains("<Message>f</Message>"));
    }

    #[test]
    fn golden_vectors_are_self_consistent() {
        let vs = golden_vectors(DEFAULT_ALPHA, 50, 1).unwrap();
        assert_eq!(vs.len(), 58);
        assert!(vs.iter().any(|v| v.expected.penalty_applied));
        assert!(vs.iter().any(|v| !v.expected.penalty_applied));
        for v in &vs {
            assert_eq!(debias_loss(&v.inputs()).unwrap(), v.expected);
        }
        assert_eq!(golden_vectors(DEFAULT_ALPHA, 50, 1).unwrap(), vs);
    }

    #[test]
    fn gradient_formula_matches_oracle_ce() {
        let i = LossInputs::new([0.3, -0.2], [1.1, 0.4], Label::Neutral, 0.7);
        let out = debias_loss(&i).unwrap();
        assert!((out.l_class - ce_oracle(&i.scores_plain, i.gold)).abs() < 1e-14);
        let (gp, gc) = debias_loss_gradient(&i).unwrap();
        // gradients of a two-class softmax CE sum to zero
        assert!((gp[0] + gp[1]).abs() < 1e-15 && (gc[0] + gc[1]).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn label() -> impl Strategy<Value = Label> {
            prop_oneof![Just(Label::Hate), Just(Label::Neutral)]
        }

        fn inputs() -> impl Strategy<Value = LossInputs> {
            (
                [-20.0f64..20.0, -20.0f64..20.0],
                [-20.0f64..20.0, -20.0f64..20.0],
                label(),
                0.0f64..5.0,
                prop::bool::weighted(0.9),
                prop::bool::weighted(0.9),
            )
                .prop_map(|(p, c, g, a, vp, vc)| LossInputs {
                    valid_plain: vp,
                    valid_context: vc,
                    ..LossInputs::new(p, c, g, a)
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(10_000))]

            #[test]
            fn loss_law(i in inputs()) {
                let out = debias_loss(&i).unwrap();
                let pp = predict(&i.scores_plain, i.valid_plain);
                let pc = predict(&i.scores_context, i.valid_context);
                let gate = pp.is_none() || pc.is_none() || (pp == Some(i.gold) && pc != Some(i.gold));
                prop_assert_eq!(out.penalty_applied, gate);
                let ind = if gate { 1.0 } else { 0.0 };
                let expected = out.l_avg * (1.0 + i.alpha * ind);
                prop_assert!((out.loss - expected).abs() <= 1e-12 * expected.max(1.0));
                prop_assert!(out.l_class >= 0.0 && out.l_class_c >= 0.0);
                prop_assert!(out.loss >= out.l_avg);
            }
        }

        proptest! {
            #[test]
            fn monotone_in_alpha(i in inputs(), a in 0.0f64..5.0, b in 0.0f64..5.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let l1 = debias_loss(&LossInputs { alpha: lo, ..i }).unwrap().loss;
                let l2 = debias_loss(&LossInputs { alpha: hi, ..i }).unwrap().loss;
                prop_assert!(l1 <= l2);
            }

            #[test]
            fn matches_unshifted_oracle(s in [-30.0f64..30.0, -30.0f64..30.0], g in label()) {
                let ce = cross_entropy(&s, g).unwrap();
                prop_assert!((ce - ce_oracle(&s, g)).abs() < 1e-9);
            }

            #[test]
            fn gradient_matches_finite_differences(i in inputs()) {
                // keep away from the argmax boundary so the gate is locally constant
                prop_assume!((i.scores_plain[0] - i.scores_plain[1]).abs() > 1e-3);
                prop_assume!((i.scores_context[0] - i.scores_context[1]).abs() > 1e-3);
                let (gp, gc) = debias_loss_gradient(&i).unwrap();
                let h = 1e-6;
                for side in 0..2 {
                    for k in 0..2 {
                        let bump = |d: f64| {
                            let mut j = i;
                            let s = if side == 0 { &mut j.scores_plain } else { &mut j.scores_context };
                            s[k] += d;
                            debias_loss(&j).unwrap().loss
                        };
                        let fd = (bump(h) - bump(-h)) / (2.0 * h);
                        let an = if side == 0 { gp[k] } else { gc[k] };
                        prop_assert!((fd - an).abs() < 1e-5, "fd {} analytic {}", fd, an);
                    }
                }
            }
        }
    }
}
