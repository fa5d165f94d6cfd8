//! The consistency-penalised loss, its gradient, and the exported files a
//! training script consumes.
//!
//!     cargo run --example debias_loss

use persona_bias::corpus::{debias_subset, default_roster, Label, LabeledPost};
use persona_bias::debias::{
    debias_loss, debias_loss_gradient, export_training_pairs, golden_vectors, write_golden_vectors, LanguageMode,
    LossInputs,
};

fn main() -> anyhow::Result<()> {
    let ln3 = 3f64.ln();
    let inputs = LossInputs::new([ln3, 0.0], [0.0, ln3], Label::Hate, 0.5);
    let out = debias_loss(&inputs)?;
    println!(
        "plain CE {:.6}  context CE {:.6}  mean {:.6}  penalty {}  loss {:.6}",
        out.l_class, out.l_class_c, out.l_avg, out.penalty_applied, out.loss
    );
    let (gp, gc) = debias_loss_gradient(&inputs)?;
    println!("d/d plain {gp:.4?}  d/d context {gc:.4?}");

    let dir = tempfile::tempdir()?;
    let train: Vec<_> = (0..10)
        .map(|i| LabeledPost::new(format!("t{i}"), format!("training post {i}"), if i % 2 == 0 { Label::Hate } else { Label::Neutral }))
        .collect();
    let countries = debias_subset(&default_roster());
    let pairs = dir.path().join("training_pairs.jsonl");
    let n = export_training_pairs(&train, &countries, LanguageMode::English, &pairs)?;
    println!("\n{n} training pairs; first:\n{}", std::fs::read_to_string(&pairs)?.lines().next().unwrap_or(""));

    let golden = golden_vectors(1.0, 16, 42)?;
    write_golden_vectors(&dir.path().join("golden_vectors.jsonl"), &golden)?;
    println!("\n{} golden vectors written", golden.len());
    Ok(())
}
