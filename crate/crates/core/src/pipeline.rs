//! The six pipeline stages behind the command-line tool. Each stage reads
//! its inputs from and writes its outputs to the run directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use thiserror::Error;

use crate::config::LoadedConfig;
use crate::corpus::{
    attach_translations, debias_subset, default_roster, load_corpus, load_roster, split_corpus,
    translation_language, validate_roster, write_corpus, CorpusFormat, CountryEntry, Label, LabeledPost,
};
use crate::debias::{golden_vectors, training_pairs, write_golden_vectors};
use crate::metrics::{score_all, write_metrics, read_metrics, Grouping, MetricsRow};
use crate::modelio::{read_results, run_batch, BatchOptions, BatchSummary};
use crate::normalize::{apply_verdicts, Lexicon, VerdictCounts};
use crate::prompts::{read_manifest, write_manifest, PromptBuilder, PromptVariant};
use crate::report::{f1_table, fnr_table, metrics_for, render_fnr_plotdata, RunMetadata};
use crate::stats::{read_significance, select_reference, significance_table, write_significance, TestOptions};

/// A required input does not exist. The command-line tool exits 1 on it.
#[derive(Debug, Error)]
#[error("missing input file: {}", .0.display())]
pub struct MissingInput(pub PathBuf);

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const TRAIN: &str = "train.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const MANIFEST: &str = "manifest.jsonl";
    pub const RESULTS: &str = "results.jsonl";
    pub const RUN_META: &str = "run_meta.json";
    pub const METRICS: &str = "metrics.csv";
    pub const VERDICTS: &str = "verdicts.json";
    pub const SIGNIFICANCE: &str = "significance.csv";
    pub const PAIRS: &str = "training_pairs.jsonl";
    pub const GOLDEN: &str = "golden_vectors.jsonl";
    pub const PLOT: &str = "fnr_plot.csv";
    pub const FNR_TABLE: &str = "fnr_table.txt";
    pub const F1_TABLE: &str = "f1_table.txt";
}

pub struct Run {
    pub cfg: LoadedConfig,
    pub dir: PathBuf,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

impl Run {
    pub fn open(config_path: &Path) -> Result<Self> {
        require(config_path)?;
        let cfg = crate::config::RunConfig::load(config_path)?;
        let dir = cfg.run_dir()?;
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        require(&p)?;
        Ok(p)
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let archived = self.path(files::CONFIG);
        if !archived.exists() {
            std::fs::write(&archived, self.cfg.config.to_toml()?)?;
        }
        Ok(())
    }

    pub fn roster(&self) -> Result<Vec<CountryEntry>> {
        match &self.cfg.config.roster {
            Some(p) => {
                let p = self.cfg.resolve(p);
                require(&p)?;
                Ok(load_roster(&p)?)
            }
            None => {
                let r = default_roster();
                validate_roster(&r)?;
                Ok(r)
            }
        }
    }

    fn gold(&self) -> Result<HashMap<String, Label>> {
        let test: Vec<LabeledPost> = crate::io::read_jsonl(&self.input(files::TEST)?)?;
        Ok(test.into_iter().map(|p| (p.id, p.label)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareSummary {
    pub train: usize,
    pub test: usize,
    pub manifest: usize,
}

pub fn prepare(run: &Run) -> Result<PrepareSummary> {
    let c = &run.cfg.config;
    let corpus_path = run.cfg.resolve(&c.corpus);
    require(&corpus_path)?;
    let format = c.corpus_format.unwrap_or_else(|| CorpusFormat::from_path(&corpus_path));
    let mut corpus = load_corpus(&corpus_path, format)?;
    for t in &c.translations {
        let p = run.cfg.resolve(t);
        require(&p)?;
        let Some(lang) = translation_language(&p)? else {
            bail!("{}: cannot tell the language; add a {{\"language\": ..}} header line", p.display());
        };
        let rep = attach_translations(&mut corpus, &lang, &p)?;
        info!("{lang}: attached {} translations, {} missing", rep.attached, rep.missing.len());
        if !rep.unknown_ids.is_empty() {
            warn!("{}: {} ids not in the corpus", p.display(), rep.unknown_ids.len());
        }
    }
    let roster = run.roster()?;
    let (train, test) = split_corpus(&corpus, c.split())?;
    let manifest = PromptBuilder::new(&roster)
        .with_template(c.template)
        .with_author_persona(c.include_author_persona)
        .expand(&test, &roster, &c.prompt_variants())?;
    run.ensure_dir()?;
    write_corpus(&run.path(files::TRAIN), &train)?;
    write_corpus(&run.path(files::TEST), &test)?;
    write_manifest(&run.path(files::MANIFEST), &manifest)?;
    Ok(PrepareSummary {
        train: train.len(),
        test: test.len(),
        manifest: manifest.len(),
    })
}

pub fn run_generation(run: &Run, cancel: Option<Arc<AtomicBool>>) -> Result<BatchSummary> {
    let c = &run.cfg.config;
    let manifest = read_manifest(&run.input(files::MANIFEST)?)?;
    let gold = run.gold()?;
    let backend = c.backend.open(Some(&gold))?;
    let opts = BatchOptions {
        cancel,
        ..BatchOptions::from_spec(&c.backend)
    };
    let summary = run_batch(backend.as_ref(), &manifest, &c.params, &run.path(files::RESULTS), &opts)?;
    let meta = RunMetadata {
        config_hash: c.hash()?,
        model_id: c.backend.model_id.clone(),
        backend: format!("{:?}", c.backend.kind).to_lowercase(),
        params: c.params,
        top_k_sent: backend.top_k_sent(),
        debias_alpha: c.debias.alpha,
        manifest_rows: manifest.len(),
        summary,
    };
    std::fs::write(run.path(files::RUN_META), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(summary)
}

pub fn score(run: &Run) -> Result<VerdictCounts> {
    let c = &run.cfg.config;
    let mut records = read_results(&run.input(files::RESULTS)?)?;
    let lexicon = match &c.lexicon {
        Some(p) => {
            let p = run.cfg.resolve(p);
            require(&p)?;
            Lexicon::from_file(&p)?
        }
        None => Lexicon::default(),
    };
    let counts = apply_verdicts(&mut records, &lexicon);
    let gold = run.gold()?;
    let mut rows = Vec::new();
    for g in Grouping::ALL {
        for m in score_all(&records, &gold, g, c.scoring)? {
            rows.push(MetricsRow::new(g, &m));
        }
    }
    write_metrics(&run.path(files::METRICS), &rows)?;
    std::fs::write(run.path(files::VERDICTS), serde_json::to_string_pretty(&counts)? + "\n")?;
    Ok(counts)
}

/// Significance of every persona group against the configured reference,
/// per model and language setting. Reads only the metrics file.
pub fn stats(run: &Run) -> Result<usize> {
    let s = &run.cfg.config.stats;
    let rows = read_metrics(&run.input(files::METRICS)?)?;
    let by_country = metrics_for(&rows, Grouping::ByCountry);
    let opts = TestOptions { yates: s.yates, shape: s.shape };
    let mut out = Vec::new();
    let mut models: Vec<&str> = by_country.iter().map(|m| m.key.model_id.as_str()).collect();
    models.sort();
    models.dedup();
    for model in models {
        for (plain, persona) in [
            (PromptVariant::Baseline, PromptVariant::Country),
            (PromptVariant::Lang, PromptVariant::CountryLang),
        ] {
            let of = |v| {
                by_country
                    .iter()
                    .filter(move |m| m.key.model_id == model && m.key.variant == Some(v))
            };
            let groups: Vec<_> = of(persona).filter(|m| m.key.country.is_some()).cloned().collect();
            if groups.is_empty() {
                continue;
            }
            let baseline = of(plain).find(|m| m.key.country.is_none());
            let reference = select_reference(baseline, &groups, &s.reference)?;
            let compared: Vec<_> = groups.iter().filter(|g| g.key != reference.key).cloned().collect();
            out.extend(significance_table(reference, &compared, s.alpha_level, opts)?);
        }
    }
    write_significance(&run.path(files::SIGNIFICANCE), &out)?;
    Ok(out.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportSummary {
    pub pairs: usize,
    pub golden: usize,
}

pub fn export_train(run: &Run) -> Result<ExportSummary> {
    let d = &run.cfg.config.debias;
    let train: Vec<LabeledPost> = crate::io::read_jsonl(&run.input(files::TRAIN)?)?;
    let countries = debias_subset(&run.roster()?);
    let pairs = training_pairs(&train, &countries, d.mode, run.cfg.config.template)?;
    crate::io::write_jsonl(&run.path(files::PAIRS), &pairs)?;
    let golden = golden_vectors(d.alpha, d.golden_random, run.cfg.config.seed)?;
    write_golden_vectors(&run.path(files::GOLDEN), &golden)?;
    Ok(ExportSummary {
        pairs: pairs.len(),
        golden: golden.len(),
    })
}

/// Render plot data and text tables from the metrics and significance files.
pub fn report(run: &Run) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(&run.input(files::METRICS)?)?;
    let sig = read_significance(&run.input(files::SIGNIFICANCE)?)?;
    let by_country = metrics_for(&rows, Grouping::ByCountry);
    let plot = run.path(files::PLOT);
    render_fnr_plotdata(&by_country, &plot)?;
    let fnr = run.path(files::FNR_TABLE);
    std::fs::write(&fnr, fnr_table(&by_country, &sig))?;
    let f1 = run.path(files::F1_TABLE);
    std::fs::write(&f1, f1_table(&metrics_for(&rows, Grouping::ByVariant)))?;
    Ok(vec![plot, fnr, f1])
}
