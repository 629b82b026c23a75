//! The `synth`, `train`, `eval`, `analyze` and `inspect-conllu` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ortho_probe::analysis::{
    dims_row, dims_tsv, histogram_export, overlap_table, select_all, selection_is_stable, select_dimensions,
    DimsRow,
};
use ortho_probe::embeddings::write_embeddings;
use ortho_probe::evaluation::{
    build_report, evaluate_objective, parse_score, CorrelationRecord, EvalReport, ParseRecord, Split,
};
use ortho_probe::probe::ProbeParams;
use ortho_probe::synthetic::synthetic_taxonomy_text;
use ortho_probe::trainer::Mode;
use ortho_probe::treebank::{labels_for, write_conllu, AnnotatedSentence, Taxonomy};
use ortho_probe::{Error, ObjectiveId, Result, Structure, Target};
use serde::Serialize;

use crate::config::{ExperimentConfig, SyntheticData};
use crate::data::{self, Inputs, Splits, SPLITS};
use crate::runs::{
    eval_corpus, load_checkpoint, parallel_map, run_specs, train_run, worker_count, write_atomic, write_json,
    RunSpec, RunSummary, CHECKPOINT_FILE,
};

/// Options of `synth`.
#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub out_dir: PathBuf,
    pub data: SyntheticData,
    pub layers: Vec<u32>,
    pub label_seed: u64,
}

/// Files written by `synth`.
#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub treebanks: Vec<PathBuf>,
    pub embeddings: Vec<PathBuf>,
    pub taxonomy: PathBuf,
    pub config: PathBuf,
}

/// Materializes a synthetic experiment: CoNLL-U treebanks, one OPEMB file
/// per split and layer, a taxonomy and an `experiment.json` reading them.
pub fn synth(opts: &SynthOptions) -> Result<SynthSummary> {
    let probe = ExperimentConfig {
        synthetic: Some(opts.data.clone()),
        embeddings: None,
        ..template_config(opts)
    };
    probe.validate()?;
    let dir = &opts.out_dir;
    let mut treebanks = Vec::new();
    let mut embeddings = Vec::new();
    for (k, split) in SPLITS.iter().enumerate() {
        let tb = data::synthetic_split_treebank(&opts.data, k)?;
        let path = dir.join(format!("{}.conllu", split));
        let mut bytes = Vec::new();
        write_conllu(&tb, &mut bytes)?;
        write_atomic(&path, &bytes)?;
        treebanks.push(path);
        for &layer in &opts.layers {
            let set = data::synthetic_split_embeddings(&opts.data, &tb, k, layer, opts.label_seed)?;
            let path = data::embeddings_path(&dir.join("{split}.L{layer}.opemb").to_string_lossy(), split, layer);
            let mut bytes = Vec::new();
            write_embeddings(&set, &mut bytes)?;
            write_atomic(&path, &bytes)?;
            embeddings.push(path);
        }
    }
    let taxonomy = dir.join("taxonomy.txt");
    write_atomic(&taxonomy, synthetic_taxonomy_text(opts.data.seed).as_bytes())?;
    let config = dir.join("experiment.json");
    write_json(&config, &template_config(opts))?;
    Ok(SynthSummary {
        treebanks,
        embeddings,
        taxonomy,
        config,
    })
}

fn template_config(opts: &SynthOptions) -> ExperimentConfig {
    ExperimentConfig {
        train_treebank: Some("train.conllu".into()),
        dev_treebank: Some("dev.conllu".into()),
        test_treebank: Some("test.conllu".into()),
        embeddings: Some("{split}.L{layer}.opemb".into()),
        synthetic: None,
        taxonomy: Some("taxonomy.txt".into()),
        mode: Mode::A,
        objectives: vec![
            ObjectiveId::new(Structure::Dep, Target::Depth),
            ObjectiveId::new(Structure::Dep, Target::Distance),
        ],
        layers: opts.layers.clone(),
        seeds: vec![0],
        train: Default::default(),
        output_dir: "out".into(),
        label_seed: opts.label_seed,
        epsilon: ortho_probe::analysis::DEFAULT_EPSILON,
    }
}

/// Loads inputs once and the labeled splits of every configured layer.
fn load_layers(cfg: &ExperimentConfig) -> Result<BTreeMap<u32, Splits>> {
    let inputs = Inputs::load(cfg)?;
    cfg.layers
        .iter()
        .map(|&layer| Ok((layer, inputs.splits(cfg, layer)?)))
        .collect()
}

/// Trains every (layer, seed, group) run and writes `train_summary.json`.
pub fn train(cfg: &ExperimentConfig, epoch_budget: Option<usize>) -> Result<Vec<RunSummary>> {
    let layers = load_layers(cfg)?;
    let specs = run_specs(cfg);
    let summaries = parallel_map(&specs, worker_count()?, |spec| {
        let summary = train_run(cfg, spec, &layers[&spec.layer], epoch_budget)?;
        eprintln!(
            "{}: {} epochs, best val loss {:.6}{}",
            summary.run,
            summary.epochs,
            summary.best_val_loss,
            if summary.finished { "" } else { " (paused)" }
        );
        Ok(summary)
    })?;
    write_json(&cfg.output_dir.join("train_summary.json"), &summaries)?;
    Ok(summaries)
}

fn load_run(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<ProbeParams> {
    let ckpt = load_checkpoint(&spec.dir(&cfg.output_dir).join(CHECKPOINT_FILE))?;
    if ckpt.mode != spec.mode {
        return Err(Error::Config(format!(
            "mode: checkpoint of {} was trained in mode {}, config says {}",
            spec.name(),
            ckpt.mode,
            spec.mode
        )));
    }
    Ok(ckpt.params)
}

/// Scores every trained run and writes `report.json`, `correlations.tsv`
/// and `parse.tsv`.
pub fn eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let layers = load_layers(cfg)?;
    let specs = run_specs(cfg);
    let params = parallel_map(&specs, worker_count()?, |spec| load_run(cfg, spec))?;
    let mut correlations = Vec::new();
    let mut parses = Vec::new();
    for &layer in &cfg.layers {
        for &seed in &cfg.seeds {
            let mut dist_probe = None;
            let mut depth_probe = None;
            for (spec, p) in specs.iter().zip(&params) {
                if spec.layer != layer || spec.seed != seed {
                    continue;
                }
                let splits = &layers[&layer];
                for &o in &spec.objectives {
                    correlations.push(CorrelationRecord {
                        layer,
                        seed,
                        objective: o,
                        split: Split::for_structure(o.structure),
                        result: evaluate_objective(p, o, eval_corpus(splits, o))?,
                    });
                    if o == ObjectiveId::new(Structure::Dep, Target::Distance) {
                        dist_probe = Some(p);
                    }
                    if o == ObjectiveId::new(Structure::Dep, Target::Depth) {
                        depth_probe = Some(p);
                    }
                }
            }
            if let Some(d) = dist_probe {
                parses.push(ParseRecord {
                    layer,
                    seed,
                    score: parse_score(d, depth_probe, &layers[&layer].test)?,
                });
            }
        }
    }
    let report = build_report(&correlations, &parses);
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    write_atomic(&cfg.output_dir.join("correlations.tsv"), report.correlations_tsv().as_bytes())?;
    write_atomic(&cfg.output_dir.join("parse.tsv"), report.parse_tsv().as_bytes())?;
    Ok(report)
}

/// Options of `analyze`.
#[derive(Clone, Debug, Default)]
pub struct AnalyzeOptions {
    /// Require overlap tables; fails on runs without a shared `V`.
    pub overlap: bool,
    /// Coordinates per histogram bin.
    pub bin_size: usize,
    /// Thresholds for the selection stability check.
    pub epsilon_sweep: Vec<f64>,
}

/// Per-run analysis outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunAnalysis {
    pub run: String,
    pub dir: PathBuf,
    pub dims: Vec<DimsRow>,
    pub overlap: bool,
    pub stable: Option<bool>,
}

/// Writes `dims.tsv` for every run and, for shared-`V` runs, `overlap.tsv`
/// and `histogram.tsv` under `analysis/<run>/`.
pub fn analyze(cfg: &ExperimentConfig, opts: &AnalyzeOptions) -> Result<Vec<RunAnalysis>> {
    if opts.overlap && !cfg.mode.is_joint() {
        return Err(Error::Config(format!(
            "mode: overlap tables need a shared-V mode (B, C, D or E), experiment uses mode {}",
            cfg.mode
        )));
    }
    if cfg.mode == Mode::II {
        return Err(Error::Config("mode: mode II probes have no scaling vectors to analyze".into()));
    }
    if opts.bin_size == 0 || opts.epsilon_sweep.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("analyze: bin size and sweep thresholds must be positive".into()));
    }
    let layers = load_layers(cfg)?;
    let specs = run_specs(cfg);
    parallel_map(&specs, worker_count()?, |spec| {
        let params = load_run(cfg, spec)?;
        analyze_run(cfg, opts, spec, &params, &layers[&spec.layer])
    })
}

fn analyze_run(
    cfg: &ExperimentConfig,
    opts: &AnalyzeOptions,
    spec: &RunSpec,
    params: &ProbeParams,
    splits: &Splits,
) -> Result<RunAnalysis> {
    let ProbeParams::Orthogonal(p) = params else {
        return Err(Error::Config(format!("mode: {} holds a linear probe", spec.name())));
    };
    let dir = cfg.output_dir.join("analysis").join(spec.name());
    let dims = spec
        .objectives
        .iter()
        .map(|&o| dims_row(params, o, cfg.epsilon, spec.seed, eval_corpus(splits, o)))
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&dir.join("dims.tsv"), dims_tsv(&dims).as_bytes())?;

    let joint = spec.mode.is_joint();
    if joint {
        let table = overlap_table(&select_all(params, cfg.epsilon)?)?;
        write_atomic(&dir.join("overlap.tsv"), table.to_tsv().as_bytes())?;
        let scalers: Vec<(ObjectiveId, &[f64])> = p.scalers.iter().map(|(&o, d)| (o, d.as_slice())).collect();
        let hist = histogram_export(&scalers, cfg.epsilon, opts.bin_size)?;
        write_atomic(&dir.join("histogram.tsv"), hist.to_tsv().as_bytes())?;
    }

    let stable = if opts.epsilon_sweep.is_empty() {
        None
    } else {
        let mut out = String::from("objective\tepsilon\tn_selected\tstable\n");
        let mut all = true;
        for (&o, d) in &p.scalers {
            let stable = selection_is_stable(o, d, &opts.epsilon_sweep)?;
            all &= stable;
            for &eps in &opts.epsilon_sweep {
                let n = select_dimensions(o, d, eps)?.len();
                let _ = writeln!(out, "{}\t{:e}\t{}\t{}", o, eps, n, stable);
            }
        }
        write_atomic(&dir.join("stability.tsv"), out.as_bytes())?;
        Some(all)
    };
    Ok(RunAnalysis {
        run: spec.name(),
        dir,
        dims,
        overlap: joint,
        stable,
    })
}

/// Corpus statistics reported by `inspect-conllu`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreebankStats {
    pub sentences: usize,
    pub tokens: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub mean_length: f64,
    /// Sentences whose length falls in the reported range.
    pub in_report_range: usize,
    pub upos: BTreeMap<String, usize>,
    /// Tokens resolved in the taxonomy, when one is given.
    pub taxonomy_tokens: Option<usize>,
}

pub fn treebank_stats(tb: &[AnnotatedSentence], taxonomy: Option<&Taxonomy>) -> Result<TreebankStats> {
    let lengths: Vec<usize> = tb.iter().map(|s| s.len()).collect();
    let tokens: usize = lengths.iter().sum();
    let mut upos = BTreeMap::new();
    for t in tb.iter().flat_map(|s| &s.tokens) {
        *upos.entry(t.upos.clone()).or_insert(0) += 1;
    }
    let taxonomy_tokens = taxonomy
        .map(|t| -> Result<usize> {
            let mut n = 0;
            for s in tb {
                let labels = labels_for(Structure::Lex, s, Some(t), 0)?;
                n += labels.unmasked_depths();
            }
            Ok(n)
        })
        .transpose()?;
    Ok(TreebankStats {
        sentences: tb.len(),
        tokens,
        min_length: lengths.iter().copied().min().unwrap_or(0),
        max_length: lengths.iter().copied().max().unwrap_or(0),
        mean_length: if tb.is_empty() { 0.0 } else { tokens as f64 / tb.len() as f64 },
        in_report_range: lengths
            .iter()
            .filter(|n| ortho_probe::evaluation::REPORT_LENGTHS.contains(n))
            .count(),
        upos,
        taxonomy_tokens,
    })
}

pub fn inspect_conllu(path: &Path, taxonomy: Option<&Path>) -> Result<TreebankStats> {
    let tb = data::read_treebank(path)?;
    let taxonomy = taxonomy
        .map(|p| ortho_probe::treebank::load_taxonomy(data::open(p)?))
        .transpose()?;
    treebank_stats(&tb, taxonomy.as_ref())
}
