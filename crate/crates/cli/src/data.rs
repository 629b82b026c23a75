//! Treebanks, embeddings and labeled corpora for an experiment.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ortho_probe::corpus::LabeledCorpus;
use ortho_probe::embeddings::{read_embeddings, synthesize_planted, EmbeddingSet, PlantedSpec};
use ortho_probe::synthetic::{synthetic_taxonomy, synthetic_treebank};
use ortho_probe::treebank::{load_taxonomy, parse_conllu, AnnotatedSentence, Taxonomy};
use ortho_probe::{Error, Result};

use crate::config::{ExperimentConfig, SyntheticData};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Labeled train, dev and test corpora of one layer.
pub struct Splits {
    pub train: LabeledCorpus,
    pub dev: LabeledCorpus,
    pub test: LabeledCorpus,
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))
}

pub fn read_treebank(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    parse_conllu(open(path)?)
}

pub fn embeddings_path(template: &str, split: &str, layer: u32) -> PathBuf {
    PathBuf::from(template.replace("{split}", split).replace("{layer}", &layer.to_string()))
}

fn split_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(31).wrapping_add(k as u64)
}

/// Treebank of split `k` under `spec`.
pub fn synthetic_split_treebank(spec: &SyntheticData, k: usize) -> Result<Vec<AnnotatedSentence>> {
    synthetic_treebank(spec.sizes[k], spec.min_len..=spec.max_len, split_seed(spec.seed, k), SPLITS[k])
}

/// Planting recipe of split `k` at `layer`. Each layer has its own hidden
/// rotation and noise.
pub fn planted_spec(spec: &SyntheticData, k: usize, layer: u32, label_seed: u64) -> PlantedSpec {
    PlantedSpec {
        ambient_dim: spec.ambient_dim,
        planted_structures: spec.planted.clone(),
        block_dim: spec.block_dim,
        noise_scale: spec.noise,
        rotation_seed: spec.seed.wrapping_add(layer as u64),
        noise_seed: split_seed(spec.seed, k) ^ ((layer as u64) << 32),
        label_seed,
    }
}

pub fn synthetic_split_embeddings(
    spec: &SyntheticData,
    treebank: &[AnnotatedSentence],
    k: usize,
    layer: u32,
    label_seed: u64,
) -> Result<EmbeddingSet> {
    let mut set = synthesize_planted(treebank, &planted_spec(spec, k, layer, label_seed))?.set;
    set.layer = layer;
    Ok(set)
}

/// Loaded inputs shared by every layer.
pub struct Inputs {
    treebanks: [Vec<AnnotatedSentence>; 3],
    taxonomy: Option<Taxonomy>,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let treebanks = match &cfg.synthetic {
            Some(spec) => [
                synthetic_split_treebank(spec, 0)?,
                synthetic_split_treebank(spec, 1)?,
                synthetic_split_treebank(spec, 2)?,
            ],
            None => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated config");
                [
                    read_treebank(&path(&cfg.train_treebank))?,
                    read_treebank(&path(&cfg.dev_treebank))?,
                    read_treebank(&path(&cfg.test_treebank))?,
                ]
            }
        };
        let taxonomy = match (&cfg.taxonomy, &cfg.synthetic) {
            (Some(p), _) => Some(load_taxonomy(open(p)?)?),
            (None, Some(spec)) => Some(synthetic_taxonomy(spec.seed)?),
            (None, None) => None,
        };
        Ok(Inputs { treebanks, taxonomy })
    }

    pub fn treebank(&self, k: usize) -> &[AnnotatedSentence] {
        &self.treebanks[k]
    }

    /// Labeled corpora of `layer`.
    pub fn splits(&self, cfg: &ExperimentConfig, layer: u32) -> Result<Splits> {
        let structures = cfg.structures();
        let mut corpora = Vec::with_capacity(3);
        for (k, split) in SPLITS.iter().enumerate() {
            let tb = &self.treebanks[k];
            let set = match (&cfg.synthetic, &cfg.embeddings) {
                (Some(spec), _) => synthetic_split_embeddings(spec, tb, k, layer, cfg.label_seed)?,
                (None, Some(template)) => {
                    let path = embeddings_path(template, split, layer);
                    let set = read_embeddings(open(&path)?, Some(tb))?;
                    if set.layer != layer {
                        return Err(Error::Alignment {
                            sentence: path.display().to_string(),
                            reason: format!("file holds layer {}, expected {}", set.layer, layer),
                        });
                    }
                    set
                }
                (None, None) => unreachable!("validated config"),
            };
            corpora.push(LabeledCorpus::build(tb, &set, &structures, self.taxonomy.as_ref(), cfg.label_seed)?);
        }
        let mut it = corpora.into_iter();
        Ok(Splits {
            train: it.next().unwrap(),
            dev: it.next().unwrap(),
            test: it.next().unwrap(),
        })
    }
}
