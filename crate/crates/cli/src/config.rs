//! Experiment configuration files.

use std::path::{Path, PathBuf};

use ortho_probe::analysis::DEFAULT_EPSILON;
use ortho_probe::trainer::{Mode, TrainConfig};
use ortho_probe::{Error, ObjectiveId, Result, Structure, Target};
use serde::{Deserialize, Serialize};

/// Recipe for in-memory synthetic data: random dependency trees with the
/// listed structures planted under a hidden rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    /// Sentence counts for train, dev and test.
    pub sizes: [usize; 3],
    pub min_len: usize,
    pub max_len: usize,
    pub ambient_dim: usize,
    pub planted: Vec<Structure>,
    pub block_dim: Option<usize>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            sizes: [300, 50, 50],
            min_len: 5,
            max_len: 20,
            ambient_dim: 64,
            planted: vec![Structure::Dep],
            block_dim: None,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train_treebank: Option<PathBuf>,
    #[serde(default)]
    pub dev_treebank: Option<PathBuf>,
    #[serde(default)]
    pub test_treebank: Option<PathBuf>,
    /// Embedding path template; `{split}` and `{layer}` are substituted.
    #[serde(default)]
    pub embeddings: Option<String>,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    pub mode: Mode,
    /// May be left empty for modes C, D and E.
    #[serde(default)]
    pub objectives: Vec<ObjectiveId>,
    #[serde(default = "default_layers")]
    pub layers: Vec<u32>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seed of the RAND trees.
    #[serde(default)]
    pub label_seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_layers() -> Vec<u32> {
    vec![0]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub layers: Option<Vec<u32>>,
    pub mode: Option<Mode>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads `path`, resolves relative paths against its directory, applies
    /// `overrides` and validates the result.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.train_treebank, &mut self.dev_treebank, &mut self.test_treebank, &mut self.taxonomy]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
        if let Some(t) = &mut self.embeddings {
            if Path::new(t.as_str()).is_relative() {
                *t = base.join(t.as_str()).to_string_lossy().into_owned();
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(l) = &o.layers {
            self.layers = l.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    /// Objectives after filling in the fixed sets of modes C, D and E.
    pub fn effective_objectives(&self) -> Vec<ObjectiveId> {
        if !self.objectives.is_empty() {
            return self.objectives.clone();
        }
        let all_of = |t: Target| Structure::ALL.iter().map(|&s| ObjectiveId::new(s, t)).collect();
        match self.mode {
            Mode::C => all_of(Target::Distance),
            Mode::D => all_of(Target::Depth),
            Mode::E => ObjectiveId::all(),
            _ => Vec::new(),
        }
    }

    /// Objective groups trained together, one training run each.
    pub fn run_groups(&self) -> Vec<Vec<ObjectiveId>> {
        let objectives = self.effective_objectives();
        match self.mode {
            Mode::A | Mode::I | Mode::II => objectives.into_iter().map(|o| vec![o]).collect(),
            _ => vec![objectives],
        }
    }

    /// Structures whose labels the runs need.
    pub fn structures(&self) -> Vec<Structure> {
        let mut s: Vec<Structure> = self.effective_objectives().iter().map(|o| o.structure).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let objectives = self.effective_objectives();
        if objectives.is_empty() {
            return Err(Error::Config(format!("objectives: mode {} needs an explicit objective list", self.mode)));
        }
        match self.mode {
            Mode::A | Mode::I | Mode::II => {
                let mut sorted = objectives.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != objectives.len() {
                    return Err(Error::Config("objectives: duplicate entries".into()));
                }
            }
            m => m.validate_objectives(&objectives)?,
        }
        // Synthetic data falls back to a generated taxonomy.
        let lex = objectives.iter().any(|o| o.structure == Structure::Lex);
        if lex && self.taxonomy.is_none() && self.synthetic.is_none() {
            return Err(Error::Config("taxonomy: LEX objectives require a taxonomy path".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layers: at least one layer is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon: must be positive".into()));
        }
        match (&self.synthetic, &self.embeddings) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("embeddings: give either an embeddings template or synthetic, not both".into()))
            }
            (None, None) => {
                return Err(Error::Config("embeddings: an embeddings template or a synthetic section is required".into()))
            }
            (None, Some(_)) => {
                for (name, p) in [
                    ("train_treebank", &self.train_treebank),
                    ("dev_treebank", &self.dev_treebank),
                    ("test_treebank", &self.test_treebank),
                ] {
                    if p.is_none() {
                        return Err(Error::Config(format!("{}: required when embeddings are read from files", name)));
                    }
                }
            }
            (Some(s), None) => {
                if s.min_len < 2 || s.min_len > s.max_len || s.sizes.contains(&0) {
                    return Err(Error::Config(
                        "synthetic: sizes must be positive and 2 <= min_len <= max_len".into(),
                    ));
                }
                if s.planted.contains(&Structure::Lex) {
                    return Err(Error::Config("synthetic.planted: LEX cannot be planted".into()));
                }
            }
        }
        let mut train = self.train.clone();
        train.mode = self.mode;
        for group in self.run_groups() {
            train.objectives = group;
            train.validate()?;
        }
        Ok(())
    }

    /// The training settings of one run.
    pub fn train_config(&self, objectives: &[ObjectiveId], seed: u64) -> TrainConfig {
        TrainConfig {
            objectives: objectives.to_vec(),
            mode: self.mode,
            seed,
            ..self.train.clone()
        }
    }
}
