//! Training runs: layout on disk, resumption and parallel execution.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ortho_probe::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use ortho_probe::probe::ProbeParams;
use ortho_probe::trainer::{Mode, TrainConfig, TrainState, Trainer};
use ortho_probe::{Error, ObjectiveId, Result, Structure};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Splits;

pub const THREADS_VAR: &str = "ORTHO_PROBE_THREADS";

/// One (layer, seed, objective group) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub layer: u32,
    pub seed: u64,
    pub mode: Mode,
    pub objectives: Vec<ObjectiveId>,
}

impl RunSpec {
    /// `A-DEP-DEPTH` for single-objective modes, `B-DEP` for mode B and the
    /// bare mode letter for C, D and E.
    pub fn group(&self) -> String {
        match self.mode {
            Mode::A | Mode::I | Mode::II => format!("{}-{}", self.mode, self.objectives[0]),
            Mode::B => format!("B-{}", self.objectives[0].structure.name()),
            m => m.to_string(),
        }
    }

    pub fn name(&self) -> String {
        format!("L{}_S{}_{}", self.layer, self.seed, self.group())
    }

    pub fn dir(&self, output_dir: &Path) -> PathBuf {
        output_dir.join("runs").join(self.name())
    }
}

pub fn run_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for &layer in &cfg.layers {
        for &seed in &cfg.seeds {
            for group in cfg.run_groups() {
                out.push(RunSpec {
                    layer,
                    seed,
                    mode: cfg.mode,
                    objectives: group,
                });
            }
        }
    }
    out
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(crate::data::open(path)?)?)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.opckp";
pub const STATE_FILE: &str = "state.json";
pub const HISTORY_FILE: &str = "history.json";
pub const RUN_FILE: &str = "run.json";

/// Identity of a run on disk; a state is only resumed when this matches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunSpec,
    pub train: TrainConfig,
    pub dim: usize,
}

pub fn save_checkpoint(path: &Path, mode: Mode, params: &ProbeParams) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(
        &Checkpoint {
            mode,
            params: params.clone(),
        },
        &mut bytes,
    )?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing checkpoint {}", path.display()),
        )));
    }
    read_checkpoint(crate::data::open(path)?)
}

/// Summary of a finished or paused run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub layer: u32,
    pub seed: u64,
    pub mode: Mode,
    pub objectives: Vec<ObjectiveId>,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub n_parameters: usize,
    pub finished: bool,
}

pub fn count_parameters(params: &ProbeParams) -> usize {
    match params {
        ProbeParams::Orthogonal(p) => p.v.rows() * p.v.cols() + p.scalers.values().map(Vec::len).sum::<usize>(),
        ProbeParams::Linear(p) => p.maps.values().map(|b| b.rows() * b.cols()).sum(),
    }
}

/// Trains one run, resuming from its saved state when the manifest matches.
/// With `epoch_budget` at most that many epochs run in this call.
pub fn train_run(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    splits: &Splits,
    epoch_budget: Option<usize>,
) -> Result<RunSummary> {
    let dir = spec.dir(&cfg.output_dir);
    let train = cfg.train_config(&spec.objectives, spec.seed);
    let manifest = RunManifest {
        run: spec.clone(),
        train: train.clone(),
        dim: splits.train.dim(),
    };
    let trainer = Trainer::new(train, &splits.train, &splits.dev)?;
    let resumable = dir.join(RUN_FILE).exists()
        && dir.join(STATE_FILE).exists()
        && read_json::<RunManifest>(&dir.join(RUN_FILE)).ok().as_ref() == Some(&manifest);
    let mut state: TrainState = if resumable {
        read_json(&dir.join(STATE_FILE))?
    } else {
        trainer.initial_state()?
    };
    write_json(&dir.join(RUN_FILE), &manifest)?;

    let save = |state: &TrainState| -> Result<()> {
        write_json(&dir.join(STATE_FILE), state)?;
        write_json(&dir.join(HISTORY_FILE), &state.history)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), spec.mode, &state.best_params)
    };
    let mut ran = 0;
    while epoch_budget.is_none_or(|b| ran < b) {
        let more = trainer.run_epoch(&mut state)?;
        ran += 1;
        save(&state)?;
        if !more {
            break;
        }
    }
    if ran == 0 {
        save(&state)?;
    }
    Ok(RunSummary {
        run: spec.name(),
        layer: spec.layer,
        seed: spec.seed,
        mode: spec.mode,
        objectives: spec.objectives.clone(),
        epochs: state.history.len(),
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
        n_parameters: count_parameters(&state.best_params),
        finished: state.stopped,
    })
}

/// Worker count: `ORTHO_PROBE_THREADS` if set, otherwise the available
/// parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{}: expected a positive integer, got '{}'", THREADS_VAR, v))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every item on up to `workers` threads and returns the
/// results in input order. The first error by input order wins.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// The corpus an objective is scored on: RAND on train, the rest on test.
pub fn eval_corpus(splits: &Splits, o: ObjectiveId) -> &ortho_probe::corpus::LabeledCorpus {
    if o.structure == Structure::Rand {
        &splits.train
    } else {
        &splits.test
    }
}
