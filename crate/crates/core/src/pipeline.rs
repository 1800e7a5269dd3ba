//! End-to-end runs: configuration, output layout, checkpoint and resume.
//!
//! A run is a sequence of units: one per shrink round, then the initial
//! evolution population, then one per evolution iteration. After every unit
//! the full state (graph, evaluator training state, RNG positions, stream
//! lengths) goes to `checkpoint.json`, so an interrupted run resumes at the
//! last finished unit and produces the same files as an uninterrupted one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost;
use crate::evaluator::{
    Evaluator, MissingPolicy, SurrogateEvaluator, SurrogateParams, SurrogateSettings,
    TableEvaluator, Workers,
};
use crate::events::{JsonlSink, StreamOffsets, EVALS_FILE, EVOLUTION_FILE, REPORTS_FILE};
use crate::evolution::{EvolutionCheckpoint, EvolutionConfig, Evolver};
use crate::report::GraphCheckpoint;
use crate::shrinking::{run_round, OperationGraph, ShrinkCheckpoint, ShrinkSchedule, ShrinkState};
use crate::space::{load_space, Architecture, Mode, SearchSpaceSpec, SpaceConfig};
use crate::{Error, Result};

pub const GRAPH_FILE: &str = "graph.json";
pub const BEST_FILE: &str = "best.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SURROGATE_FILE: &str = "surrogate.json";
pub const ENV_OUTPUT_DIR: &str = "BSNAS_OUTPUT_DIR";
pub const ENV_WORKERS: &str = "BSNAS_WORKERS";

pub fn graph_step_file(step: usize) -> String {
    format!("graph_step{step}.json")
}

/// `"default"`, `{"file": "<path>"}`, or an inline table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceSource {
    Named(String),
    File { file: PathBuf },
    Inline(SpaceConfig),
}

impl Default for SpaceSource {
    fn default() -> Self {
        SpaceSource::Named("default".into())
    }
}

impl SpaceSource {
    pub fn load(&self) -> Result<SearchSpaceSpec> {
        match self {
            SpaceSource::Named(n) if n == "default" => Ok(SearchSpaceSpec::default_space()),
            SpaceSource::Named(n) => Err(Error::Config(format!("unknown space {n:?}"))),
            SpaceSource::File { file } => load_space(file),
            SpaceSource::Inline(cfg) => cfg.clone().into_space(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    Surrogate {
        /// Seed of the latent parameters; the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        settings: SurrogateSettings,
        /// Previously exported parameters; overrides `seed` and `settings`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params_file: Option<PathBuf>,
    },
    Table {
        path: PathBuf,
        #[serde(default)]
        missing: MissingPolicy,
    },
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::Surrogate {
            seed: None,
            settings: SurrogateSettings::default(),
            params_file: None,
        }
    }
}

/// A constructed evaluator backend.
#[allow(clippy::large_enum_variant)]
pub enum Backend {
    Surrogate(SurrogateEvaluator),
    Table(TableEvaluator),
}

impl Backend {
    pub fn as_dyn(&self) -> &dyn Evaluator {
        match self {
            Backend::Surrogate(e) => e,
            Backend::Table(e) => e,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Evaluator {
        match self {
            Backend::Surrogate(e) => e,
            Backend::Table(e) => e,
        }
    }

    /// True fitness: stand-alone fitness for the surrogate, the stored value
    /// for a table.
    pub fn truth(&self, arch: &Architecture) -> Result<f64> {
        match self {
            Backend::Surrogate(e) => e.stand_alone(arch),
            Backend::Table(e) => e.lookup(arch),
        }
    }
}

impl EvaluatorConfig {
    pub fn build(&self, space: &SearchSpaceSpec, run_seed: u64) -> Result<Backend> {
        match self {
            EvaluatorConfig::Surrogate {
                params_file: Some(p),
                ..
            } => {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
                let params: SurrogateParams = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                Ok(Backend::Surrogate(SurrogateEvaluator::new(space, params)?))
            }
            EvaluatorConfig::Surrogate { seed, settings, .. } => Ok(Backend::Surrogate(
                SurrogateEvaluator::from_seed(space, seed.unwrap_or(run_seed), settings.clone()),
            )),
            EvaluatorConfig::Table { path, missing } => {
                Ok(Backend::Table(TableEvaluator::load(path, missing.clone())?))
            }
        }
    }

    fn files(&self) -> Vec<&Path> {
        match self {
            EvaluatorConfig::Surrogate { params_file, .. } => {
                params_file.iter().map(PathBuf::as_path).collect()
            }
            EvaluatorConfig::Table { path, .. } => vec![path.as_path()],
        }
    }

    fn resolve(&mut self, base: &Path) {
        match self {
            EvaluatorConfig::Surrogate {
                params_file: Some(p),
                ..
            } => *p = base.join(&*p),
            EvaluatorConfig::Table { path, .. } => *path = base.join(&*path),
            _ => {}
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("bsnas-out")
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub space: SpaceSource,
    #[serde(default)]
    pub schedule: ShrinkSchedule,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl RunConfig {
    /// Default space, schedule, evolution and surrogate with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            space: SpaceSource::default(),
            schedule: ShrinkSchedule::default(),
            evolution: EvolutionConfig::default(),
            evaluator: EvaluatorConfig::default(),
            seed,
            output_dir: default_output_dir(),
            workers: default_workers(),
        }
    }

    /// Reads a JSON config. Relative file references are resolved against
    /// the config's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let SpaceSource::File { file } = &mut cfg.space {
            *file = base.join(&*file);
        }
        cfg.evaluator.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `BSNAS_OUTPUT_DIR` and `BSNAS_WORKERS`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(w) = std::env::var(ENV_WORKERS) {
            self.workers = w
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_WORKERS}={w:?} is not a count")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.evolution.validate()?;
        if let SpaceSource::File { file } = &self.space {
            if !file.exists() {
                return Err(Error::MissingFile(file.clone()));
            }
        }
        for f in self.evaluator.files() {
            if !f.exists() {
                return Err(Error::MissingFile(f.to_path_buf()));
            }
        }
        Ok(())
    }

    /// The parts of the config that determine the outputs.
    fn fingerprint(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("workers");
        }
        Ok(v)
    }
}

/// Which part of the pipeline to run.
#[derive(Debug, Clone, Default)]
pub enum Stages {
    #[default]
    All,
    ShrinkOnly,
    /// Evolution on a previously shrunk graph.
    EvolveFrom(GraphCheckpoint),
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Replace the outputs of a previous run in the output directory.
    pub overwrite: bool,
    /// Continue from `checkpoint.json` when present.
    pub resume: bool,
    /// Stop after this many units in total, leaving a checkpoint behind.
    pub halt_after: Option<usize>,
    pub stages: Stages,
}

/// Contents of `best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub arch: String,
    pub score: f64,
    /// Fully trained fitness when the evaluator provides one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_score: Option<f64>,
    /// MACs of the released model.
    pub macs: u64,
    pub params: u64,
    /// Number of architectures in the searched graph, as a decimal string.
    pub alive_cardinality: String,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub config: Value,
    pub units_done: usize,
    pub virtual_epochs: f64,
    pub shrink: ShrinkCheckpoint,
    pub evaluator_state: Value,
    pub evolution: Option<EvolutionCheckpoint>,
    pub streams: StreamOffsets,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum PipelineStatus {
    Completed {
        graph: OperationGraph,
        best: Option<BestRecord>,
    },
    Halted {
        units_done: usize,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn is_output_file(name: &str) -> bool {
    [
        GRAPH_FILE,
        BEST_FILE,
        CHECKPOINT_FILE,
        SURROGATE_FILE,
        EVALS_FILE,
        REPORTS_FILE,
        EVOLUTION_FILE,
    ]
    .contains(&name)
        || (name.starts_with("graph_step") && name.ends_with(".json"))
}

/// Removes the files a previous run left in `dir`; other files are kept.
fn clear_outputs(dir: &Path) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() && entry.file_name().to_str().is_some_and(is_output_file) {
            std::fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

fn has_outputs(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    for entry in std::fs::read_dir(dir)? {
        if entry?.file_name().to_str().is_some_and(is_output_file) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Cardinality of a graph as a decimal string.
fn cardinality_string(graph: &OperationGraph) -> String {
    graph.alive_cardinality().to_string()
}

pub fn best_record(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    backend: &Backend,
    arch: &Architecture,
    score: f64,
    evaluations: usize,
) -> Result<BestRecord> {
    let released = arch.clone().with_mode(Mode::Released);
    let c = cost::flops(space, &released)?;
    let true_score = match backend {
        Backend::Surrogate(e) => Some(e.stand_alone(arch)?),
        Backend::Table(_) => None,
    };
    Ok(BestRecord {
        arch: arch.canonical(),
        score,
        true_score,
        macs: c.total_macs,
        params: c.total_params,
        alive_cardinality: cardinality_string(graph),
        evaluations,
    })
}

/// Runs (or resumes) the configured pipeline, writing every output to
/// `config.output_dir`.
pub fn run_pipeline(config: &RunConfig, options: &PipelineOptions) -> Result<PipelineStatus> {
    config.validate()?;
    let dir = config.output_dir.as_path();
    let workers = Workers::new(config.workers)?;
    let space = config.space.load()?;
    let mut backend = config.evaluator.build(&space, config.seed)?;
    let fingerprint = config.fingerprint()?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);

    let resumed = if options.resume && checkpoint_path.exists() {
        let cp: RunCheckpoint = serde_json::from_str(&std::fs::read_to_string(&checkpoint_path)?)?;
        if cp.config != fingerprint {
            return Err(Error::Config(
                "checkpoint was written by a different configuration".into(),
            ));
        }
        Some(cp)
    } else {
        if has_outputs(dir)? {
            if !options.overwrite {
                return Err(Error::Config(format!(
                    "{} already holds run outputs; pass --overwrite or --resume",
                    dir.display()
                )));
            }
            clear_outputs(dir)?;
        }
        None
    };

    let (mut state, mut units, mut epochs, mut evo_cp, mut sink) = match resumed {
        Some(cp) => {
            backend
                .as_dyn_mut()
                .restore_training_state(&cp.evaluator_state)?;
            let state = ShrinkState::from_checkpoint(&cp.shrink)?;
            if !state.graph.matches(&space) {
                return Err(Error::Config(
                    "checkpoint graph does not match the search space".into(),
                ));
            }
            let sink = JsonlSink::resume(dir, cp.streams)?;
            (state, cp.units_done, cp.virtual_epochs, cp.evolution, sink)
        }
        None => {
            let sink = JsonlSink::create(dir)?;
            if let Backend::Surrogate(e) = &backend {
                write_json(&dir.join(SURROGATE_FILE), e.params())?;
            }
            let mut state = ShrinkState::new(&space, config.seed);
            let mut epochs = 0.0;
            if let Stages::EvolveFrom(g) = &options.stages {
                if !g.graph.matches(&space) {
                    return Err(Error::Config(
                        "graph checkpoint does not match the search space".into(),
                    ));
                }
                backend
                    .as_dyn_mut()
                    .restore_training_state(&g.evaluator_state)?;
                state.graph = g.graph.clone();
                state.next_round = config.schedule.rounds();
                epochs = g.virtual_epochs;
            }
            (state, 0, epochs, None, sink)
        }
    };

    let save = |units: usize,
                epochs: f64,
                state: &ShrinkState,
                backend: &Backend,
                evo: Option<EvolutionCheckpoint>,
                sink: &mut JsonlSink|
     -> Result<()> {
        let cp = RunCheckpoint {
            config: fingerprint.clone(),
            units_done: units,
            virtual_epochs: epochs,
            shrink: state.checkpoint(),
            evaluator_state: backend.as_dyn().training_state(),
            evolution: evo,
            streams: sink.offsets()?,
        };
        write_json(&checkpoint_path, &cp)
    };
    let halted = |units: usize| options.halt_after.is_some_and(|h| units >= h);

    // shrinking
    let schedule = &config.schedule;
    let shrink_rounds = !matches!(options.stages, Stages::EvolveFrom(_));
    while shrink_rounds && !state.is_done(schedule) {
        if halted(units) {
            return Ok(PipelineStatus::Halted { units_done: units });
        }
        epochs += f64::from(schedule.epochs_before(state.next_round));
        run_round(
            &space,
            schedule,
            &mut state,
            backend.as_dyn_mut(),
            &mut sink,
            &workers,
        )?;
        let snapshot = GraphCheckpoint {
            step: state.graph.step_index(),
            virtual_epochs: epochs,
            graph: state.graph.clone(),
            evaluator_state: backend.as_dyn().training_state(),
        };
        snapshot.save(&dir.join(graph_step_file(snapshot.step)))?;
        units += 1;
        save(units, epochs, &state, &backend, None, &mut sink)?;
    }
    if shrink_rounds {
        GraphCheckpoint {
            step: state.graph.step_index(),
            virtual_epochs: epochs,
            graph: state.graph.clone(),
            evaluator_state: backend.as_dyn().training_state(),
        }
        .save(&dir.join(GRAPH_FILE))?;
    }
    if matches!(options.stages, Stages::ShrinkOnly) {
        sink.flush()?;
        return Ok(PipelineStatus::Completed {
            graph: state.graph,
            best: None,
        });
    }

    // evolution
    let graph = state.graph.clone();
    let mut evolver = match evo_cp.take() {
        Some(cp) => Evolver::resume(&space, &graph, &config.evolution, cp)?,
        None => Evolver::new(&space, &graph, &config.evolution, config.seed)?,
    };
    while !evolver.is_done() {
        if halted(units) {
            return Ok(PipelineStatus::Halted { units_done: units });
        }
        evolver.step(backend.as_dyn(), &mut sink, &workers)?;
        units += 1;
        save(
            units,
            epochs,
            &state,
            &backend,
            Some(evolver.checkpoint()),
            &mut sink,
        )?;
    }
    sink.flush()?;
    let outcome = evolver.outcome()?;
    let best = best_record(
        &space,
        &graph,
        &backend,
        &outcome.best.arch,
        outcome.best.score,
        outcome.evaluations,
    )?;
    write_json(&dir.join(BEST_FILE), &best)?;
    Ok(PipelineStatus::Completed {
        graph,
        best: Some(best),
    })
}
