//! Constrained evolutionary search over the shrunk space.
//!
//! Every iteration regenerates the population from the elites: a batch of
//! crossover children, a batch of mutants, and random samples to fill the
//! rest. Candidates outside the FLOPs window (released-mode MACs) or already
//! seen in the previous population or the hall of fame are redrawn.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost;
use crate::evaluator::{evaluate_batch, sort_records, EvalRecord, Evaluator, Workers};
use crate::events::{EvalEvent, EventSink, IterationEvent, Phase};
use crate::rng::{labels, StreamRng, StreamState};
use crate::shrinking::OperationGraph;
use crate::space::{Architecture, LayerGene, Mode, SearchSpaceSpec};
use crate::{Error, Result};

pub const HALL_OF_FAME_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub population: usize,
    pub iterations: usize,
    pub elite_k: usize,
    pub mutation_prob: f64,
    pub offspring_crossover: usize,
    pub offspring_mutation: usize,
    pub flops_max: Option<u64>,
    pub flops_min: Option<u64>,
    pub max_resample: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 75,
            iterations: 20,
            elite_k: 10,
            mutation_prob: 0.1,
            offspring_crossover: 25,
            offspring_mutation: 25,
            flops_max: None,
            flops_min: None,
            max_resample: 100,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.population == 0
            || self.iterations == 0
            || self.elite_k == 0
            || self.max_resample == 0
        {
            return bad("population, iterations, elite_k and max_resample must be positive");
        }
        if self.elite_k > self.population {
            return bad("elite_k must not exceed the population");
        }
        if self.offspring_crossover + self.offspring_mutation > self.population {
            return bad("offspring counts exceed the population");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad("mutation_prob must lie in [0, 1]");
        }
        if let (Some(lo), Some(hi)) = (self.flops_min, self.flops_max) {
            if lo > hi {
                return bad("flops_min exceeds flops_max");
            }
        }
        Ok(())
    }

    fn window(&self) -> (u64, u64) {
        (
            self.flops_min.unwrap_or(0),
            self.flops_max.unwrap_or(u64::MAX),
        )
    }
}

/// Current members plus the best records ever seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<EvalRecord>,
    pub hall_of_fame: Vec<EvalRecord>,
}

impl Population {
    fn absorb_into_hall_of_fame(&mut self, records: &[EvalRecord]) {
        let known: HashSet<String> = self
            .hall_of_fame
            .iter()
            .map(|r| r.arch.canonical())
            .collect();
        self.hall_of_fame.extend(
            records
                .iter()
                .filter(|r| !known.contains(&r.arch.canonical()))
                .cloned(),
        );
        sort_records(&mut self.hall_of_fame);
        self.hall_of_fame.truncate(HALL_OF_FAME_SIZE);
    }

    pub fn best(&self) -> Option<&EvalRecord> {
        self.hall_of_fame.first()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub evaluated: usize,
    pub members: usize,
    pub mean_score: f64,
    pub best_score: f64,
    pub best_arch: String,
}

/// Uniform gene-wise crossover. A child's (kernel, expansion) gene that is
/// dead at the child's channel is taken from the parent that supplied the
/// channel, so the child stays alive-respecting.
pub fn crossover<R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    a: &Architecture,
    b: &Architecture,
    rng: &mut R,
) -> Architecture {
    let mut layer_genes = a.layer_genes.clone();
    let mut cluster_genes = a.cluster_genes.clone();
    for (c, slot) in cluster_genes.iter_mut().enumerate() {
        let channel_parent = if rng.random_bool(0.5) { a } else { b };
        let channel = channel_parent.cluster_genes[c];
        *slot = channel;
        for l in space.cluster_layers(c) {
            let pick = if rng.random_bool(0.5) { a } else { b };
            let gene = pick.layer_genes[l];
            layer_genes[l] = if gene_alive(space, graph, l, gene, channel) {
                gene
            } else {
                channel_parent.layer_genes[l]
            };
        }
    }
    Architecture {
        layer_genes,
        cluster_genes,
        mode: a.mode,
    }
}

fn gene_alive(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    layer: usize,
    gene: LayerGene,
    channel: u32,
) -> bool {
    let op = crate::space::OpTriple {
        kernel: gene.kernel,
        expansion: gene.expansion,
        channel,
    };
    space
        .op_index(layer, &op)
        .is_some_and(|i| graph.is_alive(layer, i))
}

fn channel_index(space: &SearchSpaceSpec, cluster: usize, channel: u32) -> usize {
    space.clusters()[cluster]
        .channel_choices
        .iter()
        .position(|&c| c == channel)
        .expect("valid channel")
}

fn resample_gene<R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    layer: usize,
    channel_idx: usize,
    rng: &mut R,
) -> LayerGene {
    let ops = graph.alive_ops_with_channel(layer, channel_idx);
    let op = space.op_triple(layer, ops[rng.random_range(0..ops.len())]);
    LayerGene::new(op.kernel, op.expansion)
}

/// Resamples every layer gene (over the pairs alive at the current channel)
/// and then every cluster gene (over the feasible channels) with probability
/// `prob`. A changed channel re-validates the cluster's layer genes and
/// redraws the ones that are dead at the new channel.
pub fn mutate<R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    arch: &Architecture,
    prob: f64,
    rng: &mut R,
) -> Architecture {
    let mut out = arch.clone();
    for l in 0..space.layer_count() {
        if rng.random_bool(prob) {
            let c = space.layers()[l].cluster;
            let ci = channel_index(space, c, out.cluster_genes[c]);
            out.layer_genes[l] = resample_gene(space, graph, l, ci, rng);
        }
    }
    for c in 0..space.clusters().len() {
        if !rng.random_bool(prob) {
            continue;
        }
        let feasible = graph.feasible_channels(c);
        let ci = feasible[rng.random_range(0..feasible.len())];
        let channel = space.clusters()[c].channel_choices[ci];
        if channel == out.cluster_genes[c] {
            continue;
        }
        out.cluster_genes[c] = channel;
        for l in space.cluster_layers(c) {
            if !gene_alive(space, graph, l, out.layer_genes[l], channel) {
                out.layer_genes[l] = resample_gene(space, graph, l, ci, rng);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Origin {
    Crossover,
    Mutation,
    Random,
}

/// Serializable evolution progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionCheckpoint {
    /// Iterations completed; 0 means only the initial population exists.
    pub completed: usize,
    pub initialized: bool,
    pub population: Population,
    pub history: Vec<IterationStats>,
    pub evaluations: usize,
    pub rng: StreamState,
    pub noise: StreamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionOutcome {
    pub best: EvalRecord,
    pub history: Vec<IterationStats>,
    pub evaluations: usize,
    pub population: Population,
}

/// Step-wise evolution driver; [`evolve`] runs it to completion.
pub struct Evolver<'a> {
    space: &'a SearchSpaceSpec,
    graph: &'a OperationGraph,
    config: &'a EvolutionConfig,
    state: EvolutionCheckpoint,
    rng: StreamRng,
    noise: StreamRng,
    /// The graph admits one architecture: nothing to search after init.
    single: bool,
}

struct Draw {
    found_in_window: bool,
    closest: u64,
}

impl<'a> Evolver<'a> {
    pub fn new(
        space: &'a SearchSpaceSpec,
        graph: &'a OperationGraph,
        config: &'a EvolutionConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        graph.check_invariants()?;
        let rng = StreamRng::new(seed, labels::EVOLUTION);
        let noise = StreamRng::new(seed, labels::EVOLUTION_NOISE);
        Ok(Self {
            space,
            graph,
            config,
            state: EvolutionCheckpoint {
                completed: 0,
                initialized: false,
                population: Population::default(),
                history: Vec::new(),
                evaluations: 0,
                rng: rng.state(),
                noise: noise.state(),
            },
            rng,
            noise,
            single: graph.alive_cardinality() == 1u32.into(),
        })
    }

    pub fn resume(
        space: &'a SearchSpaceSpec,
        graph: &'a OperationGraph,
        config: &'a EvolutionConfig,
        checkpoint: EvolutionCheckpoint,
    ) -> Result<Self> {
        config.validate()?;
        let rng = StreamRng::from_state(&checkpoint.rng)?;
        let noise = StreamRng::from_state(&checkpoint.noise)?;
        graph.check_invariants()?;
        let single = graph.alive_cardinality() == 1u32.into();
        Ok(Self {
            space,
            graph,
            config,
            state: checkpoint,
            rng,
            noise,
            single,
        })
    }

    pub fn checkpoint(&self) -> EvolutionCheckpoint {
        EvolutionCheckpoint {
            rng: self.rng.state(),
            noise: self.noise.state(),
            ..self.state.clone()
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.initialized && (self.single || self.state.completed >= self.config.iterations)
    }

    pub fn population(&self) -> &Population {
        &self.state.population
    }

    fn macs(&self, arch: &Architecture) -> u64 {
        let released = arch.clone().with_mode(Mode::Released);
        cost::flops(self.space, &released)
            .expect("candidates are valid")
            .total_macs
    }

    /// Draws a candidate of the given origin, redrawing on a FLOPs violation
    /// or a duplicate, up to `max_resample` times.
    fn propose(
        &mut self,
        origin: Origin,
        parents: &[EvalRecord],
        seen: &HashSet<String>,
    ) -> (Option<Architecture>, Draw) {
        let (lo, hi) = self.config.window();
        let mut draw = Draw {
            found_in_window: false,
            closest: u64::MAX,
        };
        let mut closest_gap = u64::MAX;
        for _ in 0..self.config.max_resample {
            let cand = match origin {
                Origin::Crossover => {
                    let i = self.rng.random_range(0..parents.len());
                    let j = if parents.len() > 1 {
                        let j = self.rng.random_range(0..parents.len() - 1);
                        if j >= i {
                            j + 1
                        } else {
                            j
                        }
                    } else {
                        i
                    };
                    crossover(
                        self.space,
                        self.graph,
                        &parents[i].arch,
                        &parents[j].arch,
                        &mut self.rng,
                    )
                }
                Origin::Mutation => {
                    let i = self.rng.random_range(0..parents.len());
                    mutate(
                        self.space,
                        self.graph,
                        &parents[i].arch,
                        self.config.mutation_prob,
                        &mut self.rng,
                    )
                }
                Origin::Random => self
                    .space
                    .random_architecture(&mut self.rng, Some(self.graph))
                    .expect("graph invariants checked"),
            };
            let macs = self.macs(&cand);
            if macs < lo || macs > hi {
                let gap = if macs < lo { lo - macs } else { macs - hi };
                if gap < closest_gap {
                    closest_gap = gap;
                    draw.closest = macs;
                }
                continue;
            }
            draw.found_in_window = true;
            if seen.contains(&cand.canonical()) {
                continue;
            }
            return (Some(cand), draw);
        }
        (None, draw)
    }

    fn constraint_error(&self, draw: &Draw) -> Error {
        let (lo, hi) = self.config.window();
        Error::ConstraintInfeasible {
            min: lo,
            max: hi,
            attempts: self.config.max_resample,
            closest: draw.closest,
        }
    }

    fn evaluate_and_record(
        &mut self,
        candidates: Vec<Architecture>,
        evaluator: &dyn Evaluator,
        sink: &mut dyn EventSink,
        workers: &Workers,
    ) -> Result<()> {
        let scores = evaluate_batch(evaluator, &candidates, &mut self.noise, workers)?;
        let round = if self.state.initialized {
            self.state.completed + 1
        } else {
            0
        };
        let mut records: Vec<EvalRecord> = candidates
            .into_iter()
            .zip(scores)
            .map(|(a, s)| EvalRecord::new(a, s))
            .collect();
        for (slot, r) in records.iter().enumerate() {
            sink.eval(&EvalEvent::new(Phase::Evolve, round, slot, r))?;
        }
        self.state.evaluations += records.len();
        let evaluated = records.len();
        sort_records(&mut records);
        self.state.population.absorb_into_hall_of_fame(&records);
        // an iteration that produced nothing new keeps its previous members
        if !records.is_empty() {
            self.state.population.members = records;
        }
        let pop = &self.state.population;
        let best = pop.best().expect("at least one evaluation");
        let members = &pop.members;
        let stats = IterationStats {
            iteration: round,
            evaluated,
            members: members.len(),
            mean_score: members.iter().map(|r| r.score).sum::<f64>() / members.len() as f64,
            best_score: best.score,
            best_arch: best.arch.canonical(),
        };
        sink.iteration(&IterationEvent {
            iteration: stats.iteration,
            evaluated: stats.evaluated,
            members: stats.members,
            mean_score: stats.mean_score,
            best_score: stats.best_score,
            best_arch: stats.best_arch.clone(),
            total_evaluations: self.state.evaluations,
        })?;
        self.state.history.push(stats);
        Ok(())
    }

    /// Random initial population of distinct in-window architectures.
    pub fn init(
        &mut self,
        evaluator: &dyn Evaluator,
        sink: &mut dyn EventSink,
        workers: &Workers,
    ) -> Result<()> {
        let mut seen = HashSet::new();
        let mut candidates = Vec::new();
        for _ in 0..self.config.population {
            let (cand, draw) = self.propose(Origin::Random, &[], &seen);
            match cand {
                Some(a) => {
                    seen.insert(a.canonical());
                    candidates.push(a);
                }
                None if !draw.found_in_window => return Err(self.constraint_error(&draw)),
                None => {}
            }
        }
        self.evaluate_and_record(candidates, evaluator, sink, workers)?;
        self.state.initialized = true;
        Ok(())
    }

    /// One generation: crossover, mutation, random refill, evaluation.
    pub fn step(
        &mut self,
        evaluator: &dyn Evaluator,
        sink: &mut dyn EventSink,
        workers: &Workers,
    ) -> Result<()> {
        if !self.state.initialized {
            return self.init(evaluator, sink, workers);
        }
        // elites come from the current members together with the hall of fame
        let pop = &self.state.population;
        let mut pool: Vec<EvalRecord> = pop.members.clone();
        let known: HashSet<String> = pool.iter().map(|r| r.arch.canonical()).collect();
        pool.extend(
            pop.hall_of_fame
                .iter()
                .filter(|r| !known.contains(&r.arch.canonical()))
                .cloned(),
        );
        sort_records(&mut pool);
        pool.truncate(self.config.elite_k);
        let parents = pool;

        let mut seen: HashSet<String> = pop
            .members
            .iter()
            .chain(pop.hall_of_fame.iter())
            .map(|r| r.arch.canonical())
            .collect();
        let mut candidates = Vec::new();
        let plan = [
            (Origin::Crossover, self.config.offspring_crossover),
            (Origin::Mutation, self.config.offspring_mutation),
        ];
        for (origin, count) in plan {
            for _ in 0..count {
                if let (Some(a), _) = self.propose(origin, &parents, &seen) {
                    seen.insert(a.canonical());
                    candidates.push(a);
                }
            }
        }
        while candidates.len() < self.config.population {
            let (cand, draw) = self.propose(Origin::Random, &parents, &seen);
            match cand {
                Some(a) => {
                    seen.insert(a.canonical());
                    candidates.push(a);
                }
                None if !draw.found_in_window => return Err(self.constraint_error(&draw)),
                None => break,
            }
        }
        self.evaluate_and_record(candidates, evaluator, sink, workers)?;
        self.state.completed += 1;
        Ok(())
    }

    pub fn outcome(&self) -> Result<EvolutionOutcome> {
        let best = self
            .state
            .population
            .best()
            .cloned()
            .ok_or_else(|| Error::Contract("evolution has not evaluated anything".into()))?;
        Ok(EvolutionOutcome {
            best,
            history: self.state.history.clone(),
            evaluations: self.state.evaluations,
            population: self.state.population.clone(),
        })
    }
}

/// Initial population plus `iterations` generations.
pub fn evolve(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    config: &EvolutionConfig,
    evaluator: &dyn Evaluator,
    seed: u64,
    sink: &mut dyn EventSink,
    workers: &Workers,
) -> Result<EvolutionOutcome> {
    let mut ev = Evolver::new(space, graph, config, seed)?;
    while !ev.is_done() {
        ev.step(evaluator, sink, workers)?;
    }
    ev.outcome()
}

/// Initial population only.
pub fn init_population(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    config: &EvolutionConfig,
    evaluator: &dyn Evaluator,
    seed: u64,
) -> Result<Population> {
    let mut ev = Evolver::new(space, graph, config, seed)?;
    ev.init(
        evaluator,
        &mut crate::events::NullSink,
        &Workers::sequential(),
    )?;
    Ok(ev.state.population)
}
