//! Architecture evaluators.
//!
//! An evaluator maps an architecture to an estimated top-1 accuracy in
//! `[0, 1]` and is told how many virtual epochs of supernet training have
//! elapsed on which graph. Three backends are provided: a synthetic supernet
//! surrogate, a lookup table, and (for tests and small spaces) exhaustive
//! enumeration on top of either.

use std::collections::HashMap;
use std::path::Path;

use num_bigint::BigUint;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rng::{labels, slot_rng, StreamRng};
use crate::shrinking::OperationGraph;
use crate::space::{Architecture, SearchSpaceSpec};
use crate::{Error, Result};

/// An evaluated architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub arch: Architecture,
    pub score: f64,
    /// 1-based position after sorting.
    pub rank: Option<usize>,
}

impl EvalRecord {
    pub fn new(arch: Architecture, score: f64) -> Self {
        Self {
            arch,
            score,
            rank: None,
        }
    }
}

/// Sorts best-first, breaking score ties by canonical string, and assigns ranks.
pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by_cached_key(|r| (std::cmp::Reverse(OrderedScore(r.score)), r.arch.canonical()));
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = Some(i + 1);
    }
}

#[derive(PartialEq, Clone, Copy)]
struct OrderedScore(f64);

impl Eq for OrderedScore {}

impl PartialOrd for OrderedScore {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedScore {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;

    /// Estimated top-1 accuracy. `rng` is the call-site noise source.
    fn evaluate(&self, arch: &Architecture, rng: &mut dyn RngCore) -> Result<f64>;

    /// Records `epochs` virtual epochs of fair-sampled training on `graph`.
    fn notify_training(&mut self, _graph: &OperationGraph, _epochs: f64) {}

    /// Whether `evaluate` may be called from several threads at once.
    fn concurrency_safe(&self) -> bool {
        true
    }

    /// Identical (state, architecture) always gives an identical score.
    fn deterministic(&self) -> bool;

    fn training_state(&self) -> Value {
        Value::Null
    }

    fn restore_training_state(&mut self, _state: &Value) -> Result<()> {
        Ok(())
    }
}

/// Optional thread pool for evaluator fan-out.
pub struct Workers(Option<rayon::ThreadPool>);

impl Workers {
    pub fn new(count: usize) -> Result<Self> {
        if count <= 1 {
            return Ok(Self(None));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {count} workers: {e}")))?;
        Ok(Self(Some(pool)))
    }

    pub fn sequential() -> Self {
        Self(None)
    }
}

/// Evaluates a batch. Each slot gets its own noise generator seeded from one
/// draw of `noise`, so results do not depend on the worker count.
pub fn evaluate_batch(
    evaluator: &dyn Evaluator,
    archs: &[Architecture],
    noise: &mut StreamRng,
    workers: &Workers,
) -> Result<Vec<f64>> {
    let seeds: Vec<u64> = archs.iter().map(|_| noise.next_u64()).collect();
    let one = |(a, &s): (&Architecture, &u64)| evaluator.evaluate(a, &mut slot_rng(s));
    match &workers.0 {
        Some(pool) if evaluator.concurrency_safe() => {
            pool.install(|| archs.par_iter().zip(seeds.par_iter()).map(one).collect())
        }
        _ => archs.iter().zip(seeds.iter()).map(one).collect(),
    }
}

// ---------------------------------------------------------------------------
// Surrogate
// ---------------------------------------------------------------------------

/// Tunable knobs of the surrogate; everything else is drawn from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSettings {
    /// Weight λ of the adjacent-layer interaction term.
    pub interaction_weight: f64,
    /// Virtual epochs for an operation to reach half of its quality.
    pub half_life: f64,
    /// Standard deviation of observation noise added to estimates.
    pub noise_sd: f64,
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self {
            interaction_weight: 0.2,
            half_life: 60.0,
            noise_sd: 0.01,
            floor: 0.4,
            ceiling: 0.8,
        }
    }
}

/// Latent parameters of the surrogate, fully determined by (seed, space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub seed: u64,
    pub settings: SurrogateSettings,
    /// Per-layer, per-operation quality `u`.
    pub quality: Vec<Vec<f64>>,
    /// Per-cluster, per-channel utility `v`.
    pub channel_utility: Vec<Vec<f64>>,
    /// Interaction `w` between layer `l` and `l+1`, row-major over
    /// (op of l, op of l+1).
    pub interaction: Vec<Vec<f64>>,
    /// Logistic temperature of the squashing.
    pub scale: f64,
}

/// Raw fitness is squashed by `floor + (ceiling − floor)·σ(x / scale)`, with
/// `scale` chosen so the extreme fully trained architectures land at
/// `σ(±SQUASH_REACH)`, just inside the floor and the ceiling.
const SQUASH_REACH: f64 = 3.0;

impl SurrogateParams {
    pub fn generate(space: &SearchSpaceSpec, seed: u64, settings: SurrogateSettings) -> Self {
        let mut rng = StreamRng::new(seed, labels::SURROGATE_PARAMS);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let h = space.layer_count();
        let quality = (0..h)
            .map(|l| (0..space.op_count(l)).map(|_| draw()).collect())
            .collect();
        let channel_utility = space
            .clusters()
            .iter()
            .map(|c| c.channel_choices.iter().map(|_| draw()).collect())
            .collect();
        let interaction = (0..h.saturating_sub(1))
            .map(|l| {
                (0..space.op_count(l) * space.op_count(l + 1))
                    .map(|_| draw())
                    .collect()
            })
            .collect();
        let mut params = Self {
            seed,
            settings,
            quality,
            channel_utility,
            interaction,
            scale: 1.0,
        };
        let (lo, hi) = params.raw_extremes(space);
        let reach = lo.abs().max(hi.abs());
        params.scale = if reach > 0.0 {
            reach / SQUASH_REACH
        } else {
            1.0
        };
        params
    }

    /// Minimum and maximum fully trained raw fitness over the whole space.
    /// Layers form a chain (interactions link neighbours, a cluster's layers
    /// share one channel), so a max-plus pass over the layers is exact.
    pub fn raw_extremes(&self, space: &SearchSpaceSpec) -> (f64, f64) {
        (-self.chain_best(space, -1.0), self.chain_best(space, 1.0))
    }

    fn chain_best(&self, space: &SearchSpaceSpec, sign: f64) -> f64 {
        let lambda = self.settings.interaction_weight;
        let channel = |l: usize, op: usize| op % space.layer_channels(l).len();
        let mut best: Vec<f64> = Vec::new();
        for l in 0..space.layer_count() {
            let info = &space.layers()[l];
            let first = space.cluster_layers(info.cluster).start == l;
            let cur: Vec<f64> = (0..space.op_count(l))
                .map(|op| {
                    let mut own = self.quality[l][op];
                    if first {
                        own += self.channel_utility[info.cluster][channel(l, op)];
                    }
                    let from = if l == 0 {
                        0.0
                    } else {
                        (0..space.op_count(l - 1))
                            .filter(|&p| !(!first && channel(l - 1, p) != channel(l, op)))
                            .map(|p| {
                                best[p]
                                    + sign
                                        * lambda
                                        * self.interaction[l - 1][p * space.op_count(l) + op]
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                    };
                    from + sign * own
                })
                .collect();
            best = cur;
        }
        best.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn matches(&self, space: &SearchSpaceSpec) -> bool {
        self.quality.len() == space.layer_count()
            && self
                .quality
                .iter()
                .enumerate()
                .all(|(l, q)| q.len() == space.op_count(l))
            && self.channel_utility.len() == space.clusters().len()
            && self.interaction.len() == space.layer_count().saturating_sub(1)
    }

    fn squash(&self, x: f64) -> f64 {
        let s = &self.settings;
        s.floor + (s.ceiling - s.floor) / (1.0 + (-x / self.scale).exp())
    }

    /// Raw fitness with per-layer training progress `progress(layer, op)`.
    fn raw(
        &self,
        space: &SearchSpaceSpec,
        arch: &Architecture,
        progress: impl Fn(usize, usize) -> f64,
    ) -> f64 {
        let ops = space.arch_ops(arch);
        let mut x = 0.0;
        for (l, &op) in ops.iter().enumerate() {
            x += self.quality[l][op] * progress(l, op);
        }
        for (c, &ch) in arch.cluster_genes.iter().enumerate() {
            let ci = space.clusters()[c]
                .channel_choices
                .iter()
                .position(|&v| v == ch)
                .expect("validated");
            x += self.channel_utility[c][ci];
        }
        let mut pair = 0.0;
        for l in 0..ops.len().saturating_sub(1) {
            pair += self.interaction[l][ops[l] * space.op_count(l + 1) + ops[l + 1]];
        }
        x + self.settings.interaction_weight * pair
    }
}

/// Synthetic supernet: accuracy estimates improve with per-operation
/// training exposure and carry observation noise; the companion
/// [`SurrogateEvaluator::stand_alone`] fitness is the fully trained,
/// noise-free value.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    space: SearchSpaceSpec,
    params: SurrogateParams,
    /// Accumulated virtual epochs per layer and operation.
    exposure: Vec<Vec<f64>>,
    stand_alone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SurrogateState {
    exposure: Vec<Vec<f64>>,
}

impl SurrogateEvaluator {
    pub fn new(space: &SearchSpaceSpec, params: SurrogateParams) -> Result<Self> {
        if !params.matches(space) {
            return Err(Error::Config(
                "surrogate parameters do not match the search space".into(),
            ));
        }
        let exposure = (0..space.layer_count())
            .map(|l| vec![0.0; space.op_count(l)])
            .collect();
        Ok(Self {
            space: space.clone(),
            params,
            exposure,
            stand_alone: false,
        })
    }

    pub fn from_seed(space: &SearchSpaceSpec, seed: u64, settings: SurrogateSettings) -> Self {
        Self::new(space, SurrogateParams::generate(space, seed, settings))
            .expect("generated for this space")
    }

    /// Evaluator returning the noise-free, fully trained fitness.
    pub fn stand_alone_evaluator(&self) -> Self {
        Self {
            stand_alone: true,
            ..self.clone()
        }
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    pub fn exposure(&self, layer: usize, op: usize) -> f64 {
        self.exposure[layer][op]
    }

    /// Training progress `g(n) = n / (n + h)`.
    pub fn progress(&self, epochs: f64) -> f64 {
        if epochs <= 0.0 {
            0.0
        } else {
            epochs / (epochs + self.params.settings.half_life)
        }
    }

    /// Noise-free estimate at the current training state.
    pub fn expected(&self, arch: &Architecture) -> Result<f64> {
        self.space.check(arch)?;
        let x = self.params.raw(&self.space, arch, |l, op| {
            self.progress(self.exposure[l][op])
        });
        Ok(self.params.squash(x))
    }

    /// Fully trained, noise-free fitness of the released model.
    pub fn stand_alone(&self, arch: &Architecture) -> Result<f64> {
        self.space.check(arch)?;
        Ok(self
            .params
            .squash(self.params.raw(&self.space, arch, |_, _| 1.0)))
    }
}

impl Evaluator for SurrogateEvaluator {
    fn name(&self) -> &str {
        if self.stand_alone {
            "surrogate-stand-alone"
        } else {
            "surrogate"
        }
    }

    fn evaluate(&self, arch: &Architecture, rng: &mut dyn RngCore) -> Result<f64> {
        if self.stand_alone {
            return self.stand_alone(arch);
        }
        let mean = self.expected(arch)?;
        let sd = self.params.settings.noise_sd;
        if sd <= 0.0 {
            return Ok(mean);
        }
        let eps = Normal::new(0.0, sd)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng);
        Ok((mean + eps).clamp(0.0, 1.0))
    }

    /// Each alive operation accumulates `epochs · p · O_N`, where `p` is its
    /// fair-sampling probability and `O_N` the layer's operation count, so a
    /// fully alive layer credits every operation with exactly `epochs` and
    /// surviving operations of a shrunk layer are credited more.
    fn notify_training(&mut self, graph: &OperationGraph, epochs: f64) {
        if self.stand_alone {
            return;
        }
        for l in 0..self.exposure.len() {
            let n = self.exposure[l].len() as f64;
            for (op, p) in graph.sampling_probabilities(l).into_iter().enumerate() {
                self.exposure[l][op] += epochs * p * n;
            }
        }
    }

    fn deterministic(&self) -> bool {
        self.stand_alone || self.params.settings.noise_sd <= 0.0
    }

    fn training_state(&self) -> Value {
        serde_json::to_value(SurrogateState {
            exposure: self.exposure.clone(),
        })
        .expect("plain data")
    }

    fn restore_training_state(&mut self, state: &Value) -> Result<()> {
        let st: SurrogateState = serde_json::from_value(state.clone())?;
        if st.exposure.len() != self.exposure.len()
            || st
                .exposure
                .iter()
                .zip(&self.exposure)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Config(
                "training state does not match the search space".into(),
            ));
        }
        self.exposure = st.exposure;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Lookup table
// ---------------------------------------------------------------------------

/// What to return for an architecture missing from the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Error,
    Default(f64),
    /// Score of the closest stored architecture by gene-wise Hamming
    /// distance; ties go to the smallest canonical string.
    Nearest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableLine {
    arch: String,
    top1: f64,
}

/// Exact lookup of externally measured accuracies by canonical string.
#[derive(Debug, Clone)]
pub struct TableEvaluator {
    table: HashMap<String, f64>,
    entries: Vec<(String, Architecture, f64)>,
    policy: MissingPolicy,
}

impl TableEvaluator {
    pub fn new(
        entries: impl IntoIterator<Item = (Architecture, f64)>,
        policy: MissingPolicy,
    ) -> Self {
        let mut table = HashMap::new();
        let mut list: Vec<(String, Architecture, f64)> = Vec::new();
        for (arch, score) in entries {
            let key = arch.canonical();
            if table.insert(key.clone(), score).is_none() {
                list.push((key, arch, score));
            } else if let Some(e) = list.iter_mut().find(|e| e.0 == key) {
                e.2 = score;
            }
        }
        list.sort_by(|a, b| a.0.cmp(&b.0));
        Self {
            table,
            entries: list,
            policy,
        }
    }

    /// Loads JSONL lines of `{"arch": "<canonical>", "top1": <real>}`.
    pub fn load(path: &Path, policy: MissingPolicy) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: TableLine = serde_json::from_str(line)?;
            entries.push((row.arch.parse()?, row.top1));
        }
        Ok(Self::new(entries, policy))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn lookup(&self, arch: &Architecture) -> Result<f64> {
        let key = arch.canonical();
        if let Some(&v) = self.table.get(&key) {
            return Ok(v);
        }
        match &self.policy {
            MissingPolicy::Error => Err(Error::MissingArchitecture(key)),
            MissingPolicy::Default(v) => Ok(*v),
            MissingPolicy::Nearest => self
                .entries
                .iter()
                .map(|(_, a, s)| (hamming(a, arch), *s))
                .min_by_key(|&(d, _)| d)
                .map(|(_, s)| s)
                .ok_or(Error::MissingArchitecture(key)),
        }
    }
}

fn hamming(a: &Architecture, b: &Architecture) -> usize {
    let layers = a
        .layer_genes
        .iter()
        .zip(&b.layer_genes)
        .filter(|(x, y)| x != y)
        .count();
    let clusters = a
        .cluster_genes
        .iter()
        .zip(&b.cluster_genes)
        .filter(|(x, y)| x != y)
        .count();
    let len_diff = a.layer_genes.len().abs_diff(b.layer_genes.len())
        + a.cluster_genes.len().abs_diff(b.cluster_genes.len());
    layers + clusters + len_diff
}

impl Evaluator for TableEvaluator {
    fn name(&self) -> &str {
        "table"
    }

    fn evaluate(&self, arch: &Architecture, _rng: &mut dyn RngCore) -> Result<f64> {
        self.lookup(arch)
    }

    fn deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration
// ---------------------------------------------------------------------------

/// Every alive-respecting architecture, in a fixed order.
pub fn enumerate_alive(space: &SearchSpaceSpec, graph: &OperationGraph) -> Vec<Architecture> {
    // per cluster: every admissible assignment of ops to its layers
    let per_cluster: Vec<Vec<Vec<usize>>> = (0..space.clusters().len())
        .map(|c| {
            let layers: Vec<usize> = space.cluster_layers(c).collect();
            let mut out = Vec::new();
            for ch in graph.feasible_channels(c) {
                let options: Vec<Vec<usize>> = layers
                    .iter()
                    .map(|&l| graph.alive_ops_with_channel(l, ch))
                    .collect();
                let mut idx = vec![0usize; layers.len()];
                loop {
                    out.push(idx.iter().zip(&options).map(|(&i, o)| o[i]).collect());
                    if !advance(&mut idx, &options.iter().map(Vec::len).collect::<Vec<_>>()) {
                        break;
                    }
                }
            }
            out
        })
        .collect();
    let sizes: Vec<usize> = per_cluster.iter().map(Vec::len).collect();
    if sizes.contains(&0) {
        return Vec::new();
    }
    let mut idx = vec![0usize; per_cluster.len()];
    let mut out = Vec::new();
    loop {
        let ops: Vec<usize> = idx
            .iter()
            .zip(&per_cluster)
            .flat_map(|(&i, p)| p[i].iter().copied())
            .collect();
        out.push(space.arch_from_ops(&ops));
        if !advance(&mut idx, &sizes) {
            break;
        }
    }
    out
}

/// Odometer increment, last position fastest. Returns false on wrap-around.
fn advance(idx: &mut [usize], sizes: &[usize]) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < sizes[i] {
            return true;
        }
        idx[i] = 0;
    }
    false
}

/// Best architecture of the alive space by exhaustive evaluation; ties go to
/// the smallest canonical string. Refuses spaces larger than `limit`.
pub fn brute_force_best(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    evaluator: &dyn Evaluator,
    limit: u64,
) -> Result<(Architecture, f64)> {
    graph.check_invariants()?;
    let count = graph.alive_cardinality();
    if count > BigUint::from(limit) {
        return Err(Error::CardinalityOverLimit { count, limit });
    }
    let mut noise = StreamRng::new(0, "oracle");
    let mut best: Option<(Architecture, String, f64)> = None;
    for arch in enumerate_alive(space, graph) {
        let score = evaluator.evaluate(&arch, &mut noise)?;
        let key = arch.canonical();
        let better = match &best {
            None => true,
            Some((_, k, s)) => score > *s || (score == *s && key < *k),
        };
        if better {
            best = Some((arch, key, score));
        }
    }
    best.map(|(a, _, s)| (a, s))
        .ok_or_else(|| Error::Infeasible("alive space is empty".into()))
}

/// Draws `n` alive architectures and scores them; used by reports.
pub fn sample_and_score<R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    evaluator: &dyn Evaluator,
    n: usize,
    sampling: &mut R,
    noise: &mut StreamRng,
    workers: &Workers,
) -> Result<Vec<EvalRecord>> {
    let archs = (0..n)
        .map(|_| space.random_architecture(sampling, Some(graph)))
        .collect::<Result<Vec<_>>>()?;
    let scores = evaluate_batch(evaluator, &archs, noise, workers)?;
    Ok(archs
        .into_iter()
        .zip(scores)
        .map(|(a, s)| EvalRecord::new(a, s))
        .collect())
}
