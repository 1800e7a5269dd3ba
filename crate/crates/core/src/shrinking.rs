//! Turn-off-operations machinery: the liveness graph, fair evaluation
//! batches, per-operation retention scores, and the step-shrinking driver.
//!
//! An operation of a layer is a (kernel, expansion, channel) triple, the
//! channel being the width its cluster runs at. A batch of `N_r · M`
//! architectures is drawn so that every alive operation is used an almost
//! equal number of times, the batch is evaluated and ranked, and each alive
//! operation is scored by
//!
//! ```text
//! R = (N_top − N_bottom) / N
//! ```
//!
//! where `N_top`/`N_bottom` count its occurrences among the best/worst
//! `⌊B/3⌋` architectures and `N` its occurrences in the whole batch. Each
//! layer then keeps at most `N_r` operations with positive score.

use std::cmp::Ordering;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::evaluator::{evaluate_batch, sort_records, EvalRecord, Evaluator, Workers};
use crate::events::{EvalEvent, EventSink, LayerEvent, Phase};
use crate::rng::{labels, StreamRng, StreamState};
use crate::space::{Architecture, OpTriple, SearchSpaceSpec};
use crate::{Error, Result};

/// Which operations of the supernet are still switched on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationGraph {
    cluster_of: Vec<usize>,
    pair_count: Vec<usize>,
    channel_count: Vec<usize>,
    alive: Vec<Vec<bool>>,
    usage_counts: Vec<Vec<u64>>,
    step_index: usize,
}

impl OperationGraph {
    /// Fully alive graph over `space`.
    pub fn new(space: &SearchSpaceSpec) -> Self {
        let h = space.layer_count();
        let cluster_of = space.layers().iter().map(|l| l.cluster).collect();
        let pair_count = (0..h)
            .map(|l| space.layer_choices(l).pair_count())
            .collect();
        let channel_count = (0..h).map(|l| space.layer_channels(l).len()).collect();
        let alive = (0..h).map(|l| vec![true; space.op_count(l)]).collect();
        let usage_counts = (0..h).map(|l| vec![0; space.op_count(l)]).collect();
        Self {
            cluster_of,
            pair_count,
            channel_count,
            alive,
            usage_counts,
            step_index: 0,
        }
    }

    /// True when this graph was built over a space with the same layout.
    pub fn matches(&self, space: &SearchSpaceSpec) -> bool {
        let fresh = Self::new(space);
        self.cluster_of == fresh.cluster_of
            && self.pair_count == fresh.pair_count
            && self.channel_count == fresh.channel_count
            && self
                .alive
                .iter()
                .zip(&fresh.alive)
                .all(|(a, b)| a.len() == b.len())
            && self
                .usage_counts
                .iter()
                .zip(&fresh.usage_counts)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn layer_count(&self) -> usize {
        self.alive.len()
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_of.last().map_or(0, |c| c + 1)
    }

    pub fn op_count(&self, layer: usize) -> usize {
        self.alive[layer].len()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_alive(&self, layer: usize, op: usize) -> bool {
        self.alive[layer].get(op).copied().unwrap_or(false)
    }

    pub fn alive_mask(&self, layer: usize) -> &[bool] {
        &self.alive[layer]
    }

    pub fn usage(&self, layer: usize, op: usize) -> u64 {
        self.usage_counts[layer][op]
    }

    pub fn usage_counts(&self) -> &[Vec<u64>] {
        &self.usage_counts
    }

    pub fn alive_ops(&self, layer: usize) -> Vec<usize> {
        (0..self.op_count(layer))
            .filter(|&i| self.alive[layer][i])
            .collect()
    }

    pub fn alive_count(&self, layer: usize) -> usize {
        self.alive[layer].iter().filter(|&&a| a).count()
    }

    /// Alive operations of `layer` running at channel index `channel`.
    pub fn alive_ops_with_channel(&self, layer: usize, channel: usize) -> Vec<usize> {
        (0..self.pair_count[layer])
            .map(|p| p * self.channel_count[layer] + channel)
            .filter(|&i| self.alive[layer][i])
            .collect()
    }

    pub fn cluster_layers(&self, cluster: usize) -> Vec<usize> {
        (0..self.layer_count())
            .filter(|&l| self.cluster_of[l] == cluster)
            .collect()
    }

    /// Channel indices with at least one alive operation in every layer of the cluster.
    pub fn feasible_channels(&self, cluster: usize) -> Vec<usize> {
        let layers = self.cluster_layers(cluster);
        let Some(&first) = layers.first() else {
            return Vec::new();
        };
        (0..self.channel_count[first])
            .filter(|&c| {
                layers
                    .iter()
                    .all(|&l| !self.alive_ops_with_channel(l, c).is_empty())
            })
            .collect()
    }

    /// Every layer has an alive operation and every cluster a feasible channel.
    pub fn check_invariants(&self) -> Result<()> {
        for l in 0..self.layer_count() {
            if self.alive_count(l) == 0 {
                return Err(Error::Infeasible(format!(
                    "layer {l} has no alive operation"
                )));
            }
        }
        for c in 0..self.cluster_count() {
            if self.feasible_channels(c).is_empty() {
                return Err(Error::Infeasible(format!(
                    "cluster {c} has no feasible channel"
                )));
            }
        }
        Ok(())
    }

    /// Probability of each operation of `layer` under fair sampling: the
    /// channel is uniform over the cluster's feasible channels and the
    /// (kernel, expansion) pair uniform over the pairs alive at that channel.
    pub fn sampling_probabilities(&self, layer: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.op_count(layer)];
        let feasible = self.feasible_channels(self.cluster_of[layer]);
        for &c in &feasible {
            let ops = self.alive_ops_with_channel(layer, c);
            for &op in &ops {
                p[op] = 1.0 / (feasible.len() as f64 * ops.len() as f64);
            }
        }
        p
    }

    pub fn record_usage(&mut self, space: &SearchSpaceSpec, batch: &[Architecture]) {
        for arch in batch {
            for (l, op) in space.arch_ops(arch).into_iter().enumerate() {
                self.usage_counts[l][op] += 1;
            }
        }
    }

    /// Number of alive-respecting architectures.
    pub fn alive_cardinality(&self) -> BigUint {
        let mut total = BigUint::from(1u32);
        for c in 0..self.cluster_count() {
            let layers = self.cluster_layers(c);
            let mut per_cluster = BigUint::from(0u32);
            for ch in self.feasible_channels(c) {
                let mut n = BigUint::from(1u32);
                for &l in &layers {
                    n *= self.alive_ops_with_channel(l, ch).len();
                }
                per_cluster += n;
            }
            total *= per_cluster;
        }
        total
    }

    /// Every alive operation of `self` is alive in `other`.
    pub fn is_subset_of(&self, other: &OperationGraph) -> bool {
        self.alive.len() == other.alive.len()
            && self
                .alive
                .iter()
                .zip(&other.alive)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    /// Directly sets a layer's alive mask. The caller is responsible for
    /// keeping the graph's invariants.
    pub fn set_alive(&mut self, layer: usize, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.op_count(layer));
        self.alive[layer] = mask;
    }
}

/// Step-shrinking schedule: stage-one epochs, epochs between steps, the
/// retention target `N_r` of each scoring round, and the test factor `M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShrinkSchedule {
    pub t_first: u32,
    pub t_interval: u32,
    pub retention: Vec<usize>,
    pub test_factor: usize,
}

impl Default for ShrinkSchedule {
    fn default() -> Self {
        Self {
            t_first: 120,
            t_interval: 40,
            retention: vec![18, 9, 5, 3],
            test_factor: 200,
        }
    }
}

impl ShrinkSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.retention.is_empty() || self.retention.contains(&0) {
            return Err(Error::Config(
                "retention must be a non-empty list of positive counts".into(),
            ));
        }
        if self.retention.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(
                "retention must be strictly decreasing".into(),
            ));
        }
        if self.test_factor == 0 {
            return Err(Error::Config("test_factor must be ≥ 1".into()));
        }
        if self.batch_size(self.rounds() - 1) < 3 {
            return Err(Error::Config(
                "every batch needs at least 3 architectures".into(),
            ));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.retention.len()
    }

    pub fn batch_size(&self, round: usize) -> usize {
        self.retention[round] * self.test_factor
    }

    /// Virtual epochs trained before scoring round `round`.
    pub fn epochs_before(&self, round: usize) -> u32 {
        if round == 0 {
            self.t_first
        } else {
            self.t_interval
        }
    }

    /// Total virtual epochs over the whole schedule.
    pub fn total_epochs(&self) -> u32 {
        self.t_first + self.t_interval * (self.rounds() as u32 - 1)
    }
}

/// Repeats independently shuffled copies of `items` up to `n` entries, then
/// shuffles the result. Each item occurs ⌊n/|items|⌋ or ⌈n/|items|⌉ times.
fn balanced_assignment<R: Rng + ?Sized>(items: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut cycle = items.to_vec();
        cycle.shuffle(rng);
        let take = (n - out.len()).min(cycle.len());
        out.extend_from_slice(&cycle[..take]);
    }
    out.shuffle(rng);
    out
}

/// Builds a batch of `n_r · m` architectures with balanced operation usage.
///
/// Stage one assigns every feasible channel of a cluster to an almost equal
/// number of batch slots. Stage two, per layer and per channel, spreads the
/// (kernel, expansion) pairs alive at that channel evenly over that
/// channel's slots.
pub fn fair_batch<R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    n_r: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Architecture>> {
    graph.check_invariants()?;
    let b = n_r * m;
    let h = space.layer_count();
    let mut ops = vec![vec![0usize; h]; b];
    for c in 0..space.clusters().len() {
        let feasible = graph.feasible_channels(c);
        let slot_channel = balanced_assignment(&feasible, b, rng);
        for l in space.cluster_layers(c) {
            for &ch in &feasible {
                let slots: Vec<usize> = (0..b).filter(|&s| slot_channel[s] == ch).collect();
                let alive = graph.alive_ops_with_channel(l, ch);
                let assigned = balanced_assignment(&alive, slots.len(), rng);
                for (&s, &op) in slots.iter().zip(&assigned) {
                    ops[s][l] = op;
                }
            }
        }
    }
    Ok(ops.iter().map(|o| space.arch_from_ops(o)).collect())
}

/// Exact retention score `(top − bottom) / total` of one operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionScore {
    pub top: u32,
    pub bottom: u32,
    pub total: u32,
}

impl RetentionScore {
    /// `None` when the operation never occurred (treated as −∞).
    pub fn ratio(&self) -> Option<(i64, i64)> {
        (self.total > 0).then(|| {
            (
                i64::from(self.top) - i64::from(self.bottom),
                i64::from(self.total),
            )
        })
    }

    pub fn value(&self) -> f64 {
        match self.ratio() {
            Some((n, d)) => n as f64 / d as f64,
            None => f64::NEG_INFINITY,
        }
    }

    pub fn is_positive(&self) -> bool {
        matches!(self.ratio(), Some((n, _)) if n > 0)
    }

    /// Exact comparison by cross-multiplication; unsampled operations rank lowest.
    pub fn cmp_exact(&self, other: &Self) -> Ordering {
        match (self.ratio(), other.ratio()) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some((a, b)), Some((c, d))) => (a * d).cmp(&(c * b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOp {
    pub op: usize,
    pub score: RetentionScore,
}

/// Retention scores of every alive operation, per layer in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationScores {
    pub batch_size: usize,
    pub layers: Vec<Vec<ScoredOp>>,
}

/// Scores every alive operation against a batch sorted best-first.
pub fn score_operations(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    batch: &[EvalRecord],
) -> Result<OperationScores> {
    let n = batch.len();
    if n < 3 {
        return Err(Error::Contract(format!(
            "scoring needs at least 3 records, got {n}"
        )));
    }
    if batch.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::Contract(
            "batch is not sorted by score descending".into(),
        ));
    }
    let third = n / 3;
    let h = space.layer_count();
    let mut counts: Vec<Vec<RetentionScore>> = (0..h)
        .map(|l| {
            vec![
                RetentionScore {
                    top: 0,
                    bottom: 0,
                    total: 0
                };
                space.op_count(l)
            ]
        })
        .collect();
    for (pos, rec) in batch.iter().enumerate() {
        for (l, op) in space.arch_ops(&rec.arch).into_iter().enumerate() {
            if !graph.is_alive(l, op) {
                return Err(Error::Contract(format!(
                    "batch record {pos} uses dead operation {} at layer {l}",
                    space.op_triple(l, op)
                )));
            }
            let c = &mut counts[l][op];
            c.total += 1;
            if pos < third {
                c.top += 1;
            }
            if pos >= n - third {
                c.bottom += 1;
            }
        }
    }
    let layers = counts
        .into_iter()
        .enumerate()
        .map(|(l, per_op)| {
            per_op
                .into_iter()
                .enumerate()
                .filter(|&(op, _)| graph.is_alive(l, op))
                .map(|(op, score)| ScoredOp { op, score })
                .collect()
        })
        .collect();
    Ok(OperationScores {
        batch_size: n,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub op: OpTriple,
    pub score: RetentionScore,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub entries: Vec<ReportEntry>,
    /// No operation had a positive score; the single best one was kept.
    pub fallback: bool,
    /// Channel closure emptied the layer and one operation was switched back on.
    pub reinstated: bool,
}

impl LayerReport {
    pub fn kept_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kept).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkReport {
    pub step: usize,
    pub n_r: usize,
    pub batch_size: usize,
    pub layers: Vec<LayerReport>,
    /// Feasible channel widths per cluster after the step.
    pub feasible_channels: Vec<Vec<u32>>,
}

fn rank_ops(scored: &[ScoredOp]) -> Vec<ScoredOp> {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.score.cmp_exact(&a.score).then(a.op.cmp(&b.op)));
    ranked
}

/// Keeps the best `n_r` positively scored operations of every layer (or the
/// single best one if none is positive), then restores cluster feasibility.
///
/// Closure: a cluster may only keep operations at channels that still have a
/// kept operation in every one of its layers. If no channel survives in all
/// layers, the channel present in the most layers (then highest summed best
/// score, then smallest width) is kept, and layers left empty get their best
/// operation at that channel switched back on.
pub fn shrink_step(
    space: &SearchSpaceSpec,
    graph: &OperationGraph,
    scores: &OperationScores,
    n_r: usize,
) -> Result<(OperationGraph, ShrinkReport)> {
    let h = space.layer_count();
    if scores.layers.len() != h {
        return Err(Error::Contract("scores do not cover every layer".into()));
    }
    for (l, scored) in scores.layers.iter().enumerate() {
        let ops: Vec<usize> = scored.iter().map(|s| s.op).collect();
        if ops != graph.alive_ops(l) {
            return Err(Error::Contract(format!(
                "scores of layer {l} do not match its alive operations"
            )));
        }
    }
    let ranked: Vec<Vec<ScoredOp>> = scores.layers.iter().map(|s| rank_ops(s)).collect();
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(h);
    let mut fallback = vec![false; h];
    for (l, r) in ranked.iter().enumerate() {
        let positive: Vec<usize> = r
            .iter()
            .filter(|s| s.score.is_positive())
            .map(|s| s.op)
            .collect();
        if positive.is_empty() {
            kept.push(vec![r[0].op]);
            fallback[l] = true;
        } else {
            kept.push(positive.into_iter().take(n_r).collect());
        }
    }

    let mut reinstated = vec![false; h];
    for c in 0..space.clusters().len() {
        let layers: Vec<usize> = space.cluster_layers(c).collect();
        let n_ch = space.clusters()[c].channel_choices.len();
        let prev_feasible = graph.feasible_channels(c);
        let has =
            |l: usize, ch: usize, kept: &Vec<Vec<usize>>| kept[l].iter().any(|&op| op % n_ch == ch);
        let common: Vec<usize> = prev_feasible
            .iter()
            .copied()
            .filter(|&ch| layers.iter().all(|&l| has(l, ch, &kept)))
            .collect();
        if !common.is_empty() {
            for &l in &layers {
                kept[l].retain(|&op| common.contains(&(op % n_ch)));
            }
            continue;
        }
        let best_value = |l: usize, ch: usize| {
            ranked[l]
                .iter()
                .find(|s| s.op % n_ch == ch)
                .map(|s| s.score.value())
                .filter(|v| v.is_finite())
                .unwrap_or(-2.0)
        };
        let chosen = prev_feasible
            .iter()
            .copied()
            .map(|ch| {
                let present = layers.iter().filter(|&&l| has(l, ch, &kept)).count();
                let sum: f64 = layers.iter().map(|&l| best_value(l, ch)).sum();
                (ch, present, sum)
            })
            .fold(None::<(usize, usize, f64)>, |best, cand| match best {
                None => Some(cand),
                Some(b) => {
                    let better = cand.1 > b.1 || (cand.1 == b.1 && cand.2 > b.2);
                    Some(if better { cand } else { b })
                }
            })
            .map(|(ch, _, _)| ch)
            .ok_or_else(|| {
                Error::Infeasible(format!(
                    "cluster {c} had no feasible channel before the step"
                ))
            })?;
        for &l in &layers {
            kept[l].retain(|&op| op % n_ch == chosen);
            if kept[l].is_empty() {
                let op = ranked[l]
                    .iter()
                    .find(|s| s.op % n_ch == chosen)
                    .map(|s| s.op)
                    .expect("chosen channel was feasible before the step");
                kept[l].push(op);
                reinstated[l] = true;
            }
        }
    }

    let mut next = graph.clone();
    let mut layer_reports = Vec::with_capacity(h);
    for l in 0..h {
        let mut mask = vec![false; space.op_count(l)];
        for &op in &kept[l] {
            mask[op] = true;
        }
        let entries = scores.layers[l]
            .iter()
            .map(|s| ReportEntry {
                op: space.op_triple(l, s.op),
                score: s.score,
                kept: mask[s.op],
            })
            .collect();
        next.alive[l] = mask;
        layer_reports.push(LayerReport {
            layer: l,
            entries,
            fallback: fallback[l],
            reinstated: reinstated[l],
        });
    }
    next.step_index += 1;
    next.check_invariants()?;
    let feasible_channels = (0..space.clusters().len())
        .map(|c| {
            next.feasible_channels(c)
                .into_iter()
                .map(|i| space.clusters()[c].channel_choices[i])
                .collect()
        })
        .collect();
    let report = ShrinkReport {
        step: graph.step_index,
        n_r,
        batch_size: scores.batch_size,
        layers: layer_reports,
        feasible_channels,
    };
    Ok((next, report))
}

/// Resumable state of a shrinking run.
#[derive(Debug, Clone)]
pub struct ShrinkState {
    pub graph: OperationGraph,
    pub next_round: usize,
    pub sampling: StreamRng,
    pub noise: StreamRng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkCheckpoint {
    pub graph: OperationGraph,
    pub next_round: usize,
    pub sampling: StreamState,
    pub noise: StreamState,
}

impl ShrinkState {
    pub fn new(space: &SearchSpaceSpec, seed: u64) -> Self {
        Self {
            graph: OperationGraph::new(space),
            next_round: 0,
            sampling: StreamRng::new(seed, labels::SHRINK_SAMPLING),
            noise: StreamRng::new(seed, labels::SHRINK_NOISE),
        }
    }

    pub fn checkpoint(&self) -> ShrinkCheckpoint {
        ShrinkCheckpoint {
            graph: self.graph.clone(),
            next_round: self.next_round,
            sampling: self.sampling.state(),
            noise: self.noise.state(),
        }
    }

    pub fn from_checkpoint(cp: &ShrinkCheckpoint) -> Result<Self> {
        Ok(Self {
            graph: cp.graph.clone(),
            next_round: cp.next_round,
            sampling: StreamRng::from_state(&cp.sampling)?,
            noise: StreamRng::from_state(&cp.noise)?,
        })
    }

    pub fn is_done(&self, schedule: &ShrinkSchedule) -> bool {
        self.next_round >= schedule.rounds()
    }
}

/// Trains for the epochs preceding the next round, then draws a fair batch,
/// evaluates and ranks it, scores operations and shrinks the graph.
pub fn run_round(
    space: &SearchSpaceSpec,
    schedule: &ShrinkSchedule,
    state: &mut ShrinkState,
    evaluator: &mut dyn Evaluator,
    sink: &mut dyn EventSink,
    workers: &Workers,
) -> Result<ShrinkReport> {
    let round = state.next_round;
    let n_r = *schedule
        .retention
        .get(round)
        .ok_or_else(|| Error::Contract(format!("schedule has no round {round}")))?;
    evaluator.notify_training(&state.graph, f64::from(schedule.epochs_before(round)));
    let batch = fair_batch(
        space,
        &state.graph,
        n_r,
        schedule.test_factor,
        &mut state.sampling,
    )?;
    let scores = evaluate_batch(evaluator, &batch, &mut state.noise, workers)?;
    let mut records: Vec<EvalRecord> = batch
        .into_iter()
        .zip(scores)
        .map(|(arch, score)| EvalRecord::new(arch, score))
        .collect();
    for (slot, r) in records.iter().enumerate() {
        sink.eval(&EvalEvent::new(Phase::Shrink, round, slot, r))?;
    }
    let mut graph = state.graph.clone();
    graph.record_usage(
        space,
        &records.iter().map(|r| r.arch.clone()).collect::<Vec<_>>(),
    );
    sort_records(&mut records);
    let op_scores = score_operations(space, &graph, &records)?;
    let (next, report) = shrink_step(space, &graph, &op_scores, n_r)?;
    for lr in &report.layers {
        sink.layer(&LayerEvent::from_report(&report, lr))?;
    }
    state.graph = next;
    state.next_round += 1;
    Ok(report)
}

/// Runs the whole schedule from a fresh graph.
pub fn run_shrinking(
    space: &SearchSpaceSpec,
    schedule: &ShrinkSchedule,
    evaluator: &mut dyn Evaluator,
    seed: u64,
    sink: &mut dyn EventSink,
    workers: &Workers,
) -> Result<(OperationGraph, Vec<ShrinkReport>)> {
    schedule.validate()?;
    let mut state = ShrinkState::new(space, seed);
    let mut reports = Vec::with_capacity(schedule.rounds());
    while !state.is_done(schedule) {
        reports.push(run_round(
            space, schedule, &mut state, evaluator, sink, workers,
        )?);
    }
    Ok((state.graph, reports))
}
