//! Offline analyses: accuracy distributions of architectures sampled from
//! shrunk graphs, and rank correlation between supernet estimates and true
//! fitness.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evaluator::{sample_and_score, Evaluator, Workers};
use crate::rng::{labels, StreamRng};
use crate::shrinking::OperationGraph;
use crate::space::{Architecture, SearchSpaceSpec};
use crate::stats;
use crate::{Error, Result};

/// A graph together with the evaluator's training state at that point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphCheckpoint {
    /// Shrink steps applied to `graph`; 0 is the unshrunk graph.
    pub step: usize,
    pub virtual_epochs: f64,
    pub graph: OperationGraph,
    pub evaluator_state: Value,
}

impl GraphCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub step: usize,
    pub sample_index: usize,
    pub arch: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub samples: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistributionReport {
    pub rows: Vec<DistributionRow>,
    pub summaries: Vec<StepSummary>,
    /// Checkpoints skipped because their graph is infeasible, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl DistributionReport {
    pub fn summary(&self, step: usize) -> Option<&StepSummary> {
        self.summaries.iter().find(|s| s.step == step)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "sample_index", "arch", "score"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.serialize((r.step, r.sample_index, &r.arch, r.score))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Samples `n_samples` alive architectures from every checkpoint and scores
/// them with the evaluator restored to that checkpoint's training state.
pub fn distribution_report(
    space: &SearchSpaceSpec,
    checkpoints: &[GraphCheckpoint],
    evaluator: &mut dyn Evaluator,
    n_samples: usize,
    seed: u64,
    workers: &Workers,
) -> Result<DistributionReport> {
    if checkpoints.is_empty() {
        return Err(Error::Config(
            "distribution report needs at least one checkpoint".into(),
        ));
    }
    let mut sampling = StreamRng::new(seed, labels::REPORT_SAMPLING);
    let mut noise = StreamRng::new(seed, labels::REPORT_NOISE);
    let mut report = DistributionReport::default();
    for cp in checkpoints {
        if !cp.graph.matches(space) {
            return Err(Error::Config(format!(
                "checkpoint of step {} does not match the search space",
                cp.step
            )));
        }
        if let Err(e) = cp.graph.check_invariants() {
            report.skipped.push((cp.step, e.to_string()));
            continue;
        }
        evaluator.restore_training_state(&cp.evaluator_state)?;
        let records = sample_and_score(
            space,
            &cp.graph,
            evaluator,
            n_samples,
            &mut sampling,
            &mut noise,
            workers,
        )?;
        if !records.is_empty() {
            let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
            report.summaries.push(StepSummary {
                step: cp.step,
                samples: scores.len(),
                mean: scores.iter().sum::<f64>() / scores.len() as f64,
                min: scores.iter().copied().fold(f64::INFINITY, f64::min),
                max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        report.rows.extend(
            records
                .into_iter()
                .enumerate()
                .map(|(i, r)| DistributionRow {
                    step: cp.step,
                    sample_index: i,
                    arch: r.arch.canonical(),
                    score: r.score,
                }),
        );
    }
    Ok(report)
}

/// The unshrunk graph after `epochs` of fair training, for comparison with
/// shrunk checkpoints of the same budget. `evaluator` must be untrained.
pub fn no_shrink_control(
    space: &SearchSpaceSpec,
    evaluator: &mut dyn Evaluator,
    epochs: f64,
) -> GraphCheckpoint {
    let graph = OperationGraph::new(space);
    evaluator.notify_training(&graph, epochs);
    GraphCheckpoint {
        step: 0,
        virtual_epochs: epochs,
        graph,
        evaluator_state: evaluator.training_state(),
    }
}

/// How the architectures entering a rank correlation are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The `top_n` best estimates.
    #[default]
    Top,
    /// `top_n` estimates at evenly spaced ranks, best and worst included.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub arch: String,
    pub estimate: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelationReport {
    pub selection: Selection,
    pub rows: Vec<RankRow>,
    pub spearman: Option<f64>,
    pub kendall_tau_b: Option<f64>,
}

impl RankCorrelationReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arch", "estimate", "truth"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.serialize((&r.arch, r.estimate, r.truth))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Picks architectures with pairwise distinct estimates (first occurrence of
/// an architecture wins) and correlates their estimates with `truth`.
pub fn rank_correlation(
    evals: &[(Architecture, f64)],
    truth: &mut dyn FnMut(&Architecture) -> Result<f64>,
    top_n: usize,
    selection: Selection,
) -> Result<RankCorrelationReport> {
    let mut seen_arch = HashSet::new();
    let mut seen_score = HashSet::new();
    let mut pool: Vec<&(Architecture, f64)> = Vec::new();
    for e in evals {
        if seen_arch.insert(e.0.canonical()) {
            pool.push(e);
        }
    }
    pool.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.canonical().cmp(&b.0.canonical()))
    });
    pool.retain(|e| seen_score.insert(e.1.to_bits()));
    if pool.len() < 3 {
        return Err(Error::Config(format!(
            "rank correlation needs at least 3 architectures with distinct scores, got {}",
            pool.len()
        )));
    }
    let n = top_n.min(pool.len());
    if n < 3 {
        return Err(Error::Config("top_n must be at least 3".into()));
    }
    let picked: Vec<&(Architecture, f64)> = match selection {
        Selection::Top => pool[..n].to_vec(),
        Selection::Spread => (0..n)
            .map(|i| pool[i * (pool.len() - 1) / (n - 1)])
            .collect(),
    };
    let mut rows = Vec::with_capacity(n);
    for (arch, estimate) in picked {
        rows.push(RankRow {
            arch: arch.canonical(),
            estimate: *estimate,
            truth: truth(arch)?,
        });
    }
    let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let tru: Vec<f64> = rows.iter().map(|r| r.truth).collect();
    Ok(RankCorrelationReport {
        selection,
        spearman: stats::spearman(&est, &tru),
        kendall_tau_b: stats::kendall_tau_b(&est, &tru),
        rows,
    })
}
