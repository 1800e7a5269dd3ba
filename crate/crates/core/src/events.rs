//! JSONL event streams.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::evaluator::EvalRecord;
use crate::shrinking::{LayerReport, ShrinkReport};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Shrink,
    Evolve,
}

/// One architecture evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub phase: Phase,
    /// Shrink round or evolution iteration (0 = initial population).
    pub round: usize,
    pub slot: usize,
    pub arch: String,
    pub score: f64,
}

impl EvalEvent {
    pub fn new(phase: Phase, round: usize, slot: usize, rec: &EvalRecord) -> Self {
        Self {
            phase,
            round,
            slot,
            arch: rec.arch.canonical(),
            score: rec.score,
        }
    }
}

/// String-keyed map serialized in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedMap<V>(pub Vec<(String, V)>);

impl<V: Serialize> Serialize for OrderedMap<V> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

/// Retention decision for one layer at one shrink step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEvent {
    pub step: usize,
    pub layer: usize,
    pub n_r: usize,
    pub batch_size: usize,
    pub kept: Vec<String>,
    /// `null` for operations that never occurred in the batch.
    pub ri: OrderedMap<Option<f64>>,
    /// `[N_top, N_bottom, N_total]` per operation.
    pub counts: OrderedMap<[u32; 3]>,
    pub fallback: bool,
    pub reinstated: bool,
}

impl LayerEvent {
    pub fn from_report(report: &ShrinkReport, layer: &LayerReport) -> Self {
        let kept = layer
            .entries
            .iter()
            .filter(|e| e.kept)
            .map(|e| e.op.to_string())
            .collect();
        let ri = layer
            .entries
            .iter()
            .map(|e| (e.op.to_string(), e.score.ratio().map(|_| e.score.value())))
            .collect();
        let counts = layer
            .entries
            .iter()
            .map(|e| {
                (
                    e.op.to_string(),
                    [e.score.top, e.score.bottom, e.score.total],
                )
            })
            .collect();
        Self {
            step: report.step,
            layer: layer.layer,
            n_r: report.n_r,
            batch_size: report.batch_size,
            kept,
            ri: OrderedMap(ri),
            counts: OrderedMap(counts),
            fallback: layer.fallback,
            reinstated: layer.reinstated,
        }
    }
}

/// Summary of one evolution iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEvent {
    pub iteration: usize,
    pub evaluated: usize,
    pub members: usize,
    pub mean_score: f64,
    pub best_score: f64,
    pub best_arch: String,
    pub total_evaluations: usize,
}

pub trait EventSink {
    fn eval(&mut self, event: &EvalEvent) -> Result<()>;
    fn layer(&mut self, event: &LayerEvent) -> Result<()>;
    fn iteration(&mut self, event: &IterationEvent) -> Result<()>;
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn eval(&mut self, _: &EvalEvent) -> Result<()> {
        Ok(())
    }
    fn layer(&mut self, _: &LayerEvent) -> Result<()> {
        Ok(())
    }
    fn iteration(&mut self, _: &IterationEvent) -> Result<()> {
        Ok(())
    }
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub evals: Vec<EvalEvent>,
    pub layers: Vec<LayerEvent>,
    pub iterations: Vec<IterationEvent>,
}

impl EventSink for MemorySink {
    fn eval(&mut self, event: &EvalEvent) -> Result<()> {
        self.evals.push(event.clone());
        Ok(())
    }
    fn layer(&mut self, event: &LayerEvent) -> Result<()> {
        self.layers.push(event.clone());
        Ok(())
    }
    fn iteration(&mut self, event: &IterationEvent) -> Result<()> {
        self.iterations.push(event.clone());
        Ok(())
    }
}

pub const EVALS_FILE: &str = "evals.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const EVOLUTION_FILE: &str = "evolution.jsonl";

/// Byte lengths of the three streams at a checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOffsets {
    pub evals: u64,
    pub reports: u64,
    pub evolution: u64,
}

/// Writes evaluations, shrink reports and iteration summaries to
/// `evals.jsonl`, `reports.jsonl` and `evolution.jsonl` in a directory.
pub struct JsonlSink {
    dir: PathBuf,
    evals: BufWriter<File>,
    reports: BufWriter<File>,
    evolution: BufWriter<File>,
}

fn open_at(path: &Path, offset: Option<u64>) -> Result<BufWriter<File>> {
    let file = match offset {
        None => File::create(path)?,
        Some(len) => {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(false)
                .open(path)?;
            f.set_len(len)?;
            drop(f);
            OpenOptions::new().append(true).open(path)?
        }
    };
    Ok(BufWriter::new(file))
}

impl JsonlSink {
    /// Creates (truncating) the three stream files.
    pub fn create(dir: &Path) -> Result<Self> {
        Self::open(dir, None)
    }

    /// Reopens the streams truncated to a checkpoint's offsets.
    pub fn resume(dir: &Path, offsets: StreamOffsets) -> Result<Self> {
        Self::open(dir, Some(offsets))
    }

    fn open(dir: &Path, offsets: Option<StreamOffsets>) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            evals: open_at(&dir.join(EVALS_FILE), offsets.map(|o| o.evals))?,
            reports: open_at(&dir.join(REPORTS_FILE), offsets.map(|o| o.reports))?,
            evolution: open_at(&dir.join(EVOLUTION_FILE), offsets.map(|o| o.evolution))?,
        })
    }

    /// Flushes and returns the current stream lengths.
    pub fn offsets(&mut self) -> Result<StreamOffsets> {
        self.flush()?;
        let len = |name: &str| -> Result<u64> { Ok(std::fs::metadata(self.dir.join(name))?.len()) };
        Ok(StreamOffsets {
            evals: len(EVALS_FILE)?,
            reports: len(REPORTS_FILE)?,
            evolution: len(EVOLUTION_FILE)?,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.evals.flush()?;
        self.reports.flush()?;
        self.evolution.flush()?;
        Ok(())
    }
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

impl EventSink for JsonlSink {
    fn eval(&mut self, event: &EvalEvent) -> Result<()> {
        write_line(&mut self.evals, event)
    }
    fn layer(&mut self, event: &LayerEvent) -> Result<()> {
        write_line(&mut self.reports, event)
    }
    fn iteration(&mut self, event: &IterationEvent) -> Result<()> {
        write_line(&mut self.evolution, event)
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads `evals.jsonl`.
pub fn read_evals(path: &Path) -> Result<Vec<EvalEvent>> {
    if !path.exists() {
        return Err(crate::Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
