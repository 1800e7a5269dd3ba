//! Channel-searchable supernet search space.
//!
//! A space is a fixed stem, a sequence of clusters of inverted-residual
//! blocks, and a fixed tail. Every block searches its kernel size and
//! expansion ratio; every cluster searches one output-channel width shared by
//! all of its blocks. The last block of each cluster is the spring block: in
//! supernet mode its output is pinned to the cluster's widest choice, so the
//! next cluster's head always sees a known input width regardless of which
//! width was sampled upstream. Releasing an architecture relaxes every spring
//! output to the chosen width, giving a plain stand-alone network.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::shrinking::OperationGraph;
use crate::{Error, Result};

pub const DEFAULT_CHANNEL_QUANTUM: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supernet,
    Released,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supernet" => Ok(Mode::Supernet),
            "released" => Ok(Mode::Released),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Kernel and expansion choices of one searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSets {
    pub kernels: Vec<u32>,
    pub expansions: Vec<u32>,
}

impl ChoiceSets {
    pub fn pair_count(&self) -> usize {
        self.kernels.len() * self.expansions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub block_count: u32,
    /// Stride of the cluster's first block; all others use stride 1.
    pub stride: u32,
    pub channel_choices: Vec<u32>,
    /// Spatial side of the cluster head's input.
    pub input_resolution: u32,
}

impl ClusterSpec {
    /// Output width of the spring block while searching.
    pub fn spring_output(&self) -> u32 {
        *self.channel_choices.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedOp {
    Conv,
    /// Depthwise k×k followed by a pointwise projection.
    Separable,
    AvgPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedLayer {
    pub op: FixedOp,
    pub kernel: u32,
    pub stride: u32,
    /// `None` for pooling, which keeps its input width.
    pub out_channels: Option<u32>,
}

impl FixedLayer {
    pub fn conv(kernel: u32, stride: u32, out: u32) -> Self {
        Self {
            op: FixedOp::Conv,
            kernel,
            stride,
            out_channels: Some(out),
        }
    }

    pub fn separable(kernel: u32, stride: u32, out: u32) -> Self {
        Self {
            op: FixedOp::Separable,
            kernel,
            stride,
            out_channels: Some(out),
        }
    }

    pub fn avg_pool(kernel: u32) -> Self {
        Self {
            op: FixedOp::AvgPool,
            kernel,
            stride: kernel,
            out_channels: None,
        }
    }

    /// Output spatial side. Convolutions use "same" padding `k / 2`, pooling
    /// uses none.
    pub fn output_side(&self, side: u32) -> u32 {
        match self.op {
            FixedOp::AvgPool => conv_output_side(side, self.kernel, self.stride, 0),
            _ => conv_output_side(side, self.kernel, self.stride, self.kernel / 2),
        }
    }
}

/// `floor((side + 2·pad − k) / stride) + 1`.
pub fn conv_output_side(side: u32, kernel: u32, stride: u32, pad: u32) -> u32 {
    (side + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Position of a searchable layer within the space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub cluster: usize,
    pub position: usize,
    pub stride: u32,
    pub is_head: bool,
    pub is_spring: bool,
    pub input_side: u32,
}

/// Searchable (kernel, expansion) gene of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerGene {
    pub kernel: u32,
    pub expansion: u32,
}

impl LayerGene {
    pub fn new(kernel: u32, expansion: u32) -> Self {
        Self { kernel, expansion }
    }
}

/// One candidate operation of a layer: its gene plus the cluster width it runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpTriple {
    pub kernel: u32,
    pub expansion: u32,
    pub channel: u32,
}

impl fmt::Display for OpTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}t{}c{}", self.kernel, self.expansion, self.channel)
    }
}

/// A concrete model: one (kernel, expansion) gene per layer and one channel
/// width per cluster.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_genes: Vec<LayerGene>,
    pub cluster_genes: Vec<u32>,
    pub mode: Mode,
}

impl Architecture {
    pub fn new(layer_genes: Vec<LayerGene>, cluster_genes: Vec<u32>) -> Self {
        Self {
            layer_genes,
            cluster_genes,
            mode: Mode::Supernet,
        }
    }

    /// Canonical identity string, e.g. `k3t6|k5t3#c24|c40`. Mode is not part
    /// of the identity.
    pub fn canonical(&self) -> String {
        let layers: Vec<String> = self
            .layer_genes
            .iter()
            .map(|g| format!("k{}t{}", g.kernel, g.expansion))
            .collect();
        let clusters: Vec<String> = self.cluster_genes.iter().map(|c| format!("c{c}")).collect();
        format!("{}#{}", layers.join("|"), clusters.join("|"))
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Parse(format!("{s:?}: {why}"));
        let (layers, clusters) = s.trim().split_once('#').ok_or_else(|| bad("missing '#'"))?;
        let layer_genes = layers
            .split('|')
            .map(|tok| {
                let rest = tok
                    .strip_prefix('k')
                    .ok_or_else(|| bad("layer gene must start with 'k'"))?;
                let (k, t) = rest
                    .split_once('t')
                    .ok_or_else(|| bad("layer gene needs 't'"))?;
                Ok(LayerGene {
                    kernel: k.parse().map_err(|_| bad("bad kernel"))?,
                    expansion: t.parse().map_err(|_| bad("bad expansion"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cluster_genes = clusters
            .split('|')
            .map(|tok| {
                tok.strip_prefix('c')
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad("cluster gene must look like c<width>"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Architecture::new(layer_genes, cluster_genes))
    }
}

/// A single broken invariant of an architecture against a space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LayerCount {
        expected: usize,
        found: usize,
    },
    ClusterCount {
        expected: usize,
        found: usize,
    },
    Kernel {
        layer: usize,
        value: u32,
        allowed: Vec<u32>,
    },
    Expansion {
        layer: usize,
        value: u32,
        allowed: Vec<u32>,
    },
    Channel {
        cluster: usize,
        value: u32,
        allowed: Vec<u32>,
    },
    DeadOperation {
        layer: usize,
        op: OpTriple,
    },
    InfeasibleChannel {
        cluster: usize,
        value: u32,
    },
}

fn fmt_set(v: &[u32]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LayerCount { expected, found } => {
                write!(
                    f,
                    "length mismatch: {found} layer genes, expected {expected}"
                )
            }
            Violation::ClusterCount { expected, found } => {
                write!(
                    f,
                    "length mismatch: {found} cluster genes, expected {expected}"
                )
            }
            Violation::Kernel {
                layer,
                value,
                allowed,
            } => {
                write!(
                    f,
                    "layer {layer}: kernel {value} not in {}",
                    fmt_set(allowed)
                )
            }
            Violation::Expansion {
                layer,
                value,
                allowed,
            } => {
                write!(
                    f,
                    "layer {layer}: expansion {value} not in {}",
                    fmt_set(allowed)
                )
            }
            Violation::Channel {
                cluster,
                value,
                allowed,
            } => {
                write!(
                    f,
                    "cluster {cluster}: channel {value} not in {}",
                    fmt_set(allowed)
                )
            }
            Violation::DeadOperation { layer, op } => {
                write!(f, "layer {layer}: operation {op} is turned off")
            }
            Violation::InfeasibleChannel { cluster, value } => {
                write!(
                    f,
                    "cluster {cluster}: channel {value} is no longer feasible"
                )
            }
        }
    }
}

/// Raw description of a space, before validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceDef {
    pub input_size: u32,
    pub in_channels: u32,
    pub n_class: u32,
    pub channel_quantum: u32,
    pub stem: Vec<FixedLayer>,
    pub clusters: Vec<ClusterDef>,
    pub tail: Vec<FixedLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterDef {
    pub block_count: u32,
    pub stride: u32,
    pub channel_choices: Vec<u32>,
    pub choices: ChoiceSets,
}

/// Validated, immutable search space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpaceSpec {
    input_size: u32,
    in_channels: u32,
    n_class: u32,
    channel_quantum: u32,
    stem: Vec<FixedLayer>,
    clusters: Vec<ClusterSpec>,
    layer_choices: Vec<ChoiceSets>,
    tail: Vec<FixedLayer>,
    layers: Vec<LayerInfo>,
    stem_output: u32,
}

fn strictly_increasing(v: &[u32]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl SearchSpaceSpec {
    pub fn from_def(def: SpaceDef) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidSpace(m));
        if def.input_size == 0
            || def.in_channels == 0
            || def.n_class == 0
            || def.channel_quantum == 0
        {
            return bad(
                "input_size, in_channels, n_class and channel_quantum must be positive".into(),
            );
        }
        if def.clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        let mut side = def.input_size;
        let mut width = def.in_channels;
        for (i, l) in def.stem.iter().chain(def.tail.iter()).enumerate() {
            if l.kernel == 0 || l.stride == 0 {
                return bad(format!(
                    "fixed layer {i}: kernel and stride must be positive"
                ));
            }
            if l.out_channels == Some(0) {
                return bad(format!("fixed layer {i}: zero output channels"));
            }
        }
        for l in &def.stem {
            if l.op == FixedOp::AvgPool {
                return bad("pooling is only supported in the tail".into());
            }
            side = l.output_side(side);
            width = l.out_channels.unwrap_or(width);
        }
        let stem_output = width;

        let mut clusters = Vec::with_capacity(def.clusters.len());
        let mut layer_choices = Vec::new();
        let mut layers = Vec::new();
        for (ci, c) in def.clusters.iter().enumerate() {
            if c.block_count == 0 {
                return bad(format!("cluster {ci}: block_count must be ≥ 1"));
            }
            if c.stride != 1 && c.stride != 2 {
                return bad(format!("cluster {ci}: stride must be 1 or 2"));
            }
            if c.channel_choices.is_empty() || !strictly_increasing(&c.channel_choices) {
                return bad(format!(
                    "cluster {ci}: channel choices must be non-empty and strictly increasing"
                ));
            }
            if let Some(ch) = c
                .channel_choices
                .iter()
                .find(|&&ch| ch == 0 || ch % def.channel_quantum != 0)
            {
                return bad(format!(
                    "cluster {ci}: channel {ch} is not a positive multiple of {}",
                    def.channel_quantum
                ));
            }
            let k = &c.choices.kernels;
            let t = &c.choices.expansions;
            if k.is_empty() || !strictly_increasing(k) || k.iter().any(|&x| x % 2 == 0) {
                return bad(format!(
                    "cluster {ci}: kernels must be non-empty, odd and strictly increasing"
                ));
            }
            if t.is_empty() || !strictly_increasing(t) || t[0] == 0 {
                return bad(format!(
                    "cluster {ci}: expansions must be positive and strictly increasing"
                ));
            }
            clusters.push(ClusterSpec {
                block_count: c.block_count,
                stride: c.stride,
                channel_choices: c.channel_choices.clone(),
                input_resolution: side,
            });
            for p in 0..c.block_count as usize {
                let stride = if p == 0 { c.stride } else { 1 };
                layers.push(LayerInfo {
                    cluster: ci,
                    position: p,
                    stride,
                    is_head: p == 0,
                    is_spring: p + 1 == c.block_count as usize,
                    input_side: side,
                });
                layer_choices.push(c.choices.clone());
                side = conv_output_side(side, 1, stride, 0);
            }
        }
        for l in &def.tail {
            side = l.output_side(side);
            if side == 0 {
                return bad("tail collapses spatial size to zero".into());
            }
        }
        Ok(Self {
            input_size: def.input_size,
            in_channels: def.in_channels,
            n_class: def.n_class,
            channel_quantum: def.channel_quantum,
            stem: def.stem,
            clusters,
            layer_choices,
            tail: def.tail,
            layers,
            stem_output,
        })
    }

    pub fn input_size(&self) -> u32 {
        self.input_size
    }

    pub fn in_channels(&self) -> u32 {
        self.in_channels
    }

    pub fn n_class(&self) -> u32 {
        self.n_class
    }

    pub fn channel_quantum(&self) -> u32 {
        self.channel_quantum
    }

    pub fn stem(&self) -> &[FixedLayer] {
        &self.stem
    }

    pub fn tail(&self) -> &[FixedLayer] {
        &self.tail
    }

    pub fn clusters(&self) -> &[ClusterSpec] {
        &self.clusters
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer_choices(&self, layer: usize) -> &ChoiceSets {
        &self.layer_choices[layer]
    }

    /// Number of searchable layers (H).
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Output width of the stem, i.e. the first cluster head's input.
    pub fn stem_output(&self) -> u32 {
        self.stem_output
    }

    pub fn cluster_layers(&self, cluster: usize) -> std::ops::Range<usize> {
        let start: usize = self.clusters[..cluster]
            .iter()
            .map(|c| c.block_count as usize)
            .sum();
        start..start + self.clusters[cluster].block_count as usize
    }

    /// Channel choices available to a layer (those of its cluster).
    pub fn layer_channels(&self, layer: usize) -> &[u32] {
        &self.clusters[self.layers[layer].cluster].channel_choices
    }

    /// Operation count O_N of a layer: |kernels| · |expansions| · |channels|.
    pub fn op_count(&self, layer: usize) -> usize {
        self.layer_choices[layer].pair_count() * self.layer_channels(layer).len()
    }

    /// Index of an operation in canonical order (kernel, expansion, channel ascending).
    pub fn op_index(&self, layer: usize, op: &OpTriple) -> Option<usize> {
        let ch = &self.layer_choices[layer];
        let ki = ch.kernels.iter().position(|&k| k == op.kernel)?;
        let ti = ch.expansions.iter().position(|&t| t == op.expansion)?;
        let ci = self
            .layer_channels(layer)
            .iter()
            .position(|&c| c == op.channel)?;
        Some(self.op_index_of(layer, ki, ti, ci))
    }

    pub fn op_index_of(&self, layer: usize, ki: usize, ti: usize, ci: usize) -> usize {
        let ch = &self.layer_choices[layer];
        (ki * ch.expansions.len() + ti) * self.layer_channels(layer).len() + ci
    }

    pub fn op_triple(&self, layer: usize, index: usize) -> OpTriple {
        let ch = &self.layer_choices[layer];
        let chans = self.layer_channels(layer);
        let ci = index % chans.len();
        let pair = index / chans.len();
        OpTriple {
            kernel: ch.kernels[pair / ch.expansions.len()],
            expansion: ch.expansions[pair % ch.expansions.len()],
            channel: chans[ci],
        }
    }

    /// Operation indices chosen by an architecture, one per layer. The
    /// architecture must be valid.
    pub fn arch_ops(&self, arch: &Architecture) -> Vec<usize> {
        (0..self.layer_count())
            .map(|l| {
                let g = arch.layer_genes[l];
                let op = OpTriple {
                    kernel: g.kernel,
                    expansion: g.expansion,
                    channel: arch.cluster_genes[self.layers[l].cluster],
                };
                self.op_index(l, &op)
                    .expect("architecture validated against space")
            })
            .collect()
    }

    /// Architecture assembled from per-layer operation indices. Layers of a
    /// cluster must agree on the channel.
    pub fn arch_from_ops(&self, ops: &[usize]) -> Architecture {
        let mut cluster_genes = vec![0; self.clusters.len()];
        let layer_genes = ops
            .iter()
            .enumerate()
            .map(|(l, &i)| {
                let op = self.op_triple(l, i);
                cluster_genes[self.layers[l].cluster] = op.channel;
                LayerGene::new(op.kernel, op.expansion)
            })
            .collect();
        Architecture::new(layer_genes, cluster_genes)
    }

    /// Per-layer `(c_in, c_out)` for an architecture in its own mode.
    ///
    /// Cluster heads read the previous cluster's spring output (the stem
    /// output for the first cluster); other blocks read the cluster's chosen
    /// width. Spring blocks emit the cluster maximum in supernet mode and the
    /// chosen width once released. Every entry depends only on the
    /// architecture's own genes.
    pub fn channel_plan(&self, arch: &Architecture) -> Vec<(u32, u32)> {
        let mut plan = Vec::with_capacity(self.layer_count());
        let mut incoming = self.stem_output;
        for info in &self.layers {
            let cluster = &self.clusters[info.cluster];
            let chosen = arch.cluster_genes[info.cluster];
            let c_in = if info.is_head { incoming } else { chosen };
            let c_out = if info.is_spring && arch.mode == Mode::Supernet {
                cluster.spring_output()
            } else {
                chosen
            };
            plan.push((c_in, c_out));
            incoming = c_out;
        }
        plan
    }

    /// Width entering the tail for an architecture.
    pub fn tail_input(&self, arch: &Architecture) -> u32 {
        let last = self.clusters.len() - 1;
        match arch.mode {
            Mode::Supernet => self.clusters[last].spring_output(),
            Mode::Released => arch.cluster_genes[last],
        }
    }

    /// Spatial side entering the tail.
    pub fn tail_input_side(&self) -> u32 {
        let info = self.layers.last().expect("at least one layer");
        conv_output_side(info.input_side, 1, info.stride, 0)
    }

    /// Exact number of architectures: Π_layers |k|·|t| · Π_clusters |c|.
    pub fn cardinality(&self) -> BigUint {
        let mut n = BigUint::from(1u32);
        for ch in &self.layer_choices {
            n *= ch.pair_count();
        }
        for c in &self.clusters {
            n *= c.channel_choices.len();
        }
        n
    }

    /// All invariant violations of `arch`; empty iff valid.
    pub fn validate(&self, arch: &Architecture) -> Vec<Violation> {
        let mut out = Vec::new();
        if arch.layer_genes.len() != self.layer_count() {
            out.push(Violation::LayerCount {
                expected: self.layer_count(),
                found: arch.layer_genes.len(),
            });
        }
        if arch.cluster_genes.len() != self.clusters.len() {
            out.push(Violation::ClusterCount {
                expected: self.clusters.len(),
                found: arch.cluster_genes.len(),
            });
        }
        for (l, g) in arch.layer_genes.iter().enumerate().take(self.layer_count()) {
            let ch = &self.layer_choices[l];
            if !ch.kernels.contains(&g.kernel) {
                out.push(Violation::Kernel {
                    layer: l,
                    value: g.kernel,
                    allowed: ch.kernels.clone(),
                });
            }
            if !ch.expansions.contains(&g.expansion) {
                out.push(Violation::Expansion {
                    layer: l,
                    value: g.expansion,
                    allowed: ch.expansions.clone(),
                });
            }
        }
        for (c, &v) in arch
            .cluster_genes
            .iter()
            .enumerate()
            .take(self.clusters.len())
        {
            let allowed = &self.clusters[c].channel_choices;
            if !allowed.contains(&v) {
                out.push(Violation::Channel {
                    cluster: c,
                    value: v,
                    allowed: allowed.clone(),
                });
            }
        }
        out
    }

    /// Violations of `arch` against the space and the liveness graph.
    pub fn validate_alive(&self, arch: &Architecture, graph: &OperationGraph) -> Vec<Violation> {
        let mut out = self.validate(arch);
        if !out.is_empty() {
            return out;
        }
        for c in 0..self.clusters.len() {
            let ci = self.clusters[c]
                .channel_choices
                .iter()
                .position(|&x| x == arch.cluster_genes[c])
                .unwrap();
            if !graph.feasible_channels(c).contains(&ci) {
                out.push(Violation::InfeasibleChannel {
                    cluster: c,
                    value: arch.cluster_genes[c],
                });
            }
        }
        for (l, op) in self.arch_ops(arch).into_iter().enumerate() {
            if !graph.is_alive(l, op) {
                out.push(Violation::DeadOperation {
                    layer: l,
                    op: self.op_triple(l, op),
                });
            }
        }
        out
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let v = self.validate(arch);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArchitecture(v))
        }
    }

    /// Draws a random architecture. Without a graph every gene is uniform
    /// over its choice set. With a graph the cluster width is uniform over the
    /// cluster's feasible widths and each layer's (kernel, expansion) is
    /// uniform over the pairs alive at that width.
    pub fn random_architecture<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        alive: Option<&OperationGraph>,
    ) -> Result<Architecture> {
        let mut layer_genes = Vec::with_capacity(self.layer_count());
        let mut cluster_genes = Vec::with_capacity(self.clusters.len());
        for (c, cluster) in self.clusters.iter().enumerate() {
            match alive {
                None => {
                    let ci = rng.random_range(0..cluster.channel_choices.len());
                    cluster_genes.push(cluster.channel_choices[ci]);
                    for l in self.cluster_layers(c) {
                        let ch = &self.layer_choices[l];
                        let k = ch.kernels[rng.random_range(0..ch.kernels.len())];
                        let t = ch.expansions[rng.random_range(0..ch.expansions.len())];
                        layer_genes.push(LayerGene::new(k, t));
                    }
                }
                Some(g) => {
                    let feasible = g.feasible_channels(c);
                    if feasible.is_empty() {
                        return Err(Error::Infeasible(format!(
                            "cluster {c} has no feasible channel"
                        )));
                    }
                    let ci = feasible[rng.random_range(0..feasible.len())];
                    cluster_genes.push(cluster.channel_choices[ci]);
                    for l in self.cluster_layers(c) {
                        let ops = g.alive_ops_with_channel(l, ci);
                        if ops.is_empty() {
                            return Err(Error::Infeasible(format!(
                                "layer {l} has no alive operation"
                            )));
                        }
                        let op = self.op_triple(l, ops[rng.random_range(0..ops.len())]);
                        layer_genes.push(LayerGene::new(op.kernel, op.expansion));
                    }
                }
            }
        }
        Ok(Architecture::new(layer_genes, cluster_genes))
    }

    /// Relaxes every spring block to its cluster's chosen width. Genes are
    /// untouched; releasing twice is the same as releasing once.
    pub fn release_spring_blocks(&self, arch: &Architecture) -> Result<Architecture> {
        self.check(arch)?;
        Ok(arch.clone().with_mode(Mode::Released))
    }

    /// The default MobileNetV2 space: 19 searchable blocks in six clusters.
    pub fn default_space() -> Self {
        Self::from_def(default_def()).expect("default space is valid")
    }

    pub fn to_config(&self) -> SpaceConfig {
        let mut rows = Vec::new();
        let mut side = self.input_size;
        let mut width = self.in_channels;
        for l in &self.stem {
            rows.push(fixed_row("stem", side, width, l, self.n_class));
            side = l.output_side(side);
            width = l.out_channels.unwrap_or(width);
        }
        let mut first = 1;
        for (c, cl) in self.clusters.iter().enumerate() {
            let last = first + cl.block_count as usize - 1;
            let no = if last == first {
                first.to_string()
            } else {
                format!("{first}-{last}")
            };
            let ch = &self.layer_choices[self.cluster_layers(c).start];
            rows.push(TableRow {
                no: Some(no),
                input: Some(format!("{}x{}", cl.input_resolution, width)),
                operator: "bottleneck".into(),
                k: Some(OneOrMany::Many(ch.kernels.clone())),
                t: Some(OneOrMany::Many(ch.expansions.clone())),
                c: Some(ChannelColumn::Width(OneOrMany::Many(
                    cl.channel_choices.clone(),
                ))),
                s: Some(cl.stride),
            });
            width = cl.spring_output();
            first = last + 1;
        }
        let mut side = self.tail_input_side();
        for l in &self.tail {
            rows.push(fixed_row("tail", side, width, l, self.n_class));
            side = l.output_side(side);
            width = l.out_channels.unwrap_or(width);
        }
        SpaceConfig {
            input_size: self.input_size,
            in_channels: self.in_channels,
            n_class: self.n_class,
            channel_quantum: self.channel_quantum,
            rows,
        }
    }
}

fn fixed_row(no: &str, side: u32, width: u32, l: &FixedLayer, n_class: u32) -> TableRow {
    let operator = match l.op {
        FixedOp::Conv => "conv2d",
        FixedOp::Separable => "separable",
        FixedOp::AvgPool => "avgpool",
    };
    let c = l.out_channels.map(|c| {
        if c == n_class && no == "tail" {
            ChannelColumn::NClass(NClass::NClass)
        } else {
            ChannelColumn::Width(OneOrMany::One(c))
        }
    });
    TableRow {
        no: Some(no.into()),
        input: Some(format!("{side}x{width}")),
        operator: operator.into(),
        k: Some(OneOrMany::One(l.kernel)),
        t: None,
        c,
        s: (l.op != FixedOp::AvgPool).then_some(l.stride),
    }
}

fn default_def() -> SpaceDef {
    let choices = ChoiceSets {
        kernels: vec![3, 5, 7],
        expansions: vec![3, 6],
    };
    let cluster = |block_count, stride, ch: [u32; 3]| ClusterDef {
        block_count,
        stride,
        channel_choices: ch.to_vec(),
        choices: choices.clone(),
    };
    SpaceDef {
        input_size: 224,
        in_channels: 3,
        n_class: 1000,
        channel_quantum: DEFAULT_CHANNEL_QUANTUM,
        stem: vec![FixedLayer::conv(3, 2, 32), FixedLayer::separable(3, 1, 16)],
        clusters: vec![
            cluster(2, 2, [24, 32, 40]),
            cluster(4, 2, [40, 48, 56]),
            cluster(4, 2, [64, 72, 80]),
            cluster(4, 1, [96, 112, 128]),
            cluster(4, 2, [160, 192, 224]),
            cluster(1, 1, [240, 280, 320]),
        ],
        tail: vec![
            FixedLayer::conv(1, 1, 1280),
            FixedLayer::avg_pool(7),
            FixedLayer::conv(1, 1, 1000),
        ],
    }
}

// ---------------------------------------------------------------------------
// JSON config mirroring the table columns (input, operator, k, t, c, s).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(u32),
    Many(Vec<u32>),
}

impl OneOrMany {
    fn to_vec(&self) -> Vec<u32> {
        match self {
            OneOrMany::One(x) => vec![*x],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NClass {
    #[serde(rename = "n_class")]
    NClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelColumn {
    Width(OneOrMany),
    NClass(NClass),
}

/// One table row. `no` is `stem`, `tail`, or a block range such as `3-6`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no: Option<String>,
    /// `"<side>x<channels>"`; checked against the derived input when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub operator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<ChannelColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<u32>,
}

fn d_input() -> u32 {
    224
}
fn d_in_channels() -> u32 {
    3
}
fn d_n_class() -> u32 {
    1000
}
fn d_quantum() -> u32 {
    DEFAULT_CHANNEL_QUANTUM
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceConfig {
    #[serde(default = "d_input")]
    pub input_size: u32,
    #[serde(default = "d_in_channels")]
    pub in_channels: u32,
    #[serde(default = "d_n_class")]
    pub n_class: u32,
    #[serde(default = "d_quantum")]
    pub channel_quantum: u32,
    pub rows: Vec<TableRow>,
}

fn parse_input(s: &str) -> Option<(u32, u32)> {
    let s = s.replace('²', "").replace(['×', '*'], "x");
    let parts: Vec<&str> = s.split('x').map(str::trim).collect();
    match parts.as_slice() {
        [side, ch] => Some((side.parse().ok()?, ch.parse().ok()?)),
        [side, side2, ch] if side == side2 => Some((side.parse().ok()?, ch.parse().ok()?)),
        _ => None,
    }
}

fn block_count_from_no(no: &str) -> Option<u32> {
    match no.split_once('-') {
        Some((a, b)) => {
            let a: u32 = a.trim().parse().ok()?;
            let b: u32 = b.trim().parse().ok()?;
            (b >= a).then(|| b - a + 1)
        }
        None => no.trim().parse::<u32>().ok().map(|_| 1),
    }
}

impl SpaceConfig {
    pub fn into_space(self) -> Result<SearchSpaceSpec> {
        let cfg = |m: String| Error::Config(m);
        let mut stem = Vec::new();
        let mut clusters = Vec::new();
        let mut tail = Vec::new();
        // (row index, expected side, expected width) checks for the input column
        let mut checks = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let single = |col: &Option<OneOrMany>, name: &str| -> Result<u32> {
                match col {
                    Some(OneOrMany::One(x)) => Ok(*x),
                    Some(OneOrMany::Many(v)) if v.len() == 1 => Ok(v[0]),
                    _ => Err(cfg(format!("row {i}: fixed layer needs a single {name}"))),
                }
            };
            if let Some(input) = &row.input {
                let parsed = parse_input(input)
                    .ok_or_else(|| cfg(format!("row {i}: bad input {input:?}")))?;
                checks.push((i, parsed));
            }
            match row.operator.as_str() {
                "bottleneck" => {
                    if !tail.is_empty() {
                        return Err(cfg(format!("row {i}: bottleneck after tail layers")));
                    }
                    let no = row
                        .no
                        .as_deref()
                        .ok_or_else(|| cfg(format!("row {i}: bottleneck row needs `no`")))?;
                    let block_count = block_count_from_no(no)
                        .ok_or_else(|| cfg(format!("row {i}: bad block range {no:?}")))?;
                    let channel_choices = match &row.c {
                        Some(ChannelColumn::Width(c)) => c.to_vec(),
                        _ => return Err(cfg(format!("row {i}: bottleneck needs channel choices"))),
                    };
                    clusters.push(ClusterDef {
                        block_count,
                        stride: row.s.unwrap_or(1),
                        channel_choices,
                        choices: ChoiceSets {
                            kernels: row.k.as_ref().map(OneOrMany::to_vec).unwrap_or_default(),
                            expansions: row.t.as_ref().map(OneOrMany::to_vec).unwrap_or_default(),
                        },
                    });
                }
                op @ ("conv2d" | "separable") => {
                    let out = match &row.c {
                        Some(ChannelColumn::NClass(_)) => self.n_class,
                        Some(ChannelColumn::Width(c)) => single(&Some(c.clone()), "c")?,
                        None => return Err(cfg(format!("row {i}: {op} needs c"))),
                    };
                    let k = single(&row.k, "k")?;
                    let s = row.s.unwrap_or(1);
                    let layer = if op == "conv2d" {
                        FixedLayer::conv(k, s, out)
                    } else {
                        FixedLayer::separable(k, s, out)
                    };
                    if clusters.is_empty() {
                        stem.push(layer)
                    } else {
                        tail.push(layer)
                    }
                }
                "avgpool" => {
                    if clusters.is_empty() {
                        return Err(cfg(format!("row {i}: pooling before the first bottleneck")));
                    }
                    tail.push(FixedLayer::avg_pool(single(&row.k, "k")?));
                }
                other => return Err(cfg(format!("row {i}: unknown operator {other:?}"))),
            }
        }
        let space = SearchSpaceSpec::from_def(SpaceDef {
            input_size: self.input_size,
            in_channels: self.in_channels,
            n_class: self.n_class,
            channel_quantum: self.channel_quantum,
            stem,
            clusters,
            tail,
        })?;
        let derived = space.to_config();
        for (i, (side, width)) in checks {
            let expect = derived
                .rows
                .get(i)
                .and_then(|r| r.input.as_deref())
                .and_then(parse_input);
            if expect != Some((side, width)) {
                return Err(cfg(format!(
                    "row {i}: input {side}x{width} does not match derived {}",
                    expect
                        .map(|(a, b)| format!("{a}x{b}"))
                        .unwrap_or_else(|| "?".into())
                )));
            }
        }
        Ok(space)
    }
}

/// Reads a space definition from a JSON table file.
pub fn load_space(path: &std::path::Path) -> Result<SearchSpaceSpec> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let cfg: SpaceConfig = serde_json::from_str(&text)?;
    cfg.into_space()
}

/// Small helper for building compact test and experiment spaces: one stem
/// conv, the given clusters, and a 1×1 head plus classifier.
pub fn compact_space(
    input_size: u32,
    clusters: &[(u32, u32, &[u32])],
    kernels: &[u32],
    expansions: &[u32],
) -> Result<SearchSpaceSpec> {
    SearchSpaceSpec::from_def(SpaceDef {
        input_size,
        in_channels: 3,
        n_class: 10,
        channel_quantum: DEFAULT_CHANNEL_QUANTUM,
        stem: vec![FixedLayer::conv(3, 1, 16)],
        clusters: clusters
            .iter()
            .map(|&(block_count, stride, ch)| ClusterDef {
                block_count,
                stride,
                channel_choices: ch.to_vec(),
                choices: ChoiceSets {
                    kernels: kernels.to_vec(),
                    expansions: expansions.to_vec(),
                },
            })
            .collect(),
        tail: vec![FixedLayer::conv(1, 1, 64), FixedLayer::conv(1, 1, 10)],
    })
}

/// Distinct canonical strings in a slice of architectures.
pub fn distinct_count(archs: &[Architecture]) -> usize {
    archs
        .iter()
        .map(Architecture::canonical)
        .collect::<HashSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_space_layout() {
        let s = SearchSpaceSpec::default_space();
        assert_eq!(s.layer_count(), 19);
        let counts: Vec<u32> = s.clusters().iter().map(|c| c.block_count).collect();
        assert_eq!(counts, vec![2, 4, 4, 4, 4, 1]);
        let strides: Vec<u32> = s.clusters().iter().map(|c| c.stride).collect();
        assert_eq!(strides, vec![2, 2, 2, 1, 2, 1]);
        assert_eq!(s.clusters()[4].channel_choices, vec![160, 192, 224]);
        assert_eq!(s.stem_output(), 16);
        let sides: Vec<u32> = s.clusters().iter().map(|c| c.input_resolution).collect();
        assert_eq!(sides, vec![112, 56, 28, 14, 14, 7]);
        assert_eq!(s.tail_input_side(), 7);
        assert_eq!(s.op_count(0), 18);
    }

    #[test]
    fn cardinality_examples() {
        let s = SearchSpaceSpec::default_space();
        assert_eq!(s.cardinality().to_string(), "444223250467651584");
        let expect = BigUint::from(3u32).pow(6) * BigUint::from(6u32).pow(19);
        assert_eq!(s.cardinality(), expect);

        let one = compact_space(8, &[(3, 1, &[8])], &[3], &[3]).unwrap();
        assert_eq!(one.cardinality(), BigUint::from(1u32));

        let twelve = compact_space(8, &[(2, 1, &[8, 16, 24])], &[3], &[3, 6]).unwrap();
        assert_eq!(twelve.cardinality(), BigUint::from(12u32));
    }

    #[test]
    fn validate_reports_membership_and_length() {
        let s = SearchSpaceSpec::default_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = s.random_architecture(&mut rng, None).unwrap();
        assert!(s.validate(&a).is_empty());
        a.layer_genes[3].kernel = 4;
        let v = s.validate(&a);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "layer 3: kernel 4 not in {3,5,7}");

        let mut short = s.random_architecture(&mut rng, None).unwrap();
        short.layer_genes.pop();
        let v = s.validate(&short);
        assert!(v[0].to_string().contains("length mismatch"));
    }

    #[test]
    fn canonical_string_parses_back() {
        let s = SearchSpaceSpec::default_space();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = s.random_architecture(&mut rng, None).unwrap();
        let text = a.canonical();
        assert!(text.starts_with('k'));
        assert_eq!(text.matches('|').count(), 18 + 5);
        let b: Architecture = text.parse().unwrap();
        assert_eq!(a, b);
        assert!("k3t6|k5#c24".parse::<Architecture>().is_err());
        assert!("k3t6".parse::<Architecture>().is_err());
    }

    #[test]
    fn supernet_channel_plan_uses_spring_maxima() {
        let s = SearchSpaceSpec::default_space();
        let a = Architecture::new(
            vec![LayerGene::new(3, 3); 19],
            vec![24, 40, 64, 96, 160, 240],
        );
        let plan = s.channel_plan(&a);
        assert_eq!(plan[0], (16, 24));
        assert_eq!(plan[1], (24, 40));
        assert_eq!(plan[2], (40, 40));
        assert_eq!(plan[5], (40, 56));
        assert_eq!(plan[18], (224, 320));
        assert_eq!(s.tail_input(&a), 320);

        let r = s.release_spring_blocks(&a).unwrap();
        let plan = s.channel_plan(&r);
        assert_eq!(plan[1], (24, 24));
        assert_eq!(plan[2], (24, 40));
        assert_eq!(plan[18], (160, 240));
        assert_eq!(s.tail_input(&r), 240);
    }

    #[test]
    fn input_width_is_determined_by_own_genes() {
        // Heads see a constant width in supernet mode, whatever upstream chose.
        let s = SearchSpaceSpec::default_space();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = s.random_architecture(&mut rng, None).unwrap();
            let plan = s.channel_plan(&a);
            for (l, info) in s.layers().iter().enumerate() {
                let expect = if info.is_head {
                    if info.cluster == 0 {
                        16
                    } else {
                        s.clusters()[info.cluster - 1].spring_output()
                    }
                } else {
                    a.cluster_genes[info.cluster]
                };
                assert_eq!(plan[l].0, expect);
            }
        }
    }

    #[test]
    fn release_at_max_matches_supernet() {
        let s = SearchSpaceSpec::default_space();
        let a = Architecture::new(
            vec![LayerGene::new(5, 6); 19],
            vec![40, 56, 80, 128, 224, 320],
        );
        let r = s.release_spring_blocks(&a).unwrap();
        assert_eq!(s.channel_plan(&a), s.channel_plan(&r));
        assert_eq!(s.release_spring_blocks(&r).unwrap(), r);
        assert_eq!(r.layer_genes, a.layer_genes);
    }

    #[test]
    fn op_index_roundtrip() {
        let s = SearchSpaceSpec::default_space();
        for l in [0, 7, 18] {
            for i in 0..s.op_count(l) {
                assert_eq!(s.op_index(l, &s.op_triple(l, i)), Some(i));
            }
            let triples: Vec<OpTriple> = (0..s.op_count(l)).map(|i| s.op_triple(l, i)).collect();
            let mut sorted = triples.clone();
            sorted.sort();
            assert_eq!(triples, sorted);
        }
    }

    #[test]
    fn config_roundtrip_and_input_check() {
        let s = SearchSpaceSpec::default_space();
        let cfg = s.to_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: SpaceConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_space().unwrap(), s);

        let mut broken = cfg.clone();
        broken.rows[3].input = Some("56x48".into());
        assert!(matches!(broken.into_space(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(compact_space(8, &[(2, 1, &[8, 12])], &[3], &[3]).is_err());
        assert!(compact_space(8, &[(2, 1, &[16, 8])], &[3], &[3]).is_err());
        assert!(compact_space(8, &[(2, 1, &[8])], &[4], &[3]).is_err());
        assert!(compact_space(8, &[(0, 1, &[8])], &[3], &[3]).is_err());
        assert!(compact_space(8, &[(1, 3, &[8])], &[3], &[3]).is_err());
    }
}
