//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test -p bsnas-tests --test acceptance -- 4 5`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bsnas::cost;
use bsnas::evaluator::{
    brute_force_best, sort_records, EvalRecord, SurrogateEvaluator, SurrogateSettings, Workers,
};
use bsnas::events::{read_evals, NullSink, Phase};
use bsnas::evolution::{evolve, EvolutionConfig};
use bsnas::pipeline::{
    graph_step_file, run_pipeline, BestRecord, PipelineOptions, PipelineStatus, RunConfig, Stages,
};
use bsnas::report::{
    distribution_report, no_shrink_control, rank_correlation, GraphCheckpoint, Selection,
};
use bsnas::shrinking::{fair_batch, score_operations, OperationGraph, ShrinkSchedule};
use bsnas::space::{compact_space, Architecture, Mode, SearchSpaceSpec};

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);
type Variant = (&'static str, fn(&mut RunConfig));

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 -------------------------------------------------------------------------

fn cardinality() -> Outcome {
    let space = SearchSpaceSpec::default_space();
    let t = Instant::now();
    let n = space.cardinality();
    let elapsed = t.elapsed();
    let expected = BigUint::from(3u32).pow(6) * BigUint::from(6u32).pow(19);
    ensure(expected.to_string() == "444223250467651584", || {
        "oracle constant mismatch".into()
    })?;
    ensure(n == expected, || format!("got {n}"))?;
    ensure(elapsed < Duration::from_millis(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{n} in {elapsed:?}"))
}

// 2 -------------------------------------------------------------------------

/// Position-by-position MAC count of a released architecture in the default
/// network, written out layer by layer without the library's cost code.
fn brute_force_macs(arch: &Architecture) -> Vec<(String, u64)> {
    fn positions(side: u32, stride: u32) -> impl Iterator<Item = (u32, u32)> {
        (0..side)
            .step_by(stride as usize)
            .flat_map(move |y| (0..side).step_by(stride as usize).map(move |x| (y, x)))
    }
    fn conv(side: u32, cin: u64, cout: u64, k: u32, s: u32) -> (u64, u32) {
        let mut macs = 0;
        let mut out = 0;
        for (y, _) in positions(side, s) {
            if y == 0 {
                out += 1;
            }
            for _ in 0..k * k {
                macs += cin * cout;
            }
        }
        (macs, out)
    }
    fn depthwise(side: u32, ch: u64, k: u32, s: u32) -> (u64, u32) {
        conv(side, 1, ch, k, s)
    }
    fn bottleneck(side: u32, cin: u64, t: u64, k: u32, s: u32, cout: u64) -> (u64, u32) {
        let hidden = cin * t;
        let mut macs = 0;
        if hidden != cin {
            for _ in positions(side, 1) {
                macs += cin * hidden;
            }
        }
        let (dw, out) = depthwise(side, hidden, k, s);
        macs += dw;
        for _ in positions(out, 1) {
            macs += hidden * cout;
        }
        (macs, out)
    }

    let blocks = [2u32, 4, 4, 4, 4, 1];
    let strides = [2u32, 2, 2, 1, 2, 1];
    let mut out = Vec::new();
    let (m, side) = conv(224, 3, 32, 3, 2);
    out.push(("stem.0".to_string(), m));
    let (m, side) = bottleneck(side, 32, 1, 3, 1, 16);
    out.push(("stem.1".to_string(), m));
    let mut side = side;
    let mut width = 16u64;
    let mut layer = 0;
    for (c, (&n, &s)) in blocks.iter().zip(&strides).enumerate() {
        let cout = u64::from(arch.cluster_genes[c]);
        for b in 0..n {
            let g = arch.layer_genes[layer];
            let stride = if b == 0 { s } else { 1 };
            let (m, o) = bottleneck(side, width, u64::from(g.expansion), g.kernel, stride, cout);
            layer += 1;
            out.push((format!("block.{layer}"), m));
            side = o;
            width = cout;
        }
    }
    let (m, side) = conv(side, width, 1280, 1, 1);
    out.push(("tail.0".to_string(), m));
    out.push(("tail.1".to_string(), 0));
    assert_eq!(side, 7);
    let (m, _) = conv(1, 1280, 1000, 1, 1);
    out.push(("tail.2".to_string(), m));
    out
}

fn flops_range() -> Outcome {
    let space = SearchSpaceSpec::default_space();
    let t = Instant::now();
    let (lo, hi) = cost::flops_bounds(&space);
    let elapsed = t.elapsed();
    ensure((198_550_000..=219_450_000).contains(&lo), || {
        format!("min {lo} outside 209M ± 5%")
    })?;
    ensure((771_400_000..=852_600_000).contains(&hi), || {
        format!("max {hi} outside 812M ± 5%")
    })?;
    ensure(elapsed < Duration::from_secs(1), || {
        format!("bounds took {elapsed:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (amin, amax) = cost::extreme_architectures(&space);
    let mut archs = vec![amin, amax];
    for _ in 0..5 {
        archs.push(
            space
                .random_architecture(&mut rng, None)
                .map_err(e2s)?
                .with_mode(Mode::Released),
        );
    }
    let mut checked = 0;
    for a in &archs {
        let lib = cost::flops(&space, a).map_err(e2s)?;
        let oracle = brute_force_macs(a);
        ensure(lib.per_layer.len() == oracle.len(), || {
            "layer count differs".into()
        })?;
        for (l, (label, macs)) in lib.per_layer.iter().zip(&oracle) {
            ensure(&l.label == label && l.macs == *macs, || {
                format!("{}: library {} vs oracle {} ({label})", a, l.macs, macs)
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "min {lo}, max {hi} ({elapsed:?}); {checked} layer counts match the oracle"
    ))
}

// 3 -------------------------------------------------------------------------

fn shrinking_schedule() -> Outcome {
    let space = SearchSpaceSpec::default_space();
    let schedule = ShrinkSchedule::default();
    let mut ev = SurrogateEvaluator::from_seed(&space, 1, SurrogateSettings::default());
    let t = Instant::now();
    let (graph, reports) = bsnas::run_shrinking(
        &space,
        &schedule,
        &mut ev,
        1,
        &mut NullSink,
        &Workers::sequential(),
    )
    .map_err(e2s)?;
    let elapsed = t.elapsed();
    ensure(reports.len() == 4, || format!("{} rounds", reports.len()))?;
    let sizes: Vec<usize> = reports.iter().map(|r| r.batch_size).collect();
    ensure(sizes == [3600, 1800, 1000, 600], || {
        format!("batch sizes {sizes:?}")
    })?;
    let targets = [18, 9, 5, 3];
    for (r, rep) in reports.iter().enumerate() {
        for lr in &rep.layers {
            let kept: Vec<_> = lr.entries.iter().filter(|e| e.kept).collect();
            ensure(kept.len() <= targets[r], || {
                format!("round {r} layer {}: {} kept", lr.layer, kept.len())
            })?;
            if lr.reinstated {
                ensure(kept.len() == 1, || {
                    format!(
                        "round {r} layer {}: reinstatement kept {}",
                        lr.layer,
                        kept.len()
                    )
                })?;
            } else if lr.fallback {
                ensure(kept.len() == 1 && !kept[0].score.is_positive(), || {
                    format!("round {r} layer {}: bad fallback", lr.layer)
                })?;
            } else {
                ensure(kept.iter().all(|e| e.score.is_positive()), || {
                    format!("round {r} layer {}: kept a non-positive R", lr.layer)
                })?;
            }
        }
    }
    graph.check_invariants().map_err(e2s)?;
    ensure(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "4 rounds, batches {sizes:?}, final space {} architectures ({elapsed:.2?})",
        graph.alive_cardinality()
    ))
}

// 4 -------------------------------------------------------------------------

fn retention_oracle() -> Outcome {
    let spaces = [
        SearchSpaceSpec::default_space(),
        compact_space(
            16,
            &[(2, 1, &[8, 16]), (3, 2, &[16, 24, 32])],
            &[3, 5],
            &[3, 6],
        )
        .map_err(e2s)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut compared = 0usize;
    for trial in 0..100 {
        let space = &spaces[trial % 2];
        let graph = common::random_graph(space, &mut rng);
        let n = rng.random_range(6..=600);
        let mut batch: Vec<EvalRecord> = (0..n)
            .map(|_| {
                let a = space.random_architecture(&mut rng, Some(&graph)).unwrap();
                // coarse scores so ties occur
                EvalRecord::new(a, f64::from(rng.random_range(0..50u32)) / 50.0)
            })
            .collect();
        sort_records(&mut batch);
        let scores = score_operations(space, &graph, &batch).map_err(e2s)?;

        // independent count keyed by (layer, triple index)
        let third = n / 3;
        let mut top: HashMap<(usize, usize), i64> = HashMap::new();
        let mut bottom: HashMap<(usize, usize), i64> = HashMap::new();
        let mut total: HashMap<(usize, usize), i64> = HashMap::new();
        for (rank0, rec) in batch.iter().enumerate() {
            for (l, g) in rec.arch.layer_genes.iter().enumerate() {
                let info = &space.layers()[l];
                let ch = space.layer_choices(l);
                let channels = &space.clusters()[info.cluster].channel_choices;
                let key = (
                    l,
                    common::triple_index(
                        &ch.kernels,
                        &ch.expansions,
                        channels,
                        g.kernel,
                        g.expansion,
                        rec.arch.cluster_genes[info.cluster],
                    ),
                );
                *total.entry(key).or_default() += 1;
                if rank0 < third {
                    *top.entry(key).or_default() += 1;
                }
                if rank0 + third >= n {
                    *bottom.entry(key).or_default() += 1;
                }
            }
        }
        for (l, ops) in scores.layers.iter().enumerate() {
            let alive = graph.alive_ops(l);
            let listed: Vec<usize> = ops.iter().map(|s| s.op).collect();
            ensure(listed == alive, || {
                format!("trial {trial} layer {l}: scored ops differ from alive ops")
            })?;
            for s in ops {
                let key = (l, s.op);
                let nt = *total.get(&key).unwrap_or(&0);
                let oracle = (nt > 0).then(|| {
                    Ratio::new(
                        top.get(&key).copied().unwrap_or(0)
                            - bottom.get(&key).copied().unwrap_or(0),
                        nt,
                    )
                });
                let lib = s.score.ratio().map(|(num, den)| Ratio::new(num, den));
                ensure(lib == oracle, || {
                    format!("trial {trial} layer {l} op {}: {lib:?} vs {oracle:?}", s.op)
                })?;
                compared += 1;
            }
        }
    }
    Ok(format!(
        "100 batches, {compared} R values equal as exact rationals"
    ))
}

// 5 -------------------------------------------------------------------------

fn spread_ok(counts: impl Iterator<Item = usize>) -> bool {
    let v: Vec<usize> = counts.collect();
    v.is_empty() || v.iter().max().unwrap() - v.iter().min().unwrap() <= 1
}

fn fairness() -> Outcome {
    let spaces = [
        SearchSpaceSpec::default_space(),
        compact_space(
            16,
            &[(2, 1, &[8, 16, 24]), (3, 2, &[16, 24])],
            &[3, 5, 7],
            &[3, 6],
        )
        .map_err(e2s)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let space = &spaces[trial % 2];
        let graph = common::random_graph(space, &mut rng);
        let n_r = rng.random_range(1..=18);
        let m = rng.random_range(1..=12);
        let batch = fair_batch(space, &graph, n_r, m, &mut rng).map_err(e2s)?;
        ensure(batch.len() == n_r * m, || {
            format!("trial {trial}: batch size {}", batch.len())
        })?;
        for (c, cl) in space.clusters().iter().enumerate() {
            let feasible = graph.feasible_channels(c);
            let mut per_channel: HashMap<u32, usize> = feasible
                .iter()
                .map(|&ci| (cl.channel_choices[ci], 0))
                .collect();
            for a in &batch {
                *per_channel
                    .get_mut(&a.cluster_genes[c])
                    .ok_or_else(|| format!("trial {trial}: infeasible channel used"))? += 1;
            }
            ensure(spread_ok(per_channel.values().copied()), || {
                format!("trial {trial} cluster {c}: channel counts {per_channel:?}")
            })?;
            for l in space.cluster_layers(c) {
                for &ci in &feasible {
                    let ch = cl.channel_choices[ci];
                    let alive = graph.alive_ops_with_channel(l, ci);
                    let mut per_pair: HashMap<usize, usize> =
                        alive.iter().map(|&op| (op, 0)).collect();
                    for a in batch.iter().filter(|a| a.cluster_genes[c] == ch) {
                        let op = space.arch_ops(a)[l];
                        *per_pair
                            .get_mut(&op)
                            .ok_or_else(|| format!("trial {trial}: dead op used"))? += 1;
                    }
                    ensure(spread_ok(per_pair.values().copied()), || {
                        format!("trial {trial} layer {l} channel {ch}: pair counts {per_pair:?}")
                    })?;
                }
            }
        }
    }
    Ok("1000 batches, every stage-wise count spread ≤ 1".into())
}

// 6 -------------------------------------------------------------------------

fn evolution_optimality() -> Outcome {
    // 2·4³ · 3·4² = 6144 architectures
    let space = compact_space(
        16,
        &[(3, 1, &[8, 16]), (2, 2, &[16, 24, 32])],
        &[3, 5],
        &[3, 6],
    )
    .map_err(e2s)?;
    let graph = OperationGraph::new(&space);
    let card = graph.alive_cardinality();
    ensure(card <= BigUint::from(10_000u32), || {
        format!("space has {card} architectures")
    })?;
    let settings = SurrogateSettings {
        noise_sd: 0.0,
        ..Default::default()
    };
    let config = EvolutionConfig::default();
    let t = Instant::now();
    let mut hits = 0;
    for seed in 0..100u64 {
        let ev = SurrogateEvaluator::from_seed(&space, 1000 + seed, settings.clone())
            .stand_alone_evaluator();
        let (best, best_score) = brute_force_best(&space, &graph, &ev, 10_000).map_err(e2s)?;
        let out = evolve(
            &space,
            &graph,
            &config,
            &ev,
            seed,
            &mut NullSink,
            &Workers::sequential(),
        )
        .map_err(e2s)?;
        if out.best.arch == best || out.best.score == best_score {
            hits += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure(hits >= 95, || format!("optimum found in {hits}/100 runs"))?;
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "optimum found in {hits}/100 runs over {card} architectures ({elapsed:.1?})"
    ))
}

// 7 -------------------------------------------------------------------------

fn shrink_run(
    seed: u64,
    dir: &Path,
    mutate: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.output_dir = dir.to_path_buf();
    mutate(&mut cfg);
    let opts = PipelineOptions {
        stages: Stages::ShrinkOnly,
        ..Default::default()
    };
    run_pipeline(&cfg, &opts).map_err(e2s)?;
    Ok(cfg)
}

fn distribution_shift() -> Outcome {
    let space = SearchSpaceSpec::default_space();
    let mut monotone = 0;
    let mut beats_control = 0;
    let mut lines = Vec::new();
    for seed in 1..=10u64 {
        let dir = tempfile::tempdir().map_err(e2s)?;
        let cfg = shrink_run(seed, dir.path(), |_| {})?;
        let mut backend = cfg.evaluator.build(&space, seed).map_err(e2s)?;
        let mut fresh = cfg.evaluator.build(&space, seed).map_err(e2s)?;
        let budget = f64::from(cfg.schedule.total_epochs());
        let mut cps = vec![no_shrink_control(&space, fresh.as_dyn_mut(), budget)];
        // the three steps that cut the space below its first-round size
        for step in 2..=4 {
            cps.push(GraphCheckpoint::load(&dir.path().join(graph_step_file(step))).map_err(e2s)?);
        }
        let rep = distribution_report(
            &space,
            &cps,
            backend.as_dyn_mut(),
            20,
            seed,
            &Workers::sequential(),
        )
        .map_err(e2s)?;
        let mean = |step| rep.summary(step).map(|s| s.mean).unwrap_or(f64::NAN);
        let (c, a, b, f) = (mean(0), mean(2), mean(3), mean(4));
        if a <= b && b <= f {
            monotone += 1;
        }
        if f > c {
            beats_control += 1;
        }
        lines.push(format!("{c:.3}/{a:.3}/{b:.3}/{f:.3}"));
    }
    let detail = format!(
        "non-decreasing {monotone}/10, above control {beats_control}/10 (control/steps: {})",
        lines.join(" ")
    );
    ensure(monotone >= 9 && beats_control >= 8, || detail.clone())?;
    Ok(detail)
}

// 8 -------------------------------------------------------------------------

fn full_run(
    seed: u64,
    dir: &Path,
    mutate: impl FnOnce(&mut RunConfig),
) -> Result<(RunConfig, BestRecord), String> {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.output_dir = dir.to_path_buf();
    mutate(&mut cfg);
    match run_pipeline(&cfg, &PipelineOptions::default()).map_err(e2s)? {
        PipelineStatus::Completed {
            best: Some(best), ..
        } => Ok((cfg, best)),
        other => Err(format!("unexpected status {other:?}")),
    }
}

fn rank_correlation_check() -> Outcome {
    let space = SearchSpaceSpec::default_space();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let (cfg, best) = full_run(1, dir.path(), |_| {})?;
    let backend = cfg.evaluator.build(&space, cfg.seed).map_err(e2s)?;
    let evals: Vec<(Architecture, f64)> = read_evals(&dir.path().join("evals.jsonl"))
        .map_err(e2s)?
        .into_iter()
        .filter(|e| e.phase == Phase::Evolve)
        .map(|e| (e.arch.parse().unwrap(), e.score))
        .collect();
    let distinct =
        bsnas::space::distinct_count(&evals.iter().map(|e| e.0.clone()).collect::<Vec<_>>());
    ensure(distinct >= 10, || {
        format!(
            "evolution produced {distinct} distinct models (final shrunk space holds {} architectures); 10 are required",
            best.alive_cardinality
        )
    })?;
    let rep =
        rank_correlation(&evals, &mut |a| backend.truth(a), 10, Selection::Top).map_err(e2s)?;
    let rho = rep.spearman.unwrap_or(f64::NAN);
    ensure(rep.rows.len() == 10 && rho >= 0.6, || {
        format!("Spearman {rho:.3} over {} models", rep.rows.len())
    })?;
    Ok(format!(
        "Spearman {rho:.3}, Kendall {:.3} over 10 models",
        rep.kendall_tau_b.unwrap_or(f64::NAN)
    ))
}

// 9 -------------------------------------------------------------------------

fn read_dir_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(e2s)? {
        let e = e.map_err(e2s)?;
        out.push((
            e.file_name().to_string_lossy().into_owned(),
            std::fs::read(e.path()).map_err(e2s)?,
        ));
    }
    out.sort();
    Ok(out)
}

fn compare_dirs(a: &Path, b: &Path, what: &str) -> Result<usize, String> {
    let fa = read_dir_files(a)?;
    let fb = read_dir_files(b)?;
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    ensure(names(&fa) == names(&fb), || {
        format!(
            "{what}: file sets differ {:?} vs {:?}",
            names(&fa),
            names(&fb)
        )
    })?;
    for ((n, x), (_, y)) in fa.iter().zip(&fb) {
        ensure(x == y, || format!("{what}: {n} differs"))?;
    }
    Ok(fa.len())
}

fn determinism_and_resume() -> Outcome {
    // the default run and a two-round run whose evolution has room to search
    let variants: [Variant; 2] = [
        ("default", |_| {}),
        ("short", |c| {
            c.schedule.retention = vec![18, 9];
            c.evolution.iterations = 6;
            c.workers = 3;
        }),
    ];
    let mut notes = Vec::new();
    for (name, mutate) in variants {
        let base = tempfile::tempdir().map_err(e2s)?;
        let again = tempfile::tempdir().map_err(e2s)?;
        let (cfg, _) = full_run(7, base.path(), mutate)?;
        full_run(7, again.path(), mutate)?;
        let files = compare_dirs(base.path(), again.path(), &format!("{name} rerun"))?;

        let wide = tempfile::tempdir().map_err(e2s)?;
        full_run(7, wide.path(), |c| {
            mutate(c);
            c.workers = 4;
        })?;
        compare_dirs(base.path(), wide.path(), &format!("{name} with 4 workers"))?;

        let units = cfg.schedule.rounds() + 1 + cfg.evolution.iterations;
        let mut resumed = 0;
        for halt in [
            1,
            cfg.schedule.rounds(),
            cfg.schedule.rounds() + 1,
            units - 1,
        ] {
            let dir = tempfile::tempdir().map_err(e2s)?;
            let mut c = cfg.clone();
            c.output_dir = dir.path().to_path_buf();
            let opts = PipelineOptions {
                halt_after: Some(halt),
                ..Default::default()
            };
            match run_pipeline(&c, &opts).map_err(e2s)? {
                PipelineStatus::Halted { .. } => {}
                // the search ended early (single surviving architecture)
                PipelineStatus::Completed { .. } => continue,
            }
            // a crash after the checkpoint leaves a torn line behind
            let evals = dir.path().join("evals.jsonl");
            let mut torn = std::fs::read(&evals).map_err(e2s)?;
            torn.extend_from_slice(b"{\"phase\":\"evolve\",\"rou");
            std::fs::write(&evals, torn).map_err(e2s)?;
            let opts = PipelineOptions {
                resume: true,
                ..Default::default()
            };
            run_pipeline(&c, &opts).map_err(e2s)?;
            compare_dirs(
                base.path(),
                dir.path(),
                &format!("{name} resumed after {halt} units"),
            )?;
            resumed += 1;
        }
        notes.push(format!(
            "{name}: {files} files identical across reruns/workers, {resumed} kill-resume points"
        ));
    }
    Ok(notes.join("; "))
}

// 10 ------------------------------------------------------------------------

fn single_survivor() -> Outcome {
    let space = SearchSpaceSpec::default_space();
    let one = tempfile::tempdir().map_err(e2s)?;
    let (cfg, single) = full_run(1, one.path(), |c| c.schedule.retention = vec![18, 9, 5, 1])?;
    let graph = GraphCheckpoint::load(&one.path().join("graph.json"))
        .map_err(e2s)?
        .graph;
    ensure(graph.alive_cardinality() == BigUint::from(1u32), || {
        format!("{} architectures survive", graph.alive_cardinality())
    })?;
    ensure(single.evaluations == 1, || {
        format!(
            "{} evaluations after the single survivor",
            single.evaluations
        )
    })?;
    let survivor = bsnas::evaluator::enumerate_alive(&space, &graph).remove(0);
    ensure(survivor.canonical() == single.arch, || {
        "best.json does not hold the survivor".into()
    })?;

    let full = tempfile::tempdir().map_err(e2s)?;
    let (_, evolved) = full_run(1, full.path(), |_| {})?;
    let backend = cfg.evaluator.build(&space, cfg.seed).map_err(e2s)?;
    let t_single = backend.truth(&survivor).map_err(e2s)?;
    let t_evolved = backend
        .truth(&evolved.arch.parse::<Architecture>().map_err(e2s)?)
        .map_err(e2s)?;
    Ok(format!(
        "one survivor; stand-alone {:.4} vs evolved best {:.4} (gap {:+.2} points, evolved space {} architectures)",
        t_single,
        t_evolved,
        100.0 * (t_evolved - t_single),
        evolved.alive_cardinality
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "cardinality", cardinality),
        (2, "FLOPs range", flops_range),
        (3, "shrinking schedule", shrinking_schedule),
        (4, "retention score oracle", retention_oracle),
        (5, "fairness", fairness),
        (6, "evolution optimality", evolution_optimality),
        (7, "distribution shift", distribution_shift),
        (8, "rank correlation", rank_correlation_check),
        (9, "determinism and resume", determinism_and_resume),
        (10, "single survivor", single_survivor),
    ];
    let wanted: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if std::env::args().any(|a| a == "--list") {
        for (id, name, _) in &criteria {
            println!("criterion_{id}_{}: test", name.replace(' ', "_"));
        }
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let result = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS [{name}] ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL [{name}] ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
