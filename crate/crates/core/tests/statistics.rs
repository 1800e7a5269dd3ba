mod common;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bsnas::evaluator::{brute_force_best, SurrogateSettings};
use bsnas::events::NullSink;
use bsnas::evolution::{crossover, mutate};
use bsnas::rng::StreamRng;
use bsnas::space::compact_space;
use bsnas::stats::spearman;
use bsnas::{
    evolve, Evaluator, EvolutionConfig, OperationGraph, SearchSpaceSpec, SurrogateEvaluator,
    Workers,
};

/// Pearson chi-square statistic against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn trained_estimates_track_stand_alone_fitness() {
    let space = SearchSpaceSpec::default_space();
    let graph = OperationGraph::new(&space);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 1..=5 {
        let mut ev = SurrogateEvaluator::from_seed(&space, seed, SurrogateSettings::default());
        ev.notify_training(&graph, 240.0);
        let mut noise = StreamRng::new(seed, "test");
        let mut est = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..100 {
            let a = space.random_architecture(&mut rng, None).unwrap();
            est.push(ev.evaluate(&a, &mut noise).unwrap());
            truth.push(ev.stand_alone(&a).unwrap());
        }
        let rho = spearman(&est, &truth).unwrap();
        assert!(rho >= 0.8, "seed {seed}: rho {rho}");
    }
}

#[test]
fn unconstrained_sampling_is_uniform() {
    let space = SearchSpaceSpec::default_space();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 18_000;
    let mut per_layer = vec![vec![0usize; 18]; space.layer_count()];
    for _ in 0..n {
        let a = space.random_architecture(&mut rng, None).unwrap();
        for (l, op) in space.arch_ops(&a).into_iter().enumerate() {
            per_layer[l][op] += 1;
        }
    }
    // 17 degrees of freedom, upper 0.1% point
    for (l, counts) in per_layer.iter().enumerate() {
        let x2 = chi_square(counts);
        assert!(x2 < 40.79, "layer {l}: chi-square {x2}");
    }
}

#[test]
fn alive_sampling_is_uniform_over_survivors() {
    let space = SearchSpaceSpec::default_space();
    let mut graph = OperationGraph::new(&space);
    // keep channel 0 and the pairs with kernel 3 or 7 in layer 0
    let mask: Vec<bool> = (0..18).map(|op| op % 3 == 0 && op / 6 != 1).collect();
    graph.set_alive(0, mask);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for _ in 0..6000 {
        let a = space.random_architecture(&mut rng, Some(&graph)).unwrap();
        *counts.entry(space.arch_ops(&a)[0]).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    assert!(counts.keys().all(|&op| graph.is_alive(0, op)));
    let x2 = chi_square(&counts.values().copied().collect::<Vec<_>>());
    assert!(x2 < 16.27, "chi-square {x2}");
}

#[test]
fn crossover_takes_each_parent_half_the_time() {
    let space = SearchSpaceSpec::default_space();
    let graph = OperationGraph::new(&space);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut from_a, mut total) = (0usize, 0usize);
    for _ in 0..2000 {
        let a = space.random_architecture(&mut rng, None).unwrap();
        let b = space.random_architecture(&mut rng, None).unwrap();
        let child = crossover(&space, &graph, &a, &b, &mut rng);
        for l in 0..space.layer_count() {
            if a.layer_genes[l] != b.layer_genes[l] {
                total += 1;
                from_a += usize::from(child.layer_genes[l] == a.layer_genes[l]);
            } else {
                assert_eq!(child.layer_genes[l], a.layer_genes[l]);
            }
        }
    }
    let share = from_a as f64 / total as f64;
    assert!((share - 0.5).abs() < 0.01, "share {share}");
}

#[test]
fn mutation_changes_genes_at_the_configured_rate() {
    let space = SearchSpaceSpec::default_space();
    let graph = OperationGraph::new(&space);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut changed, mut total) = (0usize, 0usize);
    for _ in 0..5000 {
        let a = space.random_architecture(&mut rng, None).unwrap();
        let m = mutate(&space, &graph, &a, 0.1, &mut rng);
        for l in 0..space.layer_count() {
            total += 1;
            changed += usize::from(m.layer_genes[l] != a.layer_genes[l]);
        }
    }
    // a resampled gene keeps its value with probability 1/6
    let rate = changed as f64 / total as f64;
    let expected = 0.1 * 5.0 / 6.0;
    assert!(
        (rate - expected).abs() < 0.005,
        "rate {rate}, expected {expected}"
    );
}

#[test]
fn evolution_finds_the_optimum_of_a_tiny_space() {
    let space = compact_space(8, &[(4, 1, &[16])], &[3, 5, 7], &[3]).unwrap();
    let graph = OperationGraph::new(&space);
    assert_eq!(graph.alive_cardinality(), 81u32.into());
    let config = EvolutionConfig {
        population: 10,
        iterations: 10,
        elite_k: 3,
        offspring_crossover: 5,
        offspring_mutation: 5,
        ..Default::default()
    };
    let settings = SurrogateSettings {
        noise_sd: 0.0,
        ..Default::default()
    };
    for seed in 0..20 {
        let ev =
            SurrogateEvaluator::from_seed(&space, seed, settings.clone()).stand_alone_evaluator();
        let (best, score) = brute_force_best(&space, &graph, &ev, 100).unwrap();
        let out = evolve(
            &space,
            &graph,
            &config,
            &ev,
            seed,
            &mut NullSink,
            &Workers::sequential(),
        )
        .unwrap();
        assert_eq!(out.best.score, score, "seed {seed}");
        assert_eq!(out.best.arch.canonical(), best.canonical(), "seed {seed}");
    }
}

#[test]
fn alive_sampling_never_emits_a_dead_operation() {
    let space = SearchSpaceSpec::default_space();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let graph = common::random_graph(&space, &mut rng);
        for _ in 0..1000 {
            let a = space.random_architecture(&mut rng, Some(&graph)).unwrap();
            for (l, op) in space.arch_ops(&a).into_iter().enumerate() {
                assert!(graph.is_alive(l, op));
            }
        }
    }
}
