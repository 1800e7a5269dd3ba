#![allow(dead_code)]

use bsnas::shrinking::OperationGraph;
use bsnas::space::SearchSpaceSpec;
use rand::Rng;

/// Random alive masks that still satisfy the graph invariants.
pub fn random_graph<R: Rng>(space: &SearchSpaceSpec, rng: &mut R) -> OperationGraph {
    loop {
        let mut g = OperationGraph::new(space);
        let keep = rng.random_range(0.05..1.0);
        for l in 0..space.layer_count() {
            let mask = (0..space.op_count(l))
                .map(|_| rng.random_bool(keep))
                .collect();
            g.set_alive(l, mask);
        }
        if g.check_invariants().is_ok() {
            return g;
        }
    }
}

/// Index of a (kernel, expansion, channel) triple computed from the choice
/// lists: kernel-major, then expansion, then channel.
pub fn triple_index(
    kernels: &[u32],
    expansions: &[u32],
    channels: &[u32],
    k: u32,
    t: u32,
    c: u32,
) -> usize {
    let ki = kernels.iter().position(|&x| x == k).unwrap();
    let ti = expansions.iter().position(|&x| x == t).unwrap();
    let ci = channels.iter().position(|&x| x == c).unwrap();
    (ki * expansions.len() + ti) * channels.len() + ci
}
