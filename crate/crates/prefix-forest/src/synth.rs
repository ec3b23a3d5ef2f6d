//! Synthetic dataset generators: random trajectory trees for randomized
//! tests and benchmark corpora, plus a constructor that hits an exact target
//! overlap ratio with fixed leaf counts.

use rand::Rng;

use crate::forest::io::{tree_from_spec, TreeSpec};
use crate::forest::{build_forest, Trajectory, TrajectoryTree};

#[derive(Debug, Clone)]
pub struct RandomTreeParams {
    /// Trajectories per tree (before duplication).
    pub leaves: std::ops::RangeInclusive<usize>,
    pub segment_len: std::ops::RangeInclusive<usize>,
    /// Token ids drawn below this bound.
    pub vocab: u32,
    /// Chance per trajectory of an exact duplicate under a fresh id, which
    /// exercises multi-id leaf nodes.
    pub duplicate_prob: f64,
    /// Draw weights from this range instead of using 1.0.
    pub weight_range: Option<(f64, f64)>,
    /// Chance of a nonzero supervised_from per trajectory.
    pub supervised_prob: f64,
}

impl Default for RandomTreeParams {
    fn default() -> Self {
        RandomTreeParams {
            leaves: 1..=8,
            segment_len: 1..=10,
            vocab: 97,
            duplicate_prob: 0.0,
            weight_range: None,
            supervised_prob: 0.0,
        }
    }
}

/// Random compact tree shape read back as its root-to-leaf trajectories.
/// Internal nodes branch at least twofold with distinct child first tokens,
/// so rebuilding the trie reproduces the shape.
pub fn random_trajectories(rng: &mut impl Rng, params: &RandomTreeParams) -> Vec<Trajectory> {
    let target = rng.gen_range(params.leaves.clone());
    let mut paths: Vec<Vec<u32>> = Vec::new();
    grow(rng, params, target, &mut Vec::new(), &mut paths, 0);
    let mut out = Vec::with_capacity(paths.len());
    for (i, tokens) in paths.into_iter().enumerate() {
        let mut t = Trajectory::new(format!("t{i:02}"), tokens);
        if let Some((lo, hi)) = params.weight_range {
            t.weight = rng.gen_range(lo..=hi);
        }
        if params.supervised_prob > 0.0 && rng.gen_bool(params.supervised_prob) {
            t.supervised_from = rng.gen_range(0..t.tokens.len());
        }
        out.push(t);
    }
    let mut dup_serial = 0;
    let mut dups = Vec::new();
    for t in &out {
        if params.duplicate_prob > 0.0 && rng.gen_bool(params.duplicate_prob) {
            let mut d = t.clone();
            d.id = format!("d{dup_serial:02}");
            dup_serial += 1;
            dups.push(d);
        }
    }
    out.extend(dups);
    out
}

fn grow(
    rng: &mut impl Rng,
    params: &RandomTreeParams,
    leaves: usize,
    prefix: &mut Vec<u32>,
    paths: &mut Vec<Vec<u32>>,
    depth: usize,
) {
    let seg_len = rng.gen_range(params.segment_len.clone());
    let before = prefix.len();
    for i in 0..seg_len {
        // distinct first tokens among siblings come from the caller below;
        // the rest of the segment is arbitrary
        if i > 0 || depth == 0 {
            prefix.push(rng.gen_range(0..params.vocab));
        }
    }
    if leaves == 1 || depth > 6 {
        paths.push(prefix.clone());
    } else {
        let way = rng.gen_range(2..=3usize.min(leaves));
        let mut split = vec![1usize; way];
        for _ in 0..(leaves - way) {
            split[rng.gen_range(0..way)] += 1;
        }
        // child segments start with distinct tokens
        let mut firsts: Vec<u32> = Vec::new();
        while firsts.len() < way {
            let t = rng.gen_range(0..params.vocab);
            if !firsts.contains(&t) {
                firsts.push(t);
            }
        }
        for (child, first) in split.into_iter().zip(firsts) {
            prefix.push(first);
            grow(rng, params, child, prefix, paths, depth + 1);
            prefix.pop();
        }
    }
    prefix.truncate(before);
}

pub fn random_tree(rng: &mut impl Rng, params: &RandomTreeParams) -> TrajectoryTree {
    build_forest(&random_trajectories(rng, params)).expect("generator avoids invalid inputs")
}

/// Randomized tree with approximately `nodes` nodes and bounded depth, built
/// by expanding a random frontier leaf until the budget runs out. Cheap to
/// construct even for very large instances.
pub fn big_synthetic_tree(rng: &mut impl Rng, nodes: usize) -> TrajectoryTree {
    struct Arena {
        segment: Vec<u32>,
        children: Vec<usize>,
        depth: usize,
    }
    let seg = |rng: &mut dyn rand::RngCore, first: u32| -> Vec<u32> {
        let len = rng.gen_range(1..=10usize);
        std::iter::once(first)
            .chain((1..len).map(|_| rng.gen_range(0..97u32)))
            .collect()
    };
    let root_first = rng.gen_range(0..97);
    let mut arena = vec![Arena {
        segment: seg(rng, root_first),
        children: Vec::new(),
        depth: 0,
    }];
    let mut frontier = vec![0usize];
    while arena.len() < nodes && !frontier.is_empty() {
        let u = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        if arena[u].depth >= 16 {
            continue;
        }
        let fanout = rng.gen_range(2..=4usize).min(nodes - arena.len());
        for i in 0..fanout {
            let child = Arena {
                segment: seg(rng, i as u32), // distinct sibling first tokens
                children: Vec::new(),
                depth: arena[u].depth + 1,
            };
            let id = arena.len();
            arena.push(child);
            arena[u].children.push(id);
            frontier.push(id);
        }
    }
    fn to_spec(arena: &[Arena], u: usize, serial: &mut usize) -> TreeSpec {
        let leaf_ids = if arena[u].children.is_empty() {
            let id = format!("t{serial:06}");
            *serial += 1;
            vec![id]
        } else {
            vec![]
        };
        TreeSpec {
            segment: arena[u].segment.clone(),
            children: arena[u]
                .children
                .iter()
                .map(|&c| to_spec(arena, c, serial))
                .collect(),
            leaf_ids,
        }
    }
    let mut serial = 0;
    let spec = to_spec(&arena, 0, &mut serial);
    tree_from_spec(&spec).expect("generated spec is valid")
}

/// Star-shaped dataset whose overlap ratio is exactly `num/den`: `leaves`
/// trajectories share a prefix of `a` tokens and continue with `b` distinct
/// tokens each. Solving 1 - (a + k*b) / (k*(a + b)) = num/den over the
/// integers gives a/b = k*num / (k*(den-num) - den), reduced by the gcd.
/// `None` when the leaf count is too small for the ratio (needs
/// k > den/(den-num)). Returns the trajectories and the exact target.
pub fn por_target_trajectories(num: u64, den: u64, leaves: u64) -> Option<(Vec<Trajectory>, f64)> {
    assert!(num < den, "overlap ratio must be below 1");
    let k = leaves;
    let denom = (k * (den - num)).checked_sub(den).filter(|&d| d > 0)?;
    let numer = k * num;
    let g = gcd(numer, denom);
    let (a, b) = (numer / g, denom / g);
    if a == 0 {
        return None; // num = 0: no shared prefix to construct
    }
    let mut out = Vec::with_capacity(k as usize);
    for i in 0..k {
        let mut tokens: Vec<u32> = (0..a as u32).collect();
        tokens.extend((0..b as u32).map(|j| 1_000_000 + i as u32 * 1000 + j));
        out.push(Trajectory::new(format!("t{i:03}"), tokens));
    }
    Some((out, num as f64 / den as f64))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{annotate, por};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn random_trees_respect_bounds() {
        let mut rng = StdRng::seed_from_u64(5);
        let params = RandomTreeParams::default();
        for _ in 0..200 {
            let tree = random_tree(&mut rng, &params);
            assert!(tree.trajectory_count() <= 8);
            assert!(tree.node_count() <= 16, "nodes: {}", tree.node_count());
            for (_, node) in tree.nodes() {
                assert!(node.len() <= 10);
            }
        }
    }

    #[test]
    fn duplicates_and_weights_show_up() {
        let mut rng = StdRng::seed_from_u64(6);
        let params = RandomTreeParams {
            duplicate_prob: 0.5,
            weight_range: Some((0.5, 2.0)),
            ..Default::default()
        };
        let mut saw_dup = false;
        for _ in 0..50 {
            let tree = random_tree(&mut rng, &params);
            saw_dup |= tree.nodes().any(|(_, n)| n.leaf_ids.len() > 1);
        }
        assert!(saw_dup);
    }

    #[test]
    fn por_targets_hit_exactly() {
        for (num, den, leaves) in [(1, 5, 8), (1, 2, 8), (7, 10, 8), (23, 25, 16)] {
            let (trajectories, target) =
                por_target_trajectories(num, den, leaves).expect("solvable target");
            let tree = build_forest(&trajectories).unwrap();
            let ann = annotate(&tree);
            assert!(
                (por(&tree, &ann) - target).abs() < 1e-12,
                "target {num}/{den}"
            );
        }
        // 92% needs at least 13 leaves
        assert!(por_target_trajectories(23, 25, 8).is_none());
    }

    #[test]
    fn big_tree_size_is_close() {
        let mut rng = StdRng::seed_from_u64(7);
        let tree = big_synthetic_tree(&mut rng, 50_000);
        assert!(tree.node_count() > 10_000);
    }
}
