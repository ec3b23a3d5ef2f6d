use super::io::{parse_trajectories_jsonl, tree_from_spec, TreeSpec};
use super::*;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn traj(id: &str, tokens: &[TokenId]) -> Trajectory {
    Trajectory::new(id, tokens.to_vec())
}

/// root segment [5,7] with leaf children [9] and [3]
fn small_pair() -> TrajectoryTree {
    build_forest(&[traj("a", &[5, 7, 9]), traj("b", &[5, 7, 3])]).unwrap()
}

/// root of 5 tokens with leaf children of 3 and 4 tokens
fn root_two_leaves() -> TrajectoryTree {
    build_forest(&[
        traj("a", &[1, 2, 3, 4, 5, 10, 11, 12]),
        traj("b", &[1, 2, 3, 4, 5, 20, 21, 22, 23]),
    ])
    .unwrap()
}

#[test]
fn lcp_merge_two_trajectories() {
    let tree = small_pair();
    let root = tree.node(tree.root());
    assert_eq!(root.segment, vec![5, 7]);
    assert_eq!(root.children.len(), 2);
    let kids: Vec<_> = root
        .children
        .iter()
        .map(|&c| tree.node(c).segment.clone())
        .collect();
    assert_eq!(kids, vec![vec![9], vec![3]]);
    assert_eq!(tree.node(root.children[0]).leaf_ids, vec!["a"]);
    assert_eq!(tree.node(root.children[1]).leaf_ids, vec!["b"]);
}

#[test]
fn single_trajectory_is_one_chain_node() {
    let tree = build_forest(&[traj("only", &[5, 7, 9])]).unwrap();
    assert_eq!(tree.node_count(), 1);
    let root = tree.node(tree.root());
    assert_eq!(root.segment, vec![5, 7, 9]);
    assert_eq!(root.leaf_ids, vec!["only"]);
}

#[test]
fn disjoint_first_tokens_get_synthetic_root() {
    let tree = build_forest(&[traj("a", &[1, 2]), traj("b", &[3, 4])]).unwrap();
    let root = tree.node(tree.root());
    assert!(root.segment.is_empty());
    assert_eq!(root.children.len(), 2);
    assert_eq!(tree.node(root.children[0]).segment, vec![1, 2]);
    assert_eq!(tree.node(root.children[1]).segment, vec![3, 4]);
}

#[test]
fn identical_trajectories_share_one_leaf() {
    let tree = build_forest(&[traj("a", &[4, 4, 4]), traj("b", &[4, 4, 4])]).unwrap();
    assert_eq!(tree.node_count(), 1);
    assert_eq!(tree.node(tree.root()).leaf_ids, vec!["a", "b"]);
    let ann = annotate(&tree);
    assert_eq!(ann.leaf_count[tree.root()], 2);
    assert!((por(&tree, &ann) - 0.5).abs() < 1e-15);
}

#[test]
fn build_errors() {
    assert!(matches!(build_forest(&[]), Err(ForestError::EmptyInput)));
    assert!(matches!(
        build_forest(&[traj("a", &[1]), traj("a", &[2])]),
        Err(ForestError::DuplicateId(_))
    ));
    assert!(matches!(
        build_forest(&[traj("a", &[])]),
        Err(ForestError::EmptyTrajectory(_))
    ));
    assert!(matches!(
        build_forest(&[traj("a", &[1, 2]), traj("b", &[1, 2, 3])]),
        Err(ForestError::PrefixOfAnother { .. })
    ));
    let mut bad = traj("a", &[1, 2]);
    bad.supervised_from = 2;
    assert!(matches!(
        build_forest(&[bad]),
        Err(ForestError::SupervisedFromOutOfRange { .. })
    ));
}

#[test]
fn annotate_chain() {
    // root(l=5) -> leaf(l=3), forced by a branch below the 5-token prefix
    let tree = build_forest(&[
        traj("a", &[1, 2, 3, 4, 5, 6, 7, 8]),
        traj("b", &[1, 2, 3, 4, 5, 9]),
    ])
    .unwrap();
    let ann = annotate(&tree);
    let root = tree.root();
    let leaf_a = tree.leaf_node("a").unwrap();
    assert_eq!(ann.prefix_len[root], 5);
    assert_eq!(ann.prefix_len[leaf_a], 8);
    assert_eq!(ann.leaf_count[leaf_a], 1);
    assert_eq!(ann.residual[leaf_a], 0);
    // chain root(5)->leaf(3) in isolation
    let chain = build_forest(&[traj("only", &[1, 2, 3, 4, 5, 6, 7, 8])]).unwrap();
    let cann = annotate(&chain);
    assert_eq!(cann.leaf_count[chain.root()], 1);
    assert_eq!(cann.residual[chain.root()], 0);
    assert_eq!(cann.subtree_tokens[chain.root()], 8);
}

#[test]
fn annotate_root_two_leaves() {
    let tree = root_two_leaves();
    let ann = annotate(&tree);
    let root = tree.root();
    assert_eq!(ann.prefix_len[root], 5);
    assert_eq!(ann.leaf_count[root], 2);
    assert_eq!(ann.residual[root], 7);
    assert_eq!(ann.subtree_tokens[root], 12);
}

#[test]
fn annotate_five_leaf_shape() {
    // r -> u -> {v1, v5}, v1 -> 3 leaves, v5 -> 2 leaves, as an explicit tree
    // so the r -> u chain is preserved
    let spec = TreeSpec {
        segment: vec![1],
        children: vec![TreeSpec {
            segment: vec![2],
            children: vec![
                TreeSpec {
                    segment: vec![3],
                    children: (0..3)
                        .map(|i| TreeSpec {
                            segment: vec![10 + i],
                            children: vec![],
                            leaf_ids: vec![format!("l{i}")],
                        })
                        .collect(),
                    leaf_ids: vec![],
                },
                TreeSpec {
                    segment: vec![4],
                    children: (3..5)
                        .map(|i| TreeSpec {
                            segment: vec![10 + i],
                            children: vec![],
                            leaf_ids: vec![format!("l{i}")],
                        })
                        .collect(),
                    leaf_ids: vec![],
                },
            ],
            leaf_ids: vec![],
        }],
        leaf_ids: vec![],
    };
    let tree = tree_from_spec(&spec).unwrap();
    let ann = annotate(&tree);
    let u = tree.node(tree.root()).children[0];
    let v1 = tree.node(u).children[0];
    assert_eq!(ann.leaf_count[u], 5);
    assert_eq!(ann.leaf_count[v1], 3);
}

#[test]
fn token_totals() {
    let tree = root_two_leaves();
    let ann = annotate(&tree);
    assert_eq!(linear_token_total(&tree, &ann), 17);
    assert_eq!(tree_token_total(&tree), 12);

    let chain = build_forest(&[traj("c", &[0, 1, 2, 3, 4, 5, 6, 7])]).unwrap();
    let cann = annotate(&chain);
    assert_eq!(linear_token_total(&chain, &cann), 8);
    assert_eq!(tree_token_total(&chain), 8);

    let pair = small_pair();
    let pann = annotate(&pair);
    assert_eq!(linear_token_total(&pair, &pann), 6);
    assert_eq!(tree_token_total(&pair), 4);
}

#[test]
fn por_examples() {
    let chain = build_forest(&[traj("c", &[1, 2, 3])]).unwrap();
    assert_eq!(por(&chain, &annotate(&chain)), 0.0);

    let tree = root_two_leaves();
    let ann = annotate(&tree);
    assert!((por(&tree, &ann) - (1.0 - 12.0 / 17.0)).abs() < 1e-15);
}

#[test]
fn curve_shapes_and_areas() {
    let tree = root_two_leaves();
    let ann = annotate(&tree);
    let curve = active_trajectory_curve(&tree, &ann);
    assert_eq!(curve.len(), 9);
    for p in &curve {
        let want_base = if p.position < 8 { 2 } else { 1 };
        let want_tree = if p.position < 5 {
            1
        } else if p.position < 8 {
            2
        } else {
            1
        };
        assert_eq!(p.baseline_active, want_base, "position {}", p.position);
        assert_eq!(p.tree_active, want_tree, "position {}", p.position);
    }
    let base_area: u64 = curve.iter().map(|p| p.baseline_active).sum();
    let tree_area: u64 = curve.iter().map(|p| p.tree_active).sum();
    assert_eq!(base_area, linear_token_total(&tree, &ann));
    assert_eq!(tree_area, tree_token_total(&tree));

    let chain = build_forest(&[traj("c", &[1, 2, 3])]).unwrap();
    for p in active_trajectory_curve(&chain, &annotate(&chain)) {
        assert_eq!(p.baseline_active, 1);
        assert_eq!(p.tree_active, 1);
    }
}

fn random_trajectory_set(rng: &mut StdRng) -> Vec<Trajectory> {
    // Draw from a small alphabet with short lengths so prefixes collide
    // often, then drop strict-prefix clashes (unrepresentable by design);
    // exact duplicates stay.
    let count = rng.gen_range(1..=8);
    let mut set: Vec<Trajectory> = Vec::new();
    'outer: while set.len() < count {
        let len = rng.gen_range(1..=6);
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..3)).collect();
        for t in &set {
            let min = t.tokens.len().min(tokens.len());
            if t.tokens[..min] == tokens[..min] && t.tokens.len() != tokens.len() {
                continue 'outer;
            }
        }
        set.push(traj(&format!("t{:02}", set.len()), &tokens));
    }
    set
}

#[test]
fn round_trip_reproduces_input_multiset() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..1000 {
        let set = random_trajectory_set(&mut rng);
        let tree = build_forest(&set).unwrap();
        let mut got: Vec<(String, Vec<TokenId>)> = tree
            .trajectories()
            .into_iter()
            .map(|t| (t.id, t.tokens))
            .collect();
        let mut want: Vec<(String, Vec<TokenId>)> = set
            .iter()
            .map(|t| (t.id.clone(), t.tokens.clone()))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
}

#[test]
fn annotation_identities_hold_on_random_trees() {
    let mut rng = StdRng::seed_from_u64(12);
    for _ in 0..300 {
        let set = random_trajectory_set(&mut rng);
        let tree = build_forest(&set).unwrap();
        let ann = annotate(&tree);
        let linear = linear_token_total(&tree, &ann);
        let total: u64 = tree
            .nodes()
            .map(|(u, n)| n.leaf_ids.len() as u64 * ann.prefix_len[u])
            .sum();
        assert_eq!(linear, total);
        assert_eq!(
            tree_token_total(&tree),
            tree.nodes().map(|(_, n)| n.len() as u64).sum::<u64>()
        );
        // L(u) + R(u) = L(u) + sum over subtree trajectories of (L(leaf) - L(u))
        for (u, _) in tree.nodes() {
            let mut sum = 0u64;
            for (v, n) in tree.nodes() {
                if !n.leaf_ids.is_empty() && tree.path_from_root(v).contains(&u) {
                    sum += n.leaf_ids.len() as u64 * (ann.prefix_len[v] - ann.prefix_len[u]);
                }
            }
            assert_eq!(ann.residual[u], sum);
        }
        let curve = active_trajectory_curve(&tree, &ann);
        assert_eq!(
            curve.iter().map(|p| p.baseline_active).sum::<u64>(),
            linear
        );
        assert_eq!(
            curve.iter().map(|p| p.tree_active).sum::<u64>(),
            tree_token_total(&tree)
        );
    }
}

#[test]
fn por_invariant_under_permutation_and_token_relabeling() {
    let mut rng = StdRng::seed_from_u64(13);
    for _ in 0..200 {
        let mut set = random_trajectory_set(&mut rng);
        let tree = build_forest(&set).unwrap();
        let base = por(&tree, &annotate(&tree));

        set.reverse();
        let permuted = build_forest(&set).unwrap();
        assert_eq!(por(&permuted, &annotate(&permuted)), base);

        // bijective token relabeling
        for t in &mut set {
            for tok in &mut t.tokens {
                *tok = 1000 - *tok;
            }
        }
        let relabeled = build_forest(&set).unwrap();
        assert_eq!(por(&relabeled, &annotate(&relabeled)), base);
    }
}

#[test]
fn jsonl_parsing_defaults_and_errors() {
    let input = "\
{\"id\": \"a\", \"tokens\": [1, 2, 3]}\n\
\n\
{\"id\": \"b\", \"tokens\": [4], \"weight\": 2.5, \"supervised_from\": 0}\n";
    let ts = parse_trajectories_jsonl(input.as_bytes()).unwrap();
    assert_eq!(ts.len(), 2);
    assert_eq!(ts[0].weight, 1.0);
    assert_eq!(ts[0].supervised_from, 0);
    assert_eq!(ts[1].weight, 2.5);

    let err = parse_trajectories_jsonl("{\"id\": \"a\"}\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 1"));
}

#[test]
fn tree_spec_validation() {
    let ok = TreeSpec {
        segment: vec![],
        children: vec![
            TreeSpec {
                segment: vec![1],
                children: vec![],
                leaf_ids: vec!["a".into()],
            },
            TreeSpec {
                segment: vec![2],
                children: vec![],
                leaf_ids: vec!["b".into()],
            },
        ],
        leaf_ids: vec![],
    };
    let tree = tree_from_spec(&ok).unwrap();
    assert_eq!(tree.node_count(), 3);
    assert_eq!(tree.trajectory_count(), 2);

    let dup_first = TreeSpec {
        segment: vec![9],
        children: vec![
            TreeSpec {
                segment: vec![1, 2],
                children: vec![],
                leaf_ids: vec!["a".into()],
            },
            TreeSpec {
                segment: vec![1, 3],
                children: vec![],
                leaf_ids: vec!["b".into()],
            },
        ],
        leaf_ids: vec![],
    };
    assert!(tree_from_spec(&dup_first).is_err());

    let bare = TreeSpec {
        segment: vec![1],
        children: vec![],
        leaf_ids: vec![],
    };
    assert!(tree_from_spec(&bare).is_err());

    let spec_roundtrip = tree_from_spec(&tree.to_spec()).unwrap();
    assert_eq!(spec_roundtrip.node_count(), tree.node_count());
}

#[test]
fn supervised_cutoff_is_subtree_max() {
    let tree = build_forest(&[
        traj("a", &[1, 2, 3, 4]).with_supervised_from(3),
        traj("b", &[1, 2, 9]).with_supervised_from(1),
    ])
    .unwrap();
    let root = tree.root();
    assert_eq!(tree.node(root).supervised_cutoff, 3);
    let leaf_b = tree.leaf_node("b").unwrap();
    assert_eq!(tree.node(leaf_b).supervised_cutoff, 1);
}
