use partseg::pairwise::{
    compute_edge_map, geodesic_distance, EdgeWeightGraph, GroupFeatures, ModelShape, PairLabels,
    PairwiseModel,
};
use partseg::potentials::PotentialMap;
use partseg::proposal::{propose, ProposalConfig};
use partseg::synth::{generate_scene, random_scene_spec, RandomSceneOptions};
use partseg::LabelGrammar;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, density: f64, seed: u64) -> EdgeWeightGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = EdgeWeightGraph::new(n);
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(density) {
                g.add_edge(a, b, rng.random_range(0.0..3.0)).unwrap();
            }
        }
    }
    g
}

/// Cheapest simple path by exhaustive enumeration.
fn brute_shortest(g: &EdgeWeightGraph, i: usize, j: usize) -> Option<f64> {
    fn walk(
        g: &EdgeWeightGraph,
        at: usize,
        to: usize,
        used: &mut Vec<bool>,
        cost: f64,
        best: &mut Option<f64>,
    ) {
        if at == to {
            *best = Some(best.map_or(cost, |b: f64| b.min(cost)));
            return;
        }
        for next in 0..g.len() {
            if !used[next] {
                if let Some(w) = g.weight(at, next) {
                    used[next] = true;
                    walk(g, next, to, used, cost + w, best);
                    used[next] = false;
                }
            }
        }
    }
    let mut used = vec![false; g.len()];
    used[i] = true;
    let mut best = None;
    walk(g, i, j, &mut used, 0.0, &mut best);
    best
}

#[test]
fn geodesic_matches_exhaustive_paths() {
    for seed in 0..20 {
        let g = random_graph(8, 0.35, seed);
        for i in 0..8 {
            for j in 0..8 {
                let ours = geodesic_distance(&g, i, j).unwrap();
                let want = brute_shortest(&g, i, j).unwrap_or(g.disconnected_distance());
                assert!(
                    (ours - want).abs() < 1e-9,
                    "seed {seed} ({i},{j}): {ours} vs {want}"
                );
            }
        }
    }
}

#[test]
fn graph_rejects_bad_edges() {
    let mut g = EdgeWeightGraph::new(3);
    assert!(g.add_edge(0, 0, 1.0).is_err());
    assert!(g.add_edge(0, 3, 1.0).is_err());
    assert!(g.add_edge(0, 1, -1.0).is_err());
    assert!(g.add_edge(0, 1, f64::NAN).is_err());
    assert!(geodesic_distance(&g, 0, 5).is_err());
}

fn scene_groups(seed: u64) -> Vec<(GroupFeatures, usize)> {
    let g = LabelGrammar::horse_cow();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_scene_spec(&g, &RandomSceneOptions::default(), &mut rng).unwrap();
    let s = generate_scene(&spec, &g, seed).unwrap();
    let edges = compute_edge_map(&s.scp).unwrap();
    let groups: Vec<_> = propose(&s.scp, &ProposalConfig::default())
        .unwrap()
        .iter()
        .map(|grp| {
            (
                GroupFeatures::new(grp, &s.obj, &s.scp, &edges).unwrap(),
                grp.len(),
            )
        })
        .collect();
    assert!(groups.iter().any(|g| g.1 > 2));
    groups
}

#[test]
fn swapped_pair_features_mirror() {
    for seed in 0..5 {
        for (f, n) in scene_groups(seed) {
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let a = f.pair(i, j).unwrap();
                    let b = f.pair(j, i).unwrap();
                    assert_eq!(a.desc_i, b.desc_j);
                    assert_eq!(a.desc_j, b.desc_i);
                    assert!((a.geodesic - b.geodesic).abs() < 1e-12);
                    assert!((a.euclidean - b.euclidean).abs() < 1e-12);
                    assert!((a.angle_sin + b.angle_sin).abs() < 1e-12);
                    assert!((a.angle_cos + b.angle_cos).abs() < 1e-12);
                    assert!((a.angle_sin.hypot(a.angle_cos) - 1.0).abs() < 1e-12);
                }
            }
            assert!(f.pair(0, 0).is_err());
            assert!(f.pair(0, n).is_err());
        }
    }
}

#[test]
fn descriptors_are_distributions() {
    for (f, n) in scene_groups(9) {
        let area: f64 = (0..n).map(|i| f.descriptor(i).normalized_area).sum();
        assert!((area - 1.0).abs() < 1e-9);
        for i in 0..n {
            let d = f.descriptor(i);
            for v in [&d.mean_object_potentials, &d.mean_scp_potentials] {
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn edge_map_is_normalized() {
    let flat = PotentialMap::uniform(5, 6, 3);
    assert!(compute_edge_map(&flat)
        .unwrap()
        .values()
        .iter()
        .all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = (0..8 * 8 * 3)
        .map(|_| rng.random_range(0.01..1.0))
        .collect();
    let m = PotentialMap::normalize(8, 8, 3, raw).unwrap();
    let e = compute_edge_map(&m).unwrap();
    let max = e.values().iter().copied().fold(0.0, f64::max);
    let min = e.values().iter().copied().fold(1.0, f64::min);
    assert_eq!((min, max), (0.0, 1.0));
    assert!(compute_edge_map(&PotentialMap::uniform(1, 1, 2)).is_err());
}

proptest! {
    #[test]
    fn geodesic_is_a_metric(seed: u64, density in 0.1f64..0.9) {
        let g = random_graph(7, density, seed);
        let d: Vec<Vec<f64>> = (0..7).map(|i| g.distances_from(i).unwrap()).collect();
        for i in 0..7 {
            prop_assert_eq!(d[i][i], 0.0);
            for j in 0..7 {
                prop_assert!((d[i][j] - d[j][i]).abs() < 1e-9);
                for k in 0..7 {
                    prop_assert!(d[i][k] <= d[i][j] + d[j][k] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn potential_is_finite_and_nonnegative(seed: u64, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = ModelShape { num_objects: 3, num_scps: 5, hidden: 8, dropout: 0.0 };
        let mut m = PairwiseModel::random(shape, &mut rng);
        // large weights push the softmax toward zeros; the floor must hold
        m.params_mut().iter_mut().for_each(|p| *p *= scale);
        let x: Vec<f64> = (0..shape.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probs = m.forward_input(&x).unwrap();
        for oi in 0..3 {
            for sj in 0..5 {
                let labels = PairLabels { object_i: oi, object_j: 2 - oi, scp_i: 4 - sj, scp_j: sj };
                let e = probs.energy(&labels).unwrap();
                prop_assert!(e.is_finite() && e >= 0.0);
            }
        }
    }
}
