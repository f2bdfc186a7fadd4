use partseg::crf::{
    brute_force_map, build_fcrf, decode_all, decode_maps, lbp_map, CrfParams, DomainMode,
    FactorGraph, LbpConfig, NodeDomain,
};
use partseg::pairwise::{compute_edge_map, GroupFeatures, ModelShape, PairwiseModel};
use partseg::potentials::PotentialMap;
use partseg::proposal::{LabelMap, Segment, SegmentGroup};
use partseg::{Error, JointLabel, LabelGrammar};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(sizes: &[usize], seed: u64, lambda_e: f64) -> FactorGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sizes.len();
    let domains = sizes
        .iter()
        .map(|&k| NodeDomain::new((0..k).map(|s| JointLabel::new(1, s)).collect()).unwrap())
        .collect();
    let unaries = sizes
        .iter()
        .map(|&k| (0..k).map(|_| rng.random_range(0.0..5.0)).collect())
        .collect();
    let mut tables = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            tables.push(
                (0..sizes[i] * sizes[j])
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect(),
            );
        }
    }
    FactorGraph::new(domains, unaries, tables, lambda_e, 0.3).unwrap()
}

fn assignments(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &k in sizes {
        out = out
            .into_iter()
            .flat_map(|a| {
                (0..k).map(move |x| {
                    let mut b = a.clone();
                    b.push(x);
                    b
                })
            })
            .collect();
    }
    out
}

fn manual_energy(fg: &FactorGraph, a: &[usize]) -> f64 {
    let n = a.len();
    let mut e: f64 = (0..n).map(|i| fg.unary(i)[a[i]]).sum();
    for i in 0..n {
        for j in i + 1..n {
            e += fg.lambda_e() * fg.pairwise(i, j, a[i], a[j]);
        }
    }
    e
}

#[test]
fn brute_force_finds_the_true_minimum() {
    for seed in 0..30 {
        let sizes = [2 + seed as usize % 3, 3, 2, 4];
        let fg = graph(&sizes, seed, 2.0);
        let best = assignments(&sizes)
            .iter()
            .map(|a| manual_energy(&fg, a))
            .fold(f64::INFINITY, f64::min);
        let exact = brute_force_map(&fg).unwrap();
        assert!((exact.total_energy - best).abs() < 1e-9);
    }
}

#[test]
fn single_node_takes_unary_argmin() {
    let d = NodeDomain::new(vec![
        JointLabel::new(0, 0),
        JointLabel::new(1, 2),
        JointLabel::new(2, 2),
    ])
    .unwrap();
    let fg = FactorGraph::new(vec![d], vec![vec![3.0, 1.0, 1.0]], vec![], 2.0, 0.3).unwrap();
    let lab = lbp_map(&fg, &LbpConfig::default());
    assert_eq!(lab.assignment, vec![1]);
    assert_eq!(lab.labels, vec![JointLabel::new(1, 2)]);
    assert!(lab.converged);
    assert_eq!(brute_force_map(&fg).unwrap().assignment, vec![1]);
}

#[test]
fn factor_graph_validates_shapes() {
    let d = || NodeDomain::new(vec![JointLabel::new(0, 0), JointLabel::new(1, 1)]).unwrap();
    assert!(FactorGraph::new(vec![], vec![], vec![], 1.0, 1.0).is_err());
    assert!(FactorGraph::new(vec![d()], vec![vec![0.0]], vec![], 1.0, 1.0).is_err());
    assert!(FactorGraph::new(vec![d(), d()], vec![vec![0.0; 2]; 2], vec![], 1.0, 1.0).is_err());
    assert!(FactorGraph::new(
        vec![d(), d()],
        vec![vec![0.0; 2]; 2],
        vec![vec![0.0; 3]],
        1.0,
        1.0
    )
    .is_err());
    assert!(FactorGraph::new(vec![d()], vec![vec![f64::NAN, 0.0]], vec![], 1.0, 1.0).is_err());
    assert!(NodeDomain::new(vec![]).is_err());
    let ok = FactorGraph::new(
        vec![d(), d()],
        vec![vec![0.0; 2]; 2],
        vec![vec![0.0; 4]],
        1.0,
        1.0,
    )
    .unwrap();
    assert!(ok.energy(&[0]).is_err());
    assert!(ok.energy(&[0, 2]).is_err());
}

#[test]
fn brute_force_refuses_huge_spaces() {
    let fg = graph(&[8; 9], 1, 1.0);
    assert!(matches!(
        brute_force_map(&fg),
        Err(Error::SearchSpaceTooLarge { .. })
    ));
}

#[test]
fn domains_follow_the_grammar() {
    for g in [LabelGrammar::horse_cow(), LabelGrammar::quadrupeds()] {
        let connections: Vec<JointLabel> = g.connections().collect();
        for scp in 0..g.num_scps() {
            let all = NodeDomain::for_segment(&g, scp, DomainMode::All).unwrap();
            assert_eq!(all.labels(), &connections[..]);
            let same = NodeDomain::for_segment(&g, scp, DomainMode::SameMeaning).unwrap();
            assert_eq!(same.labels()[0], JointLabel::new(0, 0));
            let meaning = g.meaning_of(scp).unwrap();
            for l in &same.labels()[1..] {
                assert!(g.is_consistent(l.object, l.scp).unwrap());
                assert_eq!(g.meaning_of(l.scp).unwrap(), meaning);
            }
            let expected = connections
                .iter()
                .filter(|l| l.scp != 0 && g.meaning_of(l.scp).unwrap() == meaning)
                .count();
            assert_eq!(same.len(), 1 + if meaning.is_some() { expected } else { 0 });
        }
        assert!(NodeDomain::for_segment(&g, g.num_scps(), DomainMode::All).is_err());
    }
}

fn rect(
    id: usize,
    scp: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Segment {
    let px = rows
        .flat_map(|r| cols.clone().map(move |c| (r, c)))
        .collect();
    Segment::from_pixels(id, scp, px).unwrap()
}

fn random_maps(h: usize, w: usize, g: &LabelGrammar, seed: u64) -> (PotentialMap, PotentialMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = |c: usize| {
        let raw = (0..h * w * c)
            .map(|_| rng.random_range(0.01..1.0))
            .collect();
        PotentialMap::normalize(h, w, c, raw).unwrap()
    };
    (map(g.num_objects()), map(g.num_scps()))
}

#[test]
fn three_node_crf_structure() {
    let g = LabelGrammar::horse_cow();
    let (h, w) = (6, 9);
    let (obj, scp) = random_maps(h, w, &g, 11);
    // head, body, leg laid out side by side
    let group = SegmentGroup::new(vec![
        rect(0, 1, 0..3, 0..3),
        rect(1, 3, 0..3, 3..9),
        rect(2, 4, 3..6, 4..6),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = PairwiseModel::random(ModelShape::for_grammar(&g), &mut rng);
    let edges = compute_edge_map(&scp).unwrap();
    let params = CrfParams::default();
    let fg = build_fcrf(&group, &obj, &scp, &edges, &model, &g, &params).unwrap();
    assert_eq!((fg.num_nodes(), fg.num_edges()), (3, 3));
    let conns: Vec<JointLabel> = g.connections().collect();
    let feats = GroupFeatures::new(&group, &obj, &scp, &edges).unwrap();
    let nl = |p: f64| -p.max(1e-12).ln();
    for (i, seg) in group.segments().iter().enumerate() {
        assert_eq!(fg.domain(i).labels(), &conns[..]);
        for (a, l) in conns.iter().enumerate() {
            let mut want = 0.0;
            for &(r, c) in seg.pixels() {
                want += nl(obj.get(r, c, l.object)) + params.lambda_p * nl(scp.get(r, c, l.scp));
            }
            assert!((fg.unary(i)[a] - want).abs() < 1e-9);
        }
    }
    for i in 0..3 {
        for j in i + 1..3 {
            let fij = model.forward(&feats.pair(i, j).unwrap()).unwrap();
            let fji = model.forward(&feats.pair(j, i).unwrap()).unwrap();
            for (a, la) in conns.iter().enumerate() {
                for (b, lb) in conns.iter().enumerate() {
                    let want = nl(fij.object_i[la.object])
                        + nl(fij.object_j[lb.object])
                        + nl(fij.scp_i[la.scp])
                        + nl(fij.scp_j[lb.scp])
                        + nl(fji.object_i[lb.object])
                        + nl(fji.object_j[la.object])
                        + nl(fji.scp_i[lb.scp])
                        + nl(fji.scp_j[la.scp]);
                    assert!((fg.pairwise(i, j, a, b) - want).abs() < 1e-9);
                    assert!((fg.pairwise(j, i, b, a) - want).abs() < 1e-9);
                }
            }
        }
    }
    let lab = lbp_map(&fg, &LbpConfig::default());
    assert!((lab.total_energy - fg.energy(&lab.assignment).unwrap()).abs() < 1e-9);
}

#[test]
fn build_rejects_mismatched_inputs() {
    let g = LabelGrammar::horse_cow();
    let (obj, scp) = random_maps(4, 4, &g, 1);
    let group = SegmentGroup::new(vec![rect(0, 1, 0..2, 0..2)]).unwrap();
    let edges = compute_edge_map(&scp).unwrap();
    let quad = LabelGrammar::quadrupeds();
    let wrong = PairwiseModel::zeros(ModelShape::for_grammar(&quad));
    let params = CrfParams::default();
    assert!(build_fcrf(&group, &obj, &scp, &edges, &wrong, &quad, &params).is_err());
    assert!(build_fcrf(&group, &obj, &scp, &edges, &wrong, &g, &params).is_err());
}

#[test]
fn decoding_groups_matches_separate_crops() {
    let g = LabelGrammar::horse_cow();
    let (h, w) = (8, 12);
    let groups = vec![
        SegmentGroup::new(vec![rect(0, 1, 0..2, 0..2), rect(1, 3, 0..3, 2..5)]).unwrap(),
        SegmentGroup::new(vec![rect(2, 4, 5..8, 8..12)]).unwrap(),
    ];
    let conns: Vec<JointLabel> = g.connections().collect();
    let labelings: Vec<_> = groups
        .iter()
        .enumerate()
        .map(|(k, grp)| {
            let n = grp.len();
            let domains = vec![NodeDomain::new(conns.clone()).unwrap(); n];
            let m = conns.len();
            let unaries = (0..n)
                .map(|i| (0..m).map(|a| ((a + i + k) % m) as f64).collect())
                .collect();
            let tables = vec![vec![0.0; m * m]; n * (n - 1) / 2];
            let fg = FactorGraph::new(domains, unaries, tables, 1.0, 1.0).unwrap();
            lbp_map(&fg, &LbpConfig::default())
        })
        .collect();
    let (obj, part) = decode_all(&groups, &labelings, &g, h, w).unwrap();
    let mut want_obj = LabelMap::filled(h, w, 0);
    let mut want_part = LabelMap::filled(h, w, 0);
    for (grp, lab) in groups.iter().zip(&labelings) {
        let (o, p) = decode_maps(grp, lab, &g, h, w).unwrap();
        for r in 0..h {
            for c in 0..w {
                if o.get(r, c) != 0 || p.get(r, c) != 0 {
                    want_obj.set(r, c, o.get(r, c));
                    want_part.set(r, c, p.get(r, c));
                }
            }
        }
        for (seg, l) in grp.segments().iter().zip(&lab.labels) {
            let part_label = if l.object == 0 {
                0
            } else {
                g.part_index(l.object, l.scp).unwrap()
            };
            for &(r, c) in seg.pixels() {
                assert_eq!(o.get(r, c) as usize, l.object);
                assert_eq!(p.get(r, c) as usize, part_label);
            }
        }
    }
    assert_eq!(obj, want_obj);
    assert_eq!(part, want_part);
    assert!(decode_all(&groups, &labelings[..1], &g, h, w).is_err());
}

proptest! {
    #[test]
    fn energy_matches_manual_sum(seed: u64, n in 1usize..5, lambda_e in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..5)).collect();
        let fg = graph(&sizes, seed, lambda_e);
        for a in assignments(&sizes) {
            prop_assert!((fg.energy(&a).unwrap() - manual_energy(&fg, &a)).abs() < 1e-9);
        }
        let lab = lbp_map(&fg, &LbpConfig::default());
        prop_assert!((lab.total_energy - manual_energy(&fg, &lab.assignment)).abs() < 1e-9);
        let exact = brute_force_map(&fg).unwrap();
        prop_assert!(exact.total_energy <= lab.total_energy + 1e-12);
        for (i, &x) in lab.assignment.iter().enumerate() {
            prop_assert_eq!(lab.labels[i], fg.domain(i).labels()[x]);
        }
    }

    #[test]
    fn constant_pairwise_yields_unary_argmins(seed: u64, n in 1usize..6, level in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..6)).collect();
        let domains = sizes.iter().map(|&k| NodeDomain::new((0..k).map(|s| JointLabel::new(1, s)).collect()).unwrap()).collect();
        let unaries: Vec<Vec<f64>> = sizes.iter().map(|&k| (0..k).map(|_| rng.random_range(0..4) as f64).collect()).collect();
        let mut tables = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                tables.push(vec![level; sizes[i] * sizes[j]]);
            }
        }
        let fg = FactorGraph::new(domains, unaries.clone(), tables, 2.0, 0.3).unwrap();
        let want: Vec<usize> = unaries
            .iter()
            .map(|u| (0..u.len()).fold(0, |b, k| if u[k] < u[b] { k } else { b }))
            .collect();
        prop_assert_eq!(&lbp_map(&fg, &LbpConfig::default()).assignment, &want);
        prop_assert_eq!(&brute_force_map(&fg).unwrap().assignment, &want);
    }

    #[test]
    fn shifting_a_node_keeps_the_map(seed: u64, shift in -10.0f64..10.0) {
        let sizes = [3, 2, 4];
        let fg = graph(&sizes, seed, 1.5);
        let domains: Vec<NodeDomain> = (0..3).map(|i| fg.domain(i).clone()).collect();
        let unaries: Vec<Vec<f64>> = (0..3)
            .map(|i| fg.unary(i).iter().map(|u| u + if i == 1 { shift } else { 0.0 }).collect())
            .collect();
        let mut tables = Vec::new();
        for i in 0..3 {
            for j in i + 1..3 {
                tables.push((0..sizes[i] * sizes[j]).map(|t| fg.pairwise(i, j, t / sizes[j], t % sizes[j]) + shift.abs()).collect());
            }
        }
        let moved = FactorGraph::new(domains, unaries, tables, 1.5, 0.3).unwrap();
        let a = brute_force_map(&fg).unwrap();
        let b = brute_force_map(&moved).unwrap();
        prop_assert_eq!(&a.assignment, &b.assignment);
        prop_assert!((b.total_energy - a.total_energy - shift - 3.0 * 1.5 * shift.abs()).abs() < 1e-9);
    }
}
