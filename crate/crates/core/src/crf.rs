//! Fully-connected CRF over one segment group.
//!
//! Nodes are the segments of a group, each labelled with a joint
//! (object, SCP) pair drawn from its [`NodeDomain`]. The energy of an
//! assignment `a` is
//!
//! ```text
//! E(a) = Σ_i U_i(a_i) + λ_e · Σ_{i<j} T_ij(a_i, a_j)
//! ```
//!
//! where `U_i` already folds in the SCP weight `λ_p` and `T_ij` holds the
//! pairwise energy of both orderings of the pair. Inconsistent pairs never
//! enter a domain, so the grammar constraint costs nothing at inference time.

use serde::{Deserialize, Serialize};

use crate::grammar::{JointLabel, LabelGrammar};
use crate::pairwise::{EdgeMap, GroupFeatures, PairLabels, PairwiseModel};
use crate::potentials::PotentialMap;
use crate::proposal::{LabelMap, Segment, SegmentGroup};
use crate::{neg_log, Error, Result};

pub const DEFAULT_LAMBDA_E: f64 = 2.0;
pub const DEFAULT_LAMBDA_P: f64 = 0.3;
pub const DEFAULT_MAX_ITERS: usize = 5;
pub const DEFAULT_DAMPING: f64 = 0.5;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Which joint labels a segment may take.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainMode {
    /// Every grammar-consistent pair.
    #[default]
    All,
    /// Only pairs whose SCP has the same meaning as the proposed SCP.
    SameMeaning,
}

/// Admissible labels of one node. Background `(0, 0)` always comes first,
/// so a spurious segment can be switched off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDomain {
    labels: Vec<JointLabel>,
}

impl NodeDomain {
    pub fn new(labels: Vec<JointLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty node domain".into()));
        }
        Ok(Self { labels })
    }

    pub fn for_segment(g: &LabelGrammar, proposed_scp: usize, mode: DomainMode) -> Result<Self> {
        let meaning = g.meaning_of(proposed_scp)?;
        let labels = g
            .connections()
            .filter(|l| match mode {
                DomainMode::All => true,
                DomainMode::SameMeaning => {
                    l.scp == 0 || g.meaning_of(l.scp).ok().flatten() == meaning
                }
            })
            .collect();
        Self::new(labels)
    }

    pub fn labels(&self) -> &[JointLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: JointLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

/// `U(l) = Σ_px −log P_obj(l.object) + λ_p · Σ_px −log P_scp(l.scp)`.
pub fn unary_energy(
    seg: &Segment,
    obj: &PotentialMap,
    scp: &PotentialMap,
    label: JointLabel,
    lambda_p: f64,
) -> Result<f64> {
    for (map, index, what) in [(obj, label.object, "object"), (scp, label.scp, "scp")] {
        if index >= map.channels() {
            return Err(Error::IndexOutOfRange {
                what,
                index,
                len: map.channels(),
            });
        }
    }
    let (mut eo, mut es) = (0.0, 0.0);
    for &(r, c) in seg.pixels() {
        if r >= obj.height() || c >= obj.width() || !obj.same_size(scp) {
            return Err(Error::ShapeMismatch(format!(
                "segment pixel ({r}, {c}) outside the potential maps"
            )));
        }
        eo += neg_log(obj.get(r, c, label.object));
        es += neg_log(scp.get(r, c, label.scp));
    }
    Ok(eo + lambda_p * es)
}

/// Weights of the CRF energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub domain: DomainMode,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            lambda_e: DEFAULT_LAMBDA_E,
            lambda_p: DEFAULT_LAMBDA_P,
            domain: DomainMode::All,
        }
    }
}

/// Immutable fully-connected factor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    domains: Vec<NodeDomain>,
    unaries: Vec<Vec<f64>>,
    // tables for pairs (0,1), (0,2), ..., (1,2), ...; row-major |D_i|×|D_j|
    tables: Vec<Vec<f64>>,
    lambda_e: f64,
    lambda_p: f64,
}

/// Position of pair `(i, j)`, `i < j`, in the lexicographic edge list.
fn edge_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl FactorGraph {
    /// `tables` must list every pair `(i, j)`, `i < j`, in lexicographic order.
    pub fn new(
        domains: Vec<NodeDomain>,
        unaries: Vec<Vec<f64>>,
        tables: Vec<Vec<f64>>,
        lambda_e: f64,
        lambda_p: f64,
    ) -> Result<Self> {
        let n = domains.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "factor graph needs at least one node".into(),
            ));
        }
        if unaries.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} domains but {} unary tables",
                unaries.len()
            )));
        }
        for (i, (d, u)) in domains.iter().zip(&unaries).enumerate() {
            if d.is_empty() || u.len() != d.len() {
                return Err(Error::ShapeMismatch(format!(
                    "node {i}: domain of {} labels, unary table of {}",
                    d.len(),
                    u.len()
                )));
            }
        }
        if tables.len() != n * (n - 1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "{n} nodes need {} edge tables, got {}",
                n * (n - 1) / 2,
                tables.len()
            )));
        }
        for i in 0..n {
            for j in i + 1..n {
                let t = &tables[edge_index(n, i, j)];
                if t.len() != domains[i].len() * domains[j].len() {
                    return Err(Error::ShapeMismatch(format!(
                        "edge ({i}, {j}) table has {} entries, expected {}",
                        t.len(),
                        domains[i].len() * domains[j].len()
                    )));
                }
            }
        }
        let finite = unaries
            .iter()
            .chain(&tables)
            .flatten()
            .all(|v| v.is_finite());
        if !finite || !lambda_e.is_finite() || !lambda_p.is_finite() {
            return Err(Error::InvalidArgument(
                "non-finite energy in factor graph".into(),
            ));
        }
        Ok(Self {
            domains,
            unaries,
            tables,
            lambda_e,
            lambda_p,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.domains.len()
    }

    pub fn num_edges(&self) -> usize {
        self.tables.len()
    }

    pub fn domain(&self, i: usize) -> &NodeDomain {
        &self.domains[i]
    }

    pub fn unary(&self, i: usize) -> &[f64] {
        &self.unaries[i]
    }

    pub fn lambda_e(&self) -> f64 {
        self.lambda_e
    }

    pub fn lambda_p(&self) -> f64 {
        self.lambda_p
    }

    /// Unweighted pairwise energy of `(a, b)` on edge `(i, j)`, either order.
    pub fn pairwise(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        let n = self.num_nodes();
        if i < j {
            self.tables[edge_index(n, i, j)][a * self.domains[j].len() + b]
        } else {
            self.tables[edge_index(n, j, i)][b * self.domains[i].len() + a]
        }
    }

    /// Total energy of an assignment given as domain positions.
    pub fn energy(&self, assignment: &[usize]) -> Result<f64> {
        let n = self.num_nodes();
        if assignment.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "assignment has {} entries for {n} nodes",
                assignment.len()
            )));
        }
        for (i, &a) in assignment.iter().enumerate() {
            if a >= self.domains[i].len() {
                return Err(Error::IndexOutOfRange {
                    what: "domain position",
                    index: a,
                    len: self.domains[i].len(),
                });
            }
        }
        let mut e: f64 = (0..n).map(|i| self.unaries[i][assignment[i]]).sum();
        for i in 0..n {
            for j in i + 1..n {
                e += self.lambda_e * self.pairwise(i, j, assignment[i], assignment[j]);
            }
        }
        Ok(e)
    }

    fn labeling(&self, assignment: Vec<usize>, iterations: usize, converged: bool) -> Labeling {
        let total_energy = self.energy(&assignment).expect("assignment within domains");
        let labels = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| self.domains[i].labels[a])
            .collect();
        Labeling {
            assignment,
            labels,
            total_energy,
            iterations,
            converged,
        }
    }
}

/// A joint label per node with the energy it attains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    /// Positions within each node's domain.
    pub assignment: Vec<usize>,
    pub labels: Vec<JointLabel>,
    pub total_energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Builds the CRF of one group. `edges` is the edge map of the whole image.
pub fn build_fcrf(
    group: &SegmentGroup,
    obj: &PotentialMap,
    scp: &PotentialMap,
    edges: &EdgeMap,
    model: &PairwiseModel,
    g: &LabelGrammar,
    params: &CrfParams,
) -> Result<FactorGraph> {
    if group.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a CRF for an empty group".into(),
        ));
    }
    if obj.channels() != g.num_objects() || scp.channels() != g.num_scps() {
        return Err(Error::ShapeMismatch(format!(
            "maps have {}/{} channels, grammar has {} objects and {} scps",
            obj.channels(),
            scp.channels(),
            g.num_objects(),
            g.num_scps()
        )));
    }
    let shape = model.shape();
    if shape.num_objects != g.num_objects() || shape.num_scps != g.num_scps() {
        return Err(Error::ShapeMismatch(
            "pairwise model heads do not match the grammar".into(),
        ));
    }
    let segs = group.segments();
    let domains = segs
        .iter()
        .map(|s| NodeDomain::for_segment(g, s.scp, params.domain))
        .collect::<Result<Vec<_>>>()?;
    let unaries = segs
        .iter()
        .zip(&domains)
        .map(|(s, d)| {
            d.labels()
                .iter()
                .map(|&l| unary_energy(s, obj, scp, l, params.lambda_p))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = segs.len();
    let mut tables = Vec::with_capacity(n * (n - 1) / 2);
    if n > 1 {
        let feats = GroupFeatures::new(group, obj, scp, edges)?;
        for i in 0..n {
            for j in i + 1..n {
                let pij = model.forward(&feats.pair(i, j)?)?;
                let pji = model.forward(&feats.pair(j, i)?)?;
                let mut t = Vec::with_capacity(domains[i].len() * domains[j].len());
                for a in domains[i].labels() {
                    for b in domains[j].labels() {
                        let fwd = PairLabels {
                            object_i: a.object,
                            object_j: b.object,
                            scp_i: a.scp,
                            scp_j: b.scp,
                        };
                        let rev = PairLabels {
                            object_i: b.object,
                            object_j: a.object,
                            scp_i: b.scp,
                            scp_j: a.scp,
                        };
                        t.push(pij.energy(&fwd)? + pji.energy(&rev)?);
                    }
                }
                tables.push(t);
            }
        }
    }
    FactorGraph::new(domains, unaries, tables, params.lambda_e, params.lambda_p)
}

/// Loopy belief propagation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbpConfig {
    pub max_iters: usize,
    pub damping: f64,
    pub tol: f64,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            damping: DEFAULT_DAMPING,
            tol: DEFAULT_TOL,
        }
    }
}

/// Synchronous min-sum loopy belief propagation.
///
/// Messages start at zero and are shifted so their minimum is zero. The
/// first sweep replaces them outright; later sweeps blend
/// `damping · old + (1 − damping) · new`. Stops once the largest message
/// change drops below `tol` or after `max_iters` sweeps. After every sweep
/// each node takes its lowest-belief label (first one on ties); the decoding
/// with the lowest energy seen so far is returned, which keeps oscillating
/// runs on loopy graphs from ending on a bad sweep.
pub fn lbp_map(fg: &FactorGraph, cfg: &LbpConfig) -> Labeling {
    let n = fg.num_nodes();
    if n == 1 {
        return fg.labeling(vec![argmin(&fg.unaries[0])], 1, true);
    }
    // msgs[i][j]: message from i to j over D_j
    let mut msgs: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Vec::new()
                    } else {
                        vec![0.0; fg.domains[j].len()]
                    }
                })
                .collect()
        })
        .collect();
    let decode = |msgs: &[Vec<Vec<f64>>]| -> Vec<usize> {
        (0..n).map(|i| argmin(&belief(fg, msgs, i))).collect()
    };
    let mut best = decode(&msgs);
    let mut best_e = fg.energy(&best).expect("decoded within domains");
    let mut iterations = 0;
    let mut converged = false;
    let damping = cfg.damping.clamp(0.0, 1.0);
    while iterations < cfg.max_iters.max(1) {
        iterations += 1;
        let incoming: Vec<Vec<f64>> = (0..n).map(|i| belief(fg, &msgs, i)).collect();
        let mut next = msgs.clone();
        let mut delta: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                // belief at i without j's contribution
                let base: Vec<f64> = incoming[i]
                    .iter()
                    .zip(&msgs[j][i])
                    .map(|(b, m)| b - m)
                    .collect();
                let mut m: Vec<f64> = (0..fg.domains[j].len())
                    .map(|b| {
                        base.iter()
                            .enumerate()
                            .map(|(a, v)| v + fg.lambda_e * fg.pairwise(i, j, a, b))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
                for (v, old) in m.iter_mut().zip(&msgs[i][j]) {
                    *v -= lo;
                    if iterations > 1 {
                        *v = damping * old + (1.0 - damping) * *v;
                    }
                    delta = delta.max((*v - old).abs());
                }
                next[i][j] = m;
            }
        }
        msgs = next;
        let cand = decode(&msgs);
        let e = fg.energy(&cand).expect("decoded within domains");
        if e < best_e {
            best = cand;
            best_e = e;
        }
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    fg.labeling(best, iterations, converged)
}

fn belief(fg: &FactorGraph, msgs: &[Vec<Vec<f64>>], i: usize) -> Vec<f64> {
    let mut b = fg.unaries[i].clone();
    for (k, row) in msgs.iter().enumerate() {
        if k != i {
            for (v, m) in b.iter_mut().zip(&row[i]) {
                *v += m;
            }
        }
    }
    b
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive MAP; ties go to the lexicographically first assignment.
pub fn brute_force_map(fg: &FactorGraph) -> Result<Labeling> {
    let sizes: Vec<usize> = fg.domains.iter().map(NodeDomain::len).collect();
    let space: f64 = sizes.iter().map(|&s| s as f64).product();
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size: space,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let n = sizes.len();
    let mut cur = vec![0usize; n];
    let mut best = cur.clone();
    let mut best_e = f64::INFINITY;
    loop {
        let e = fg.energy(&cur)?;
        if e < best_e {
            best_e = e;
            best.copy_from_slice(&cur);
        }
        // odometer with the last node fastest
        let mut k = n;
        loop {
            if k == 0 {
                return Ok(fg.labeling(best, 0, true));
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] < sizes[k] {
                break;
            }
            cur[k] = 0;
        }
    }
}

/// Paints one group's labeling into object and part maps; pixels outside
/// the group stay background.
pub fn decode_maps(
    group: &SegmentGroup,
    labeling: &Labeling,
    g: &LabelGrammar,
    height: usize,
    width: usize,
) -> Result<(LabelMap, LabelMap)> {
    let mut object = LabelMap::filled(height, width, 0);
    let mut part = LabelMap::filled(height, width, 0);
    paint(group, labeling, g, &mut object, &mut part)?;
    Ok((object, part))
}

/// Decodes every group of an image into one pair of maps.
pub fn decode_all(
    groups: &[SegmentGroup],
    labelings: &[Labeling],
    g: &LabelGrammar,
    height: usize,
    width: usize,
) -> Result<(LabelMap, LabelMap)> {
    if groups.len() != labelings.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} groups but {} labelings",
            groups.len(),
            labelings.len()
        )));
    }
    let mut object = LabelMap::filled(height, width, 0);
    let mut part = LabelMap::filled(height, width, 0);
    for (group, lab) in groups.iter().zip(labelings) {
        paint(group, lab, g, &mut object, &mut part)?;
    }
    Ok((object, part))
}

fn paint(
    group: &SegmentGroup,
    labeling: &Labeling,
    g: &LabelGrammar,
    object: &mut LabelMap,
    part: &mut LabelMap,
) -> Result<()> {
    if labeling.labels.len() != group.len() {
        return Err(Error::ShapeMismatch(format!(
            "labeling has {} labels for {} segments",
            labeling.labels.len(),
            group.len()
        )));
    }
    for (seg, &l) in group.segments().iter().zip(&labeling.labels) {
        if !g.is_consistent(l.object, l.scp)? {
            return Err(Error::Inconsistent {
                object: l.object,
                scp: l.scp,
            });
        }
        let p = g.part_index(l.object, l.scp)? as u32;
        for &(r, c) in seg.pixels() {
            if r >= object.height() || c >= object.width() {
                return Err(Error::ShapeMismatch(format!(
                    "segment pixel ({r}, {c}) outside a {}x{} map",
                    object.height(),
                    object.width()
                )));
            }
            assert_eq!(part.get(r, c), 0, "segments overlap at ({r}, {c})");
            object.set(r, c, l.object as u32);
            part.set(r, c, p);
        }
    }
    Ok(())
}

/// Per-node line of the inference report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub segment: usize,
    pub proposed_scp: String,
    pub object: String,
    pub scp: String,
    pub part: String,
}

/// Brute-force comparison attached when the oracle is requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub energy: f64,
    pub same_labels: bool,
    pub energy_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub nodes: usize,
    pub iterations: usize,
    pub converged: bool,
    pub energy: f64,
    pub labels: Vec<NodeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
}

impl GroupReport {
    pub fn new(group: &SegmentGroup, labeling: &Labeling, g: &LabelGrammar) -> Result<Self> {
        let labels = group
            .segments()
            .iter()
            .zip(&labeling.labels)
            .map(|(s, l)| {
                Ok(NodeReport {
                    segment: s.id,
                    proposed_scp: g.scp_labels()[s.scp].clone(),
                    object: g.object_labels()[l.object].clone(),
                    scp: g.scp_labels()[l.scp].clone(),
                    part: g.recover_part_label(l.object, l.scp)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            nodes: group.len(),
            iterations: labeling.iterations,
            converged: labeling.converged,
            energy: labeling.total_energy,
            labels,
            oracle: None,
        })
    }

    pub fn with_oracle(mut self, lbp: &Labeling, exact: &Labeling) -> Self {
        let ratio = if exact.total_energy.abs() > 0.0 {
            lbp.total_energy / exact.total_energy
        } else if lbp.total_energy == exact.total_energy {
            1.0
        } else {
            f64::INFINITY
        };
        self.oracle = Some(OracleReport {
            energy: exact.total_energy,
            same_labels: lbp.assignment == exact.assignment,
            energy_ratio: ratio,
        });
        self
    }
}
