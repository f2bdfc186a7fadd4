//! Pairwise segment features and the learned pairwise potentials.
//!
//! For a pair of segments (i, j) inside one group the feature vector is
//! `[f_i, f_j, d_a, d_p, sin θ, cos θ]` where each `f` is a segment
//! self-descriptor (mean object potentials, mean SCP potentials, normalized
//! area), `d_a` is a geodesic distance over the region adjacency graph, `d_p`
//! is the bbox-normalized centroid distance, and θ is the direction from the
//! centroid of i to the centroid of j.

mod model;

pub use model::{
    train_model, train_model_from, HeadProbs, ModelShape, PairLabels, PairwiseModel,
    PairwiseSample, TrainedModel, DEFAULT_DROPOUT, HIDDEN_UNITS,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use petgraph::graph::{NodeIndex, UnGraph};

use crate::potentials::PotentialMap;
use crate::proposal::{Segment, SegmentGroup};
use crate::{Error, Result};

/// H×W nonnegative edge strength map.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} edge values for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "edge values must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Stand-in edge detector: per-pixel gradient magnitude of the probability of
/// that pixel's most likely channel, min-max normalized to [0, 1].
///
/// Derivatives are central differences over the clamped neighbourhood, so at
/// the image border they fall back to one-sided differences.
pub fn compute_edge_map(source: &PotentialMap) -> Result<EdgeMap> {
    let (h, w, c) = (source.height(), source.width(), source.channels());
    if h * w <= 1 {
        return Err(Error::InvalidArgument(format!(
            "edge map needs more than one pixel, got {h}x{w}"
        )));
    }
    let diff = |lo: f64, hi: f64, span: usize| {
        if span == 0 {
            0.0
        } else {
            (hi - lo) / span as f64
        }
    };
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let px = source.pixel(y, x);
            let mut k = 0;
            for ch in 1..c {
                if px[ch] > px[k] {
                    k = ch;
                }
            }
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = diff(source.get(y, xl, k), source.get(y, xr, k), xr - xl);
            let gy = diff(source.get(yu, x, k), source.get(yd, x, k), yd - yu);
            values.push((gx * gx + gy * gy).sqrt());
        }
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values
            .iter_mut()
            .for_each(|v| *v = (*v - min) / (max - min));
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    EdgeMap::new(h, w, values)
}

/// Region adjacency graph over the segments of one group. Node indices are
/// positions within the group.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightGraph {
    nodes: usize,
    edges: BTreeMap<(usize, usize), f64>,
}

impl EdgeWeightGraph {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            edges: BTreeMap::new(),
        }
    }

    /// Adds (or replaces) an undirected edge.
    pub fn add_edge(&mut self, a: usize, b: usize, weight: f64) -> Result<()> {
        if a >= self.nodes || b >= self.nodes || a == b {
            return Err(Error::InvalidArgument(format!(
                "bad edge ({a}, {b}) for {} nodes",
                self.nodes
            )));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("edge weight {weight}")));
        }
        self.edges.insert((a.min(b), a.max(b)), weight);
        Ok(())
    }

    /// Edges between 4-adjacent segments, weighted by the sum of edge-map
    /// values over the pixels on either side of their shared boundary.
    pub fn from_group(group: &SegmentGroup, edges: &EdgeMap) -> Self {
        let owner: HashMap<(usize, usize), usize> = group
            .segments()
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.boundary().iter().map(move |&p| (p, i)))
            .collect();
        let mut shared: BTreeMap<(usize, usize), BTreeSet<(usize, usize)>> = BTreeMap::new();
        for (a, seg) in group.segments().iter().enumerate() {
            for &(r, c) in seg.boundary() {
                let mut neighbours = vec![(r + 1, c), (r, c + 1)];
                if r > 0 {
                    neighbours.push((r - 1, c));
                }
                if c > 0 {
                    neighbours.push((r, c - 1));
                }
                for q in neighbours {
                    if let Some(&b) = owner.get(&q) {
                        if b != a {
                            let set = shared.entry((a.min(b), a.max(b))).or_default();
                            set.insert((r, c));
                            set.insert(q);
                        }
                    }
                }
            }
        }
        let mut g = Self::new(group.len());
        for (key, pixels) in shared {
            let w: f64 = pixels.iter().map(|&(r, c)| edges.get(r, c)).sum();
            g.edges.insert(key, w);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        self.edges.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.edges.iter().map(|(k, v)| (*k, *v))
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.values().sum()
    }

    /// Distance reported for unreachable pairs.
    pub fn disconnected_distance(&self) -> f64 {
        self.total_weight() + 1.0
    }

    /// Shortest-path distances from `source` to every node.
    pub fn distances_from(&self, source: usize) -> Result<Vec<f64>> {
        self.check(source)?;
        let mut graph: UnGraph<(), f64> = UnGraph::with_capacity(self.nodes, self.edges.len());
        let ids: Vec<NodeIndex> = (0..self.nodes).map(|_| graph.add_node(())).collect();
        for (&(a, b), &w) in &self.edges {
            graph.add_edge(ids[a], ids[b], w);
        }
        let found = petgraph::algo::dijkstra(&graph, ids[source], None, |e| *e.weight());
        let sentinel = self.disconnected_distance();
        Ok(ids
            .iter()
            .map(|id| found.get(id).copied().unwrap_or(sentinel))
            .collect())
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.nodes {
            return Err(Error::IndexOutOfRange {
                what: "segment",
                index: i,
                len: self.nodes,
            });
        }
        Ok(())
    }
}

/// Appearance geodesic distance between two segments of a group.
pub fn geodesic_distance(g: &EdgeWeightGraph, i: usize, j: usize) -> Result<f64> {
    g.check(j)?;
    Ok(g.distances_from(i)?[j])
}

/// Segment self-descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDescriptor {
    pub mean_object_potentials: Vec<f64>,
    pub mean_scp_potentials: Vec<f64>,
    /// Segment area over the group's object area.
    pub normalized_area: f64,
}

impl SegmentDescriptor {
    pub fn describe(
        seg: &Segment,
        group: &SegmentGroup,
        obj: &PotentialMap,
        scp: &PotentialMap,
    ) -> Self {
        let mean = |m: &PotentialMap| {
            let mut acc = vec![0.0; m.channels()];
            for &(r, c) in seg.pixels() {
                for (a, v) in acc.iter_mut().zip(m.pixel(r, c)) {
                    *a += v;
                }
            }
            let n = seg.area() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        };
        Self {
            mean_object_potentials: mean(obj),
            mean_scp_potentials: mean(scp),
            normalized_area: seg.area() as f64 / group.object_area() as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_object_potentials.len() + self.mean_scp_potentials.len() + 1
    }

    fn extend_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mean_object_potentials);
        out.extend_from_slice(&self.mean_scp_potentials);
        out.push(self.normalized_area);
    }
}

/// Feature vector of an ordered segment pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseFeatures {
    pub desc_i: SegmentDescriptor,
    pub desc_j: SegmentDescriptor,
    pub geodesic: f64,
    pub euclidean: f64,
    pub angle_sin: f64,
    pub angle_cos: f64,
}

impl PairwiseFeatures {
    /// Length of [`Self::to_input`] for the given label counts.
    pub fn input_dim(num_objects: usize, num_scps: usize) -> usize {
        2 * (num_objects + num_scps + 1) + 4
    }

    /// Network input. The unbounded geodesic distance is squashed to
    /// `d / (1 + d)` so every input lies in a bounded range.
    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.desc_i.dim() * 2 + 4);
        self.desc_i.extend_into(&mut v);
        self.desc_j.extend_into(&mut v);
        v.push(self.geodesic / (1.0 + self.geodesic));
        v.push(self.euclidean);
        v.push(self.angle_sin);
        v.push(self.angle_cos);
        v
    }
}

/// Descriptors and geodesic distances for every segment of one group.
#[derive(Debug, Clone)]
pub struct GroupFeatures {
    descriptors: Vec<SegmentDescriptor>,
    geodesic: Vec<Vec<f64>>,
    centroids: Vec<(f64, f64)>,
    bbox_height: f64,
    bbox_width: f64,
}

impl GroupFeatures {
    pub fn new(
        group: &SegmentGroup,
        obj: &PotentialMap,
        scp: &PotentialMap,
        edges: &EdgeMap,
    ) -> Result<Self> {
        let graph = EdgeWeightGraph::from_group(group, edges);
        Self::with_graph(group, obj, scp, &graph)
    }

    pub fn with_graph(
        group: &SegmentGroup,
        obj: &PotentialMap,
        scp: &PotentialMap,
        graph: &EdgeWeightGraph,
    ) -> Result<Self> {
        if !obj.same_size(scp) {
            return Err(Error::ShapeMismatch(
                "object and scp maps differ in size".into(),
            ));
        }
        if graph.len() != group.len() {
            return Err(Error::ShapeMismatch(format!(
                "graph has {} nodes, group has {} segments",
                graph.len(),
                group.len()
            )));
        }
        let bbox = group.bbox();
        if bbox.bottom >= obj.height() || bbox.right >= obj.width() {
            return Err(Error::ShapeMismatch(
                "group lies outside the potential maps".into(),
            ));
        }
        let descriptors = group
            .segments()
            .iter()
            .map(|s| SegmentDescriptor::describe(s, group, obj, scp))
            .collect();
        let geodesic = (0..group.len())
            .map(|i| graph.distances_from(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            descriptors,
            geodesic,
            centroids: group.segments().iter().map(Segment::centroid).collect(),
            bbox_height: bbox.height() as f64,
            bbox_width: bbox.width() as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &SegmentDescriptor {
        &self.descriptors[i]
    }

    pub fn pair(&self, i: usize, j: usize) -> Result<PairwiseFeatures> {
        let n = self.len();
        for k in [i, j] {
            if k >= n {
                return Err(Error::IndexOutOfRange {
                    what: "segment",
                    index: k,
                    len: n,
                });
            }
        }
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "pair features need i != j, got {i}"
            )));
        }
        if self.bbox_height <= 0.0 || self.bbox_width <= 0.0 {
            return Err(Error::InvalidArgument(
                "degenerate group bounding box".into(),
            ));
        }
        let (ri, ci) = self.centroids[i];
        let (rj, cj) = self.centroids[j];
        let (dr, dc) = (rj - ri, cj - ci);
        let euclidean = ((dr / self.bbox_height).powi(2) + (dc / self.bbox_width).powi(2)).sqrt();
        let len = (dr * dr + dc * dc).sqrt();
        let (angle_sin, angle_cos) = if len > 0.0 {
            (dr / len, dc / len)
        } else {
            (0.0, 1.0)
        };
        Ok(PairwiseFeatures {
            desc_i: self.descriptors[i].clone(),
            desc_j: self.descriptors[j].clone(),
            geodesic: self.geodesic[i][j],
            euclidean,
            angle_sin,
            angle_cos,
        })
    }
}

/// Features of the ordered pair (i, j) of `group`; `i` and `j` are positions
/// within the group.
pub fn pairwise_features(
    group: &SegmentGroup,
    obj: &PotentialMap,
    scp: &PotentialMap,
    edges: &EdgeMap,
    i: usize,
    j: usize,
) -> Result<PairwiseFeatures> {
    GroupFeatures::new(group, obj, scp, edges)?.pair(i, j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::{connected_components, LabelMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(id: usize, scp: usize, top: usize, left: usize, h: usize, w: usize) -> Segment {
        let px = (top..top + h)
            .flat_map(|r| (left..left + w).map(move |c| (r, c)))
            .collect();
        Segment::from_pixels(id, scp, px).unwrap()
    }

    #[test]
    fn constant_map_has_no_edges() {
        let m = PotentialMap::uniform(4, 5, 3);
        assert!(compute_edge_map(&m)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
        assert!(compute_edge_map(&PotentialMap::uniform(1, 1, 2)).is_err());
    }

    #[test]
    fn vertical_step_peaks_on_step_columns() {
        let labels: Vec<u32> = (0..6 * 8).map(|i| u32::from(i % 8 >= 4)).collect();
        let lm = LabelMap::new(6, 8, labels).unwrap();
        let e = compute_edge_map(&PotentialMap::one_hot(&lm, 2).unwrap()).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let expect = if c == 3 || c == 4 { 1.0 } else { 0.0 };
                assert_eq!(e.get(r, c), expect, "({r}, {c})");
            }
        }
    }

    #[test]
    fn edge_map_matches_direct_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, c) = (7, 6, 4);
        let raw: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = PotentialMap::normalize(h, w, c, raw).unwrap();
        let got = compute_edge_map(&m).unwrap();
        // oracle: explicit forward/backward/central cases
        let mut mags = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let px = m.pixel(y, x);
                let k = (0..c).fold(0, |b, ch| if px[ch] > px[b] { ch } else { b });
                let p = |yy: usize, xx: usize| m.get(yy, xx, k);
                let gx = if x == 0 {
                    p(y, 1) - p(y, 0)
                } else if x == w - 1 {
                    p(y, w - 1) - p(y, w - 2)
                } else {
                    (p(y, x + 1) - p(y, x - 1)) / 2.0
                };
                let gy = if y == 0 {
                    p(1, x) - p(0, x)
                } else if y == h - 1 {
                    p(h - 1, x) - p(h - 2, x)
                } else {
                    (p(y + 1, x) - p(y - 1, x)) / 2.0
                };
                mags[y * w + x] = gx.hypot(gy);
            }
        }
        let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (a, m) in got.values().iter().zip(&mags) {
            assert!((a - (m - lo) / (hi - lo)).abs() < 1e-6);
        }
    }

    #[test]
    fn geodesic_examples() {
        let mut g = EdgeWeightGraph::new(2);
        g.add_edge(0, 1, 3.5).unwrap();
        assert_eq!(geodesic_distance(&g, 0, 1).unwrap(), 3.5);
        assert_eq!(geodesic_distance(&g, 1, 1).unwrap(), 0.0);

        let mut g = EdgeWeightGraph::new(4);
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(1, 2, 2.0).unwrap();
        assert_eq!(geodesic_distance(&g, 0, 2).unwrap(), 3.0);
        assert_eq!(geodesic_distance(&g, 0, 3).unwrap(), 4.0);
        assert!(geodesic_distance(&g, 0, 9).is_err());
        assert!(g.add_edge(0, 0, 1.0).is_err());
        assert!(g.add_edge(0, 1, -1.0).is_err());
    }

    #[test]
    fn adjacency_graph_from_touching_segments() {
        // 0 0 1 1
        // 0 0 1 1
        // 2 2 2 2
        let lm = LabelMap::new(3, 4, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 3, 3]).unwrap();
        let segs = connected_components(&lm);
        let group = SegmentGroup::new(segs).unwrap();
        let edges = EdgeMap::new(3, 4, vec![1.0; 12]).unwrap();
        let g = EdgeWeightGraph::from_group(&group, &edges);
        // a|b: pixels (0,1),(1,1),(0,2),(1,2)
        assert_eq!(g.weight(0, 1), Some(4.0));
        // a|c: (1,0),(1,1),(2,0),(2,1)
        assert_eq!(g.weight(0, 2), Some(4.0));
        assert_eq!(g.weight(1, 2), Some(4.0));
    }

    #[test]
    fn feature_geometry() {
        let a = rect(0, 1, 0, 0, 2, 2);
        let b = rect(1, 2, 0, 4, 2, 2);
        let group = SegmentGroup::new(vec![a, b]).unwrap();
        let obj = PotentialMap::uniform(4, 8, 3);
        let scp = PotentialMap::uniform(4, 8, 4);
        let edges = EdgeMap::new(4, 8, vec![0.0; 32]).unwrap();
        let f = pairwise_features(&group, &obj, &scp, &edges, 0, 1).unwrap();
        assert_eq!((f.angle_sin, f.angle_cos), (0.0, 1.0));
        // bbox is 2 x 6, centroid offset (0, 4)
        assert!((f.euclidean - 4.0 / 6.0).abs() < 1e-12);
        assert!((f.desc_i.normalized_area - 0.5).abs() < 1e-12);
        assert_eq!(f.geodesic, 1.0);
        assert_eq!(f.to_input().len(), PairwiseFeatures::input_dim(3, 4));
        assert!(pairwise_features(&group, &obj, &scp, &edges, 0, 0).is_err());
        assert!(pairwise_features(&group, &obj, &scp, &edges, 0, 2).is_err());
    }

    #[test]
    fn identical_centroids_use_the_documented_angle() {
        // ring around a centre block share a centroid
        let mut ring = Vec::new();
        for r in 0..5 {
            for c in 0..5 {
                if r == 0 || r == 4 || c == 0 || c == 4 {
                    ring.push((r, c));
                }
            }
        }
        let outer = Segment::from_pixels(0, 1, ring).unwrap();
        let inner = rect(1, 2, 1, 1, 3, 3);
        assert_eq!(outer.centroid(), inner.centroid());
        let group = SegmentGroup::new(vec![outer, inner]).unwrap();
        let obj = PotentialMap::uniform(5, 5, 2);
        let scp = PotentialMap::uniform(5, 5, 3);
        let edges = EdgeMap::new(5, 5, vec![0.0; 25]).unwrap();
        let f = pairwise_features(&group, &obj, &scp, &edges, 0, 1).unwrap();
        assert_eq!(f.euclidean, 0.0);
        assert_eq!((f.angle_sin, f.angle_cos), (0.0, 1.0));
    }
}
