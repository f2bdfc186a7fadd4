//! SCP segment proposal: per-pixel argmax, 4-connected components and
//! single-linkage grouping into object-scale clusters.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::potentials::PotentialMap;
use crate::{io, Error, Result};

/// Per-pixel label indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u32) {
        self.labels[row * self.width + col] = label;
    }

    pub fn same_size(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Errors if any label is `>= num_labels`.
    pub fn check_range(&self, num_labels: usize) -> Result<()> {
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_labels)
        {
            return Err(Error::InvalidArgument(format!(
                "label {l} at pixel ({}, {}) out of range for {num_labels} labels",
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_label_map(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_label_map(self, path)
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    fn of_pixel((r, c): (usize, usize)) -> Self {
        Self {
            top: r,
            left: c,
            bottom: r,
            right: c,
        }
    }

    fn include(&mut self, (r, c): (usize, usize)) {
        self.top = self.top.min(r);
        self.left = self.left.min(c);
        self.bottom = self.bottom.max(r);
        self.right = self.right.max(c);
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            top: self.top.min(other.top),
            left: self.left.min(other.left),
            bottom: self.bottom.max(other.bottom),
            right: self.right.max(other.right),
        }
    }

    pub fn height(&self) -> usize {
        self.bottom + 1 - self.top
    }

    pub fn width(&self) -> usize {
        self.right + 1 - self.left
    }

    pub fn contains(&self, (r, c): (usize, usize)) -> bool {
        (self.top..=self.bottom).contains(&r) && (self.left..=self.right).contains(&c)
    }

    /// Row and column gaps between two boxes (0 when they overlap on an axis).
    fn gaps(&self, other: &BBox) -> (usize, usize) {
        let gr = other
            .top
            .saturating_sub(self.bottom)
            .max(self.top.saturating_sub(other.bottom));
        let gc = other
            .left
            .saturating_sub(self.right)
            .max(self.left.saturating_sub(other.right));
        (gr, gc)
    }
}

/// A maximal 4-connected region sharing one non-background SCP label.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub scp: usize,
    pixels: Vec<(usize, usize)>,
    boundary: Vec<(usize, usize)>,
    centroid: (f64, f64),
    bbox: BBox,
}

/// Debug dump of a segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub id: usize,
    pub scp: usize,
    pub area: usize,
    pub centroid: (f64, f64),
    pub bbox: BBox,
}

impl Segment {
    /// Builds a segment from its pixels. Pixels must be distinct, nonempty and
    /// 4-connected.
    pub fn from_pixels(id: usize, scp: usize, mut pixels: Vec<(usize, usize)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "segment {id} has no pixels"
            )));
        }
        pixels.sort_unstable();
        pixels.dedup();
        let mut bbox = BBox::of_pixel(pixels[0]);
        let (mut sr, mut sc) = (0.0, 0.0);
        for &p in &pixels {
            bbox.include(p);
            sr += p.0 as f64;
            sc += p.1 as f64;
        }
        let n = pixels.len() as f64;

        // local membership mask with a one-pixel margin
        let (mh, mw) = (bbox.height() + 2, bbox.width() + 2);
        let mut mask = vec![false; mh * mw];
        let at = |(r, c): (usize, usize)| (r + 1 - bbox.top) * mw + (c + 1 - bbox.left);
        for &p in &pixels {
            mask[at(p)] = true;
        }
        let boundary: Vec<(usize, usize)> = pixels
            .iter()
            .copied()
            .filter(|&p| {
                let i = at(p);
                !(mask[i - 1] && mask[i + 1] && mask[i - mw] && mask[i + mw])
            })
            .collect();

        let mut seen = vec![false; mh * mw];
        let mut queue = VecDeque::from([at(pixels[0])]);
        seen[at(pixels[0])] = true;
        let mut reached = 0;
        while let Some(i) = queue.pop_front() {
            reached += 1;
            for j in [i - 1, i + 1, i - mw, i + mw] {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if reached != pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "segment {id} is not 4-connected"
            )));
        }

        Ok(Self {
            id,
            scp,
            pixels,
            boundary,
            centroid: (sr / n, sc / n),
            bbox,
        })
    }

    /// Member pixels in row-major order; the first is the top-left pixel.
    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    /// Pixels with at least one 4-neighbour outside the segment.
    pub fn boundary(&self) -> &[(usize, usize)] {
        &self.boundary
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// (row, col) mean of the member pixels.
    pub fn centroid(&self) -> (f64, f64) {
        self.centroid
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn top_left(&self) -> (usize, usize) {
        self.pixels[0]
    }

    pub fn contains(&self, p: (usize, usize)) -> bool {
        self.bbox.contains(p) && self.pixels.binary_search(&p).is_ok()
    }

    pub fn summary(&self) -> SegmentSummary {
        SegmentSummary {
            id: self.id,
            scp: self.scp,
            area: self.area(),
            centroid: self.centroid,
            bbox: self.bbox,
        }
    }
}

/// Segments clustered by spatial proximity; one CRF is built per group.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGroup {
    segments: Vec<Segment>,
    bbox: BBox,
    object_area: usize,
}

impl SegmentGroup {
    pub fn new(mut segments: Vec<Segment>) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty segment group".into()))?;
        let mut bbox = first.bbox();
        for s in &segments[1..] {
            bbox = bbox.union(&s.bbox());
        }
        segments.sort_by_key(|s| s.top_left());
        let object_area = segments.iter().map(Segment::area).sum();
        Ok(Self {
            segments,
            bbox,
            object_area,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    /// Pixel count of the union of the member segments.
    pub fn object_area(&self) -> usize {
        self.object_area
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    CityBlock,
}

impl DistanceMetric {
    pub fn between(self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dr = a.0.abs_diff(b.0) as f64;
        let dc = a.1.abs_diff(b.1) as f64;
        match self {
            DistanceMetric::Euclidean => (dr * dr + dc * dc).sqrt(),
            DistanceMetric::CityBlock => dr + dc,
        }
    }

    fn of_gaps(self, (gr, gc): (usize, usize)) -> f64 {
        self.between((0, 0), (gr, gc))
    }
}

/// Per-pixel argmax; ties go to the lowest channel.
pub fn argmax_labels(scp: &PotentialMap) -> LabelMap {
    let labels = scp
        .values()
        .chunks_exact(scp.channels())
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    LabelMap {
        height: scp.height(),
        width: scp.width(),
        labels,
    }
}

/// Maximal 4-connected regions of equal non-background label, ordered by
/// their top-left pixel.
pub fn connected_components(lm: &LabelMap) -> Vec<Segment> {
    let (h, w) = (lm.height(), lm.width());
    let mut visited = vec![false; h * w];
    let mut segments = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let label = lm.labels[start];
        if label == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            let mut visit = |j: usize| {
                if !visited[j] && lm.labels[j] == label {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        let id = segments.len();
        segments.push(
            Segment::from_pixels(id, label as usize, pixels)
                .expect("flood fill yields a connected nonempty region"),
        );
    }
    segments
}

/// Drops segments smaller than `min_area` pixels.
pub fn filter_min_area(segments: Vec<Segment>, min_area: usize) -> Vec<Segment> {
    segments
        .into_iter()
        .filter(|s| s.area() >= min_area)
        .collect()
}

/// Minimum pixel distance between two segments, computed over boundaries.
pub fn min_distance(a: &Segment, b: &Segment, metric: DistanceMetric) -> f64 {
    let mut best = f64::INFINITY;
    for &p in a.boundary() {
        for &q in b.boundary() {
            best = best.min(metric.between(p, q));
        }
    }
    best
}

/// Single-linkage clustering: segments are linked when their minimum
/// pixel distance is below `t_s`. Groups are ordered by the top-left corner of
/// their bounding box.
pub fn group_segments(
    segments: &[Segment],
    t_s: f64,
    metric: DistanceMetric,
) -> Result<Vec<SegmentGroup>> {
    if t_s.is_nan() || t_s <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "t_s must be > 0, got {t_s}"
        )));
    }
    let n = segments.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&segments[i], &segments[j]);
            if metric.of_gaps(a.bbox().gaps(&b.bbox())) >= t_s {
                continue;
            }
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri == rj {
                continue;
            }
            if min_distance(a, b, metric) < t_s {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut members: Vec<Vec<Segment>> = vec![Vec::new(); n];
    for (i, s) in segments.iter().enumerate() {
        let root = find(&mut parent, i);
        members[root].push(s.clone());
    }
    let mut groups = members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(SegmentGroup::new)
        .collect::<Result<Vec<_>>>()?;
    groups.sort_by_key(|g| (g.bbox().top, g.bbox().left, g.segments()[0].top_left()));
    Ok(groups)
}

/// Proposal settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub t_s: f64,
    pub metric: DistanceMetric,
    pub min_area: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            t_s: DEFAULT_TS,
            metric: DistanceMetric::Euclidean,
            min_area: 0,
        }
    }
}

pub const DEFAULT_TS: f64 = 10.0;

/// Argmax, connected components, area filter and grouping in one call.
pub fn propose(scp: &PotentialMap, cfg: &ProposalConfig) -> Result<Vec<SegmentGroup>> {
    let segments = filter_min_area(connected_components(&argmax_labels(scp)), cfg.min_area);
    group_segments(&segments, cfg.t_s, cfg.metric)
}
