//! Synthetic scenes with exact ground truth.
//!
//! A [`SceneSpec`] paints animal instances out of rectangles and ellipses,
//! one SCP per part. Potentials are the one-hot ground truth blended with
//! Dirichlet noise, after which optional confusions swap two channels inside
//! a region to imitate a detector that mixes up similar objects.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::grammar::LabelGrammar;
use crate::pairwise::{compute_edge_map, GroupFeatures, PairLabels, PairwiseSample};
use crate::potentials::{ConvRefiner, PotentialMap, RefinerSample};
use crate::proposal::{propose, BBox, LabelMap, ProposalConfig, Segment};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rect,
    /// Ellipse inscribed in the box.
    Ellipse,
}

/// One part of an instance; coordinates are inclusive and relative to the
/// instance origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub scp: String,
    pub shape: Shape,
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub object: String,
    /// `[row, col]` of the instance frame in the image.
    pub origin: [usize; 2],
    pub parts: Vec<PartSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfusionMap {
    Object,
    Scp,
}

/// Swaps channels `from` and `to` of one map inside an image-space box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub map: ConfusionMap,
    pub from: String,
    pub to: String,
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Weight of the noise in the convex blend with the one-hot truth.
    pub noise: f64,
    /// Concentration of the symmetric Dirichlet noise.
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default)]
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub confusions: Vec<Confusion>,
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scene(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scene(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Checks names, grammar consistency and bounds.
    pub fn validate(&self, g: &LabelGrammar) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Scene("image must be at least 1x1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Scene(format!("noise {} outside [0, 1]", self.noise)));
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return Err(Error::Scene(format!(
                "dirichlet_alpha must be positive, got {}",
                self.dirichlet_alpha
            )));
        }
        for (k, inst) in self.instances.iter().enumerate() {
            let object = lookup_object(g, &inst.object)?;
            if inst.parts.is_empty() {
                return Err(Error::Scene(format!(
                    "instance {k} ({}) has no parts",
                    inst.object
                )));
            }
            for part in &inst.parts {
                let scp = lookup_scp(g, &part.scp)?;
                if !g.is_consistent(object, scp)? {
                    return Err(Error::Scene(format!(
                        "instance {k}: part {} is not connected to {}",
                        part.scp, inst.object
                    )));
                }
                let b = self.part_box(inst, part);
                self.check_box(b, &format!("instance {k} part {}", part.scp))?;
            }
        }
        for (k, c) in self.confusions.iter().enumerate() {
            let lookup = match c.map {
                ConfusionMap::Object => lookup_object,
                ConfusionMap::Scp => lookup_scp,
            };
            lookup(g, &c.from)?;
            lookup(g, &c.to)?;
            let b = BBox {
                top: c.top,
                left: c.left,
                bottom: c.bottom,
                right: c.right,
            };
            self.check_box(b, &format!("confusion {k}"))?;
        }
        Ok(())
    }

    fn part_box(&self, inst: &InstanceSpec, p: &PartSpec) -> BBox {
        BBox {
            top: inst.origin[0] + p.top,
            left: inst.origin[1] + p.left,
            bottom: inst.origin[0] + p.bottom,
            right: inst.origin[1] + p.right,
        }
    }

    fn check_box(&self, b: BBox, what: &str) -> Result<()> {
        if b.top > b.bottom || b.left > b.right {
            return Err(Error::Scene(format!("{what}: empty box {b:?}")));
        }
        if b.bottom >= self.height || b.right >= self.width {
            return Err(Error::Scene(format!(
                "{what}: box {b:?} exceeds the {}x{} image",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn lookup_object(g: &LabelGrammar, name: &str) -> Result<usize> {
    g.object_index(name)
        .ok_or_else(|| Error::Scene(format!("unknown object {name:?}")))
}

fn lookup_scp(g: &LabelGrammar, name: &str) -> Result<usize> {
    g.scp_index(name)
        .ok_or_else(|| Error::Scene(format!("unknown scp {name:?}")))
}

fn shape_pixels(shape: Shape, b: BBox) -> impl Iterator<Item = (usize, usize)> {
    let cr = (b.top + b.bottom) as f64 / 2.0;
    let cc = (b.left + b.right) as f64 / 2.0;
    let ry = (b.bottom - b.top) as f64 / 2.0 + 0.5;
    let rx = (b.right - b.left) as f64 / 2.0 + 0.5;
    (b.top..=b.bottom)
        .flat_map(move |r| (b.left..=b.right).map(move |c| (r, c)))
        .filter(move |&(r, c)| match shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (dy, dx) = ((r as f64 - cr) / ry, (c as f64 - cc) / rx);
                dy * dy + dx * dx <= 1.0
            }
        })
}

/// Ground truth and potentials of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub object_gt: LabelMap,
    pub part_gt: LabelMap,
    pub scp_gt: LabelMap,
    pub obj: PotentialMap,
    pub scp: PotentialMap,
}

pub const OBJ_FILE: &str = "obj.ptm";
pub const SCP_FILE: &str = "scp.ptm";
pub const OBJECT_GT_FILE: &str = "object_gt.lbl";
pub const PART_GT_FILE: &str = "part_gt.lbl";
pub const SCP_GT_FILE: &str = "scp_gt.lbl";

impl Scene {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.obj.save(dir.join(OBJ_FILE))?;
        self.scp.save(dir.join(SCP_FILE))?;
        self.object_gt.save(dir.join(OBJECT_GT_FILE))?;
        self.part_gt.save(dir.join(PART_GT_FILE))?;
        self.scp_gt.save(dir.join(SCP_GT_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            obj: PotentialMap::load(dir.join(OBJ_FILE))?,
            scp: PotentialMap::load(dir.join(SCP_FILE))?,
            object_gt: LabelMap::load(dir.join(OBJECT_GT_FILE))?,
            part_gt: LabelMap::load(dir.join(PART_GT_FILE))?,
            scp_gt: LabelMap::load(dir.join(SCP_GT_FILE))?,
        })
    }

    pub fn refiner_sample(&self) -> Result<RefinerSample> {
        RefinerSample::new(self.scp.clone(), self.obj.clone(), self.object_gt.clone())
    }
}

/// Paints the spec and draws its potentials; the same seed gives the same
/// scene.
pub fn generate_scene(spec: &SceneSpec, g: &LabelGrammar, seed: u64) -> Result<Scene> {
    spec.validate(g)?;
    let (h, w) = (spec.height, spec.width);
    let mut object_gt = LabelMap::filled(h, w, 0);
    let mut scp_gt = LabelMap::filled(h, w, 0);
    let mut part_gt = LabelMap::filled(h, w, 0);
    for inst in &spec.instances {
        let object = lookup_object(g, &inst.object)?;
        for part in &inst.parts {
            let scp = lookup_scp(g, &part.scp)?;
            let p = g.part_index(object, scp)? as u32;
            for (r, c) in shape_pixels(part.shape, spec.part_box(inst, part)) {
                object_gt.set(r, c, object as u32);
                scp_gt.set(r, c, scp as u32);
                part_gt.set(r, c, p);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0)
        .map_err(|e| Error::Scene(format!("dirichlet noise: {e}")))?;
    let mut obj = noisy(&object_gt, g.num_objects(), spec.noise, &gamma, &mut rng)?;
    let mut scp = noisy(&scp_gt, g.num_scps(), spec.noise, &gamma, &mut rng)?;
    for c in &spec.confusions {
        let (values, channels, from, to) = match c.map {
            ConfusionMap::Object => (
                &mut obj,
                g.num_objects(),
                lookup_object(g, &c.from)?,
                lookup_object(g, &c.to)?,
            ),
            ConfusionMap::Scp => (
                &mut scp,
                g.num_scps(),
                lookup_scp(g, &c.from)?,
                lookup_scp(g, &c.to)?,
            ),
        };
        for r in c.top..=c.bottom {
            for col in c.left..=c.right {
                let base = (r * w + col) * channels;
                values.swap(base + from, base + to);
            }
        }
    }
    Ok(Scene {
        obj: PotentialMap::new(h, w, g.num_objects(), obj)?,
        scp: PotentialMap::new(h, w, g.num_scps(), scp)?,
        object_gt,
        part_gt,
        scp_gt,
    })
}

// (1 - noise) * one_hot + noise * Dirichlet(alpha), renormalized per pixel.
fn noisy(
    gt: &LabelMap,
    channels: usize,
    noise: f64,
    gamma: &Gamma<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(gt.len() * channels);
    let mut draw = vec![0.0; channels];
    for &label in gt.labels() {
        if noise > 0.0 {
            for d in draw.iter_mut() {
                *d = gamma.sample(rng);
            }
        }
        let total: f64 = draw.iter().sum();
        let start = out.len();
        for (k, d) in draw.iter().enumerate() {
            let hot = if k == label as usize { 1.0 } else { 0.0 };
            let n = if noise > 0.0 && total > 0.0 {
                d / total
            } else {
                0.0
            };
            out.push((1.0 - noise) * hot + noise * n);
        }
        let sum: f64 = out[start..].iter().sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(Error::Scene("noise draw produced an all-zero pixel".into()));
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Knobs for [`random_scene_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneOptions {
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
    pub noise: f64,
    /// Chance that an instance gets one leg whose object channel is swapped
    /// with another object sharing that leg type.
    pub confusion_prob: f64,
    /// Instances are kept more than this many pixels apart.
    pub separation: f64,
}

impl Default for RandomSceneOptions {
    fn default() -> Self {
        Self {
            height: 28,
            width: 96,
            max_instances: 2,
            noise: 0.05,
            confusion_prob: 0.0,
            separation: crate::proposal::DEFAULT_TS,
        }
    }
}

/// Meaning-specific SCP of an object, if it has one.
fn scp_for(g: &LabelGrammar, object: usize, meaning: &str) -> Result<Option<usize>> {
    let Some(m) = g.meaning_index(meaning) else {
        return Ok(None);
    };
    for scp in g.scps_of(object)? {
        if g.meaning_of(scp)? == Some(m) {
            return Ok(Some(scp));
        }
    }
    Ok(None)
}

/// A side-view quadruped: body, ellipse head on one end, tail on the other,
/// four legs below. Returns the parts and the frame size.
fn animal(
    g: &LabelGrammar,
    object: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<PartSpec>, usize, usize)> {
    let body_h = rng.random_range(6..=8);
    let body_w = rng.random_range(16..=22);
    let leg_len = rng.random_range(5..=8);
    let head = rng.random_range(6..=8);
    let tail_len = 4;
    let flip = rng.random_bool(0.5);
    // unflipped frame: tail | body | head, legs under the body
    let body_left = tail_len;
    let body_top = 3;
    let frame_w = tail_len + body_w + head;
    let frame_h = body_top + body_h + leg_len;
    let mut parts = Vec::new();
    let mut push = |meaning: &str, shape, top, left, bottom, right| -> Result<()> {
        if let Some(scp) = scp_for(g, object, meaning)? {
            let (l, r) = if flip {
                (frame_w - 1 - right, frame_w - 1 - left)
            } else {
                (left, right)
            };
            parts.push(PartSpec {
                scp: g.scp_labels()[scp].clone(),
                shape,
                top,
                left: l,
                bottom,
                right: r,
            });
        }
        Ok(())
    };
    let body_right = body_left + body_w - 1;
    let body_bottom = body_top + body_h - 1;
    push(
        "body",
        Shape::Rect,
        body_top,
        body_left,
        body_bottom,
        body_right,
    )?;
    push(
        "head",
        Shape::Ellipse,
        0,
        body_right + 1,
        head - 1,
        body_right + head,
    )?;
    push("tail", Shape::Rect, body_top, 0, body_top + 1, tail_len - 1)?;
    let stride = (body_w - 2) / 4;
    for k in 0..4 {
        let left = body_left + 1 + k * stride + usize::from(k >= 2);
        push(
            "leg",
            Shape::Rect,
            body_bottom + 1,
            left,
            body_bottom + leg_len,
            left + 1,
        )?;
    }
    Ok((parts, frame_h, frame_w))
}

/// Random animals placed left to right, separated by more than
/// `opts.separation` pixels.
pub fn random_scene_spec(
    g: &LabelGrammar,
    opts: &RandomSceneOptions,
    rng: &mut impl Rng,
) -> Result<SceneSpec> {
    let mut spec = SceneSpec {
        height: opts.height,
        width: opts.width,
        noise: opts.noise,
        dirichlet_alpha: 1.0,
        instances: Vec::new(),
        confusions: Vec::new(),
    };
    let want = rng.random_range(1..=opts.max_instances.max(1));
    let gap = opts.separation.floor() as usize + 2;
    let mut next_col = rng.random_range(0..=2);
    for _ in 0..want {
        let object = rng.random_range(1..g.num_objects());
        let (parts, fh, fw) = animal(g, object, rng)?;
        if fh > opts.height || next_col + fw > opts.width {
            break;
        }
        let row = rng.random_range(0..=opts.height - fh);
        let inst = InstanceSpec {
            object: g.object_labels()[object].clone(),
            origin: [row, next_col],
            parts,
        };
        if rng.random_bool(opts.confusion_prob.clamp(0.0, 1.0)) {
            if let Some(c) = leg_confusion(g, object, &inst, rng)? {
                spec.confusions.push(c);
            }
        }
        next_col += fw + gap + rng.random_range(0..=3);
        spec.instances.push(inst);
    }
    if spec.instances.is_empty() {
        return Err(Error::Scene(format!(
            "a {}x{} image cannot hold one animal",
            opts.height, opts.width
        )));
    }
    Ok(spec)
}

fn leg_confusion(
    g: &LabelGrammar,
    object: usize,
    inst: &InstanceSpec,
    rng: &mut impl Rng,
) -> Result<Option<Confusion>> {
    let Some(leg) = scp_for(g, object, "leg")? else {
        return Ok(None);
    };
    let others: Vec<usize> = (1..g.num_objects())
        .filter(|&o| o != object && g.is_consistent(o, leg).unwrap_or(false))
        .collect();
    let legs: Vec<&PartSpec> = inst
        .parts
        .iter()
        .filter(|p| p.scp == g.scp_labels()[leg])
        .collect();
    if others.is_empty() || legs.is_empty() {
        return Ok(None);
    }
    let to = others[rng.random_range(0..others.len())];
    let p = legs[rng.random_range(0..legs.len())];
    Ok(Some(Confusion {
        map: ConfusionMap::Object,
        from: inst.object.clone(),
        to: g.object_labels()[to].clone(),
        top: inst.origin[0] + p.top,
        left: inst.origin[1] + p.left,
        bottom: inst.origin[0] + p.bottom,
        right: inst.origin[1] + p.right,
    }))
}

/// Most frequent ground-truth label over a segment; ties go to the lower
/// label.
pub fn dominant_label(seg: &Segment, gt: &LabelMap) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &(r, c) in seg.pixels() {
        *counts.entry(gt.get(r, c)).or_insert(0usize) += 1;
    }
    let mut best = (0usize, 0u32);
    for (label, n) in counts {
        if n > best.0 {
            best = (n, label);
        }
    }
    best.1 as usize
}

/// Pairwise training samples: every ordered segment pair of every group,
/// labelled with the dominant ground truth of each side. Object potentials
/// pass through `refiner` first when given, matching inference.
pub fn generate_pairwise_dataset(
    scenes: &[Scene],
    g: &LabelGrammar,
    proposal: &ProposalConfig,
    refiner: Option<&ConvRefiner>,
) -> Result<Vec<PairwiseSample>> {
    let mut samples = Vec::new();
    for scene in scenes {
        if scene.obj.channels() != g.num_objects() || scene.scp.channels() != g.num_scps() {
            return Err(Error::ShapeMismatch(format!(
                "scene has {}/{} channels, grammar has {} objects and {} scps",
                scene.obj.channels(),
                scene.scp.channels(),
                g.num_objects(),
                g.num_scps()
            )));
        }
        let obj = match refiner {
            Some(r) => r.refine(&scene.scp, &scene.obj)?,
            None => scene.obj.clone(),
        };
        let groups = propose(&scene.scp, proposal)?;
        let edges = compute_edge_map(&scene.scp)?;
        for group in groups.iter().filter(|gr| gr.len() > 1) {
            let feats = GroupFeatures::new(group, &obj, &scene.scp, &edges)?;
            let labels: Vec<(usize, usize)> = group
                .segments()
                .iter()
                .map(|s| {
                    (
                        dominant_label(s, &scene.object_gt),
                        dominant_label(s, &scene.scp_gt),
                    )
                })
                .collect();
            for i in 0..group.len() {
                for j in 0..group.len() {
                    if i == j {
                        continue;
                    }
                    samples.push(PairwiseSample {
                        features: feats.pair(i, j)?,
                        labels: PairLabels {
                            object_i: labels[i].0,
                            object_j: labels[j].0,
                            scp_i: labels[i].1,
                            scp_j: labels[j].1,
                        },
                    });
                }
            }
        }
    }
    Ok(samples)
}
