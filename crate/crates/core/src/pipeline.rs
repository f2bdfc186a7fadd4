//! End-to-end inference and training.
//!
//! Inference: refine object potentials, propose SCP segments and groups,
//! build one CRF per group, solve it with LBP and paint the labels back.
//! Training: fit the refiner on the scene corpus, then the pairwise network
//! on segment pairs proposed from the same scenes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::{
    brute_force_map, build_fcrf, decode_all, lbp_map, CrfParams, GroupReport, LbpConfig,
};
use crate::grammar::LabelGrammar;
use crate::pairwise::{
    compute_edge_map, train_model_from, ModelShape, PairwiseModel, TrainedModel,
};
use crate::potentials::{
    train_refiner, ConvRefiner, PotentialMap, TrainConfig, TrainLog, TrainedRefiner,
};
use crate::proposal::{propose, LabelMap, ProposalConfig};
use crate::synth::Scene;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub crf: CrfParams,
    pub lbp: LbpConfig,
    pub proposal: ProposalConfig,
    /// Also solve each small group exactly and attach the comparison.
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub height: usize,
    pub width: usize,
    pub segments: usize,
    pub groups: Vec<GroupReport>,
    /// Groups too large for the exhaustive oracle.
    #[serde(default)]
    pub oracle_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub object: LabelMap,
    pub part: LabelMap,
    pub report: InferenceReport,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs the whole pipeline on in-memory potentials.
pub fn infer(
    obj: &PotentialMap,
    scp: &PotentialMap,
    g: &LabelGrammar,
    refiner: &ConvRefiner,
    model: &PairwiseModel,
    cfg: &PipelineConfig,
) -> Result<Inference> {
    stage("validate", check_inputs(obj, scp, g, refiner, model))?;
    let refined = stage("refine", refiner.refine(scp, obj))?;
    let groups = stage("propose", propose(scp, &cfg.proposal))?;
    let edges = stage("edge map", compute_edge_map(scp))?;
    let mut labelings = Vec::with_capacity(groups.len());
    let mut reports = Vec::with_capacity(groups.len());
    let mut oracle_skipped = 0;
    for group in &groups {
        let fg = stage(
            "build crf",
            build_fcrf(group, &refined, scp, &edges, model, g, &cfg.crf),
        )?;
        let lab = lbp_map(&fg, &cfg.lbp);
        let mut report = stage("report", GroupReport::new(group, &lab, g))?;
        if cfg.oracle {
            match brute_force_map(&fg) {
                Ok(exact) => report = report.with_oracle(&lab, &exact),
                Err(Error::SearchSpaceTooLarge { .. }) => oracle_skipped += 1,
                Err(e) => return Err(e.in_stage("oracle")),
            }
        }
        reports.push(report);
        labelings.push(lab);
    }
    let (object, part) = stage(
        "decode",
        decode_all(&groups, &labelings, g, obj.height(), obj.width()),
    )?;
    Ok(Inference {
        object,
        part,
        report: InferenceReport {
            height: obj.height(),
            width: obj.width(),
            segments: groups.iter().map(|gr| gr.len()).sum(),
            groups: reports,
            oracle_skipped,
        },
    })
}

fn check_inputs(
    obj: &PotentialMap,
    scp: &PotentialMap,
    g: &LabelGrammar,
    refiner: &ConvRefiner,
    model: &PairwiseModel,
) -> Result<()> {
    if !obj.same_size(scp) {
        return Err(Error::ShapeMismatch(format!(
            "object map is {}x{}, scp map is {}x{}",
            obj.height(),
            obj.width(),
            scp.height(),
            scp.width()
        )));
    }
    if obj.channels() != g.num_objects() || scp.channels() != g.num_scps() {
        return Err(Error::ShapeMismatch(format!(
            "maps have {} object and {} scp channels; grammar needs {} and {}",
            obj.channels(),
            scp.channels(),
            g.num_objects(),
            g.num_scps()
        )));
    }
    if refiner.out_channels() != g.num_objects() || refiner.num_scp_channels() != g.num_scps() {
        return Err(Error::ShapeMismatch(format!(
            "refiner maps {} scp + {} object channels; grammar has {} and {}",
            refiner.num_scp_channels(),
            refiner.out_channels(),
            g.num_scps(),
            g.num_objects()
        )));
    }
    let s = model.shape();
    if s.num_objects != g.num_objects() || s.num_scps != g.num_scps() {
        return Err(Error::ShapeMismatch(
            "pairwise model heads do not match the grammar".into(),
        ));
    }
    Ok(())
}

/// Input artifacts of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelinePaths {
    pub obj: PathBuf,
    pub scp: PathBuf,
    pub grammar: PathBuf,
    pub refiner: PathBuf,
    pub model: PathBuf,
}

pub const OBJECT_OUT: &str = "object.lbl";
pub const PART_OUT: &str = "part.lbl";
pub const REPORT_OUT: &str = "report.json";

/// Loads every artifact, runs [`infer`] and writes the object map, part
/// map and JSON report into `out_dir`.
pub fn run_pipeline(
    paths: &PipelinePaths,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<Inference> {
    let g = stage("load grammar", LabelGrammar::load(&paths.grammar))?;
    let obj = stage("load object potentials", PotentialMap::load(&paths.obj))?;
    let scp = stage("load scp potentials", PotentialMap::load(&paths.scp))?;
    let refiner = stage("load refiner", ConvRefiner::load(&paths.refiner))?;
    let model = stage(
        "load pairwise model",
        PairwiseModel::load(&paths.model, Some(&g)),
    )?;
    let out = infer(&obj, &scp, &g, &refiner, &model, cfg)?;
    stage("write outputs", write_inference(&out, out_dir))?;
    Ok(out)
}

pub fn write_inference(out: &Inference, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.object.save(dir.join(OBJECT_OUT))?;
    out.part.save(dir.join(PART_OUT))?;
    write_json(&dir.join(REPORT_OUT), &out.report)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Desk-scale training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub refiner: TrainConfig,
    pub pairwise: TrainConfig,
    pub hidden: usize,
    pub dropout: f64,
    pub proposal: ProposalConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            refiner: TrainConfig {
                learning_rate: 0.5,
                batch_size: 4,
                max_epochs: 15,
                seed: 0,
            },
            pairwise: TrainConfig {
                learning_rate: 0.1,
                batch_size: 64,
                max_epochs: 400,
                seed: 0,
            },
            hidden: crate::pairwise::HIDDEN_UNITS,
            dropout: crate::pairwise::DEFAULT_DROPOUT,
            proposal: ProposalConfig::default(),
        }
    }
}

impl TrainOptions {
    /// Same settings with both trainers reseeded from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.refiner.seed = seed;
        self.pairwise.seed = seed.wrapping_add(1);
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub refiner: TrainedRefiner,
    pub pairwise: TrainedModel,
    pub pairwise_samples: usize,
}

/// Loss curves of both trainers, as written next to the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub refiner: TrainLog,
    pub pairwise: TrainLog,
    pub pairwise_samples: usize,
}

/// Trains the refiner, then the pairwise network on pairs whose object
/// descriptors come from the trained refiner.
pub fn train_models(
    scenes: &[Scene],
    g: &LabelGrammar,
    opts: &TrainOptions,
) -> Result<TrainedModels> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()).in_stage("train"));
    }
    let samples = stage(
        "refiner samples",
        scenes
            .iter()
            .map(Scene::refiner_sample)
            .collect::<Result<Vec<_>>>(),
    )?;
    let refiner = stage("train refiner", train_refiner(&samples, &opts.refiner))?;
    let pairs = stage(
        "pairwise samples",
        crate::synth::generate_pairwise_dataset(scenes, g, &opts.proposal, Some(&refiner.refiner)),
    )?;
    let shape = ModelShape {
        num_objects: g.num_objects(),
        num_scps: g.num_scps(),
        hidden: opts.hidden,
        dropout: opts.dropout,
    };
    let init = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.pairwise.seed);
        PairwiseModel::random(shape, &mut rng)
    };
    let pairwise = stage(
        "train pairwise model",
        train_model_from(init, &pairs, &opts.pairwise),
    )?;
    Ok(TrainedModels {
        refiner,
        pairwise,
        pairwise_samples: pairs.len(),
    })
}

pub const REFINER_OUT: &str = "refiner.conv";
pub const MODEL_OUT: &str = "pairwise.pair";
pub const TRAIN_LOG_OUT: &str = "train_log.json";

/// Trains both models and writes them, with their loss curves, to `out_dir`.
/// Returns the refiner and pairwise-model paths.
pub fn train_pipeline(
    scenes: &[Scene],
    g: &LabelGrammar,
    opts: &TrainOptions,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let trained = train_models(scenes, g, opts)?;
    stage("write models", {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let refiner_path = out_dir.join(REFINER_OUT);
        let model_path = out_dir.join(MODEL_OUT);
        trained.refiner.refiner.save(&refiner_path)?;
        trained.pairwise.model.save(&model_path)?;
        let log = TrainingLog {
            refiner: trained.refiner.log.clone(),
            pairwise: trained.pairwise.log.clone(),
            pairwise_samples: trained.pairwise_samples,
        };
        write_json(&out_dir.join(TRAIN_LOG_OUT), &log)?;
        Ok((refiner_path, model_path))
    })
}

/// Untrained baseline: identity refiner and a zero network, whose pairwise
/// energies are constant.
pub fn untrained_models(g: &LabelGrammar) -> (ConvRefiner, PairwiseModel) {
    (
        ConvRefiner::identity(g.num_scps(), g.num_objects()),
        PairwiseModel::zeros(ModelShape::for_grammar(g)),
    )
}
