use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use partseg::crf::{CrfParams, DomainMode, LbpConfig};
use partseg::eval::{accumulate, foreground_iou, from_confusion, iou};
use partseg::pipeline::{
    run_pipeline, train_pipeline, PipelineConfig, PipelinePaths, TrainOptions, OBJECT_OUT, PART_OUT,
};
use partseg::proposal::{DistanceMetric, LabelMap, ProposalConfig};
use partseg::synth::{
    generate_scene, random_scene_spec, RandomSceneOptions, Scene, SceneSpec, OBJECT_GT_FILE,
    OBJ_FILE, PART_GT_FILE, SCP_FILE,
};
use partseg::LabelGrammar;

#[derive(Debug, Parser)]
#[command(
    name = "partseg",
    version,
    about = "Joint object and part segmentation over SCP grammars"
)]
struct Cli {
    /// Grammar file, or one of the built-ins `horse-cow` and `quadrupeds`.
    #[arg(long, global = true, default_value = "horse-cow")]
    grammar: String,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes, one directory each.
    Synth(SynthArgs),
    /// Train the refiner and the pairwise network on a scene directory.
    Train(TrainArgs),
    /// Label one image.
    Infer(InferArgs),
    /// Score predictions against scene ground truth.
    Eval(EvalArgs),
    /// Compare LBP against exhaustive search on every scene.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Scene description; random animals when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Chance per animal of a leg whose object channel is swapped.
    #[arg(long, default_value_t = 0.0)]
    confusion: f64,
    #[arg(long, default_value_t = 28)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    max_instances: usize,
}

#[derive(Debug, Args)]
struct ProposalArgs {
    /// Grouping distance threshold in pixels.
    #[arg(long, default_value_t = 10.0)]
    ts: f64,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: MetricArg,
    #[arg(long, default_value_t = 0)]
    min_area: usize,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    Euclidean,
    CityBlock,
}

impl ProposalArgs {
    fn config(&self) -> ProposalConfig {
        ProposalConfig {
            t_s: self.ts,
            metric: match self.metric {
                MetricArg::Euclidean => DistanceMetric::Euclidean,
                MetricArg::CityBlock => DistanceMetric::CityBlock,
            },
            min_area: self.min_area,
        }
    }
}

#[derive(Debug, Args)]
struct CrfArgs {
    #[arg(long, default_value_t = 2.0)]
    lambda_e: f64,
    #[arg(long, default_value_t = 0.3)]
    lambda_p: f64,
    #[arg(long, default_value_t = 5)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Restrict each node to labels sharing its proposed meaning.
    #[arg(long)]
    same_meaning: bool,
    #[command(flatten)]
    proposal: ProposalArgs,
}

impl CrfArgs {
    fn config(&self, oracle: bool) -> PipelineConfig {
        PipelineConfig {
            crf: CrfParams {
                lambda_e: self.lambda_e,
                lambda_p: self.lambda_p,
                domain: if self.same_meaning {
                    DomainMode::SameMeaning
                } else {
                    DomainMode::All
                },
            },
            lbp: LbpConfig {
                max_iters: self.max_iters,
                damping: self.damping,
                tol: self.tol,
            },
            proposal: self.proposal.config(),
            oracle,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    refiner_epochs: Option<usize>,
    #[arg(long)]
    pairwise_epochs: Option<usize>,
    #[command(flatten)]
    proposal: ProposalArgs,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    refiner: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Scene directory holding obj.ptm and scp.ptm; overridden by --obj/--scp.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    obj: Option<PathBuf>,
    #[arg(long)]
    scp: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also solve each group exhaustively and report the comparison.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    crf: CrfArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of scene directories with ground truth.
    #[arg(long)]
    scenes: PathBuf,
    /// Directory of prediction directories named like the scenes.
    #[arg(long)]
    preds: PathBuf,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    crf: CrfArgs,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // library errors already embed their cause; only add new context
        let mut msg = err.to_string();
        for cause in err.chain().skip(1) {
            let c = cause.to_string();
            if !msg.contains(&c) {
                msg = format!("{msg}: {c}");
            }
        }
        eprintln!("partseg: {msg}");
        process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Infer(a) => infer(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::OracleCheck(a) => oracle_check(&cli, a),
    }
}

fn grammar(spec: &str) -> Result<LabelGrammar> {
    match spec {
        "horse-cow" => Ok(LabelGrammar::horse_cow()),
        "quadrupeds" => Ok(LabelGrammar::quadrupeds()),
        path => LabelGrammar::load(path).with_context(|| format!("[load grammar] {path}")),
    }
}

fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(OBJ_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no scene directories under {}", root.display());
    }
    Ok(dirs)
}

fn name_of(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let g = grammar(&cli.grammar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let fixed = a.spec.as_deref().map(SceneSpec::load).transpose()?;
    let opts = RandomSceneOptions {
        height: a.height,
        width: a.width,
        max_instances: a.max_instances,
        noise: a.noise,
        confusion_prob: a.confusion,
        ..Default::default()
    };
    for k in 0..a.count {
        let spec = match &fixed {
            Some(s) => s.clone(),
            None => random_scene_spec(&g, &opts, &mut rng)?,
        };
        let seed = cli.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        let scene = generate_scene(&spec, &g, seed)?;
        let dir = a.out.join(format!("scene_{k:04}"));
        scene.save(&dir)?;
        spec.save(dir.join("spec.toml"))?;
        println!(
            "{}",
            json!({ "scene": dir.display().to_string(), "seed": seed })
        );
    }
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let g = grammar(&cli.grammar)?;
    let scenes = scene_dirs(&a.scenes)?
        .iter()
        .map(Scene::load)
        .collect::<partseg::Result<Vec<_>>>()?;
    let mut opts = TrainOptions::default().with_seed(cli.seed);
    opts.proposal = a.proposal.config();
    if let Some(e) = a.refiner_epochs {
        opts.refiner.max_epochs = e;
    }
    if let Some(e) = a.pairwise_epochs {
        opts.pairwise.max_epochs = e;
    }
    let (refiner, model) = train_pipeline(&scenes, &g, &opts, &a.out)?;
    println!(
        "{}",
        json!({
            "scenes": scenes.len(),
            "refiner": refiner.display().to_string(),
            "model": model.display().to_string(),
        })
    );
    Ok(())
}

/// Writes a grammar to `dir` so the path-based pipeline can load it.
fn grammar_path(spec: &str, dir: &Path) -> Result<PathBuf> {
    let builtin = match spec {
        "horse-cow" => partseg::grammar::HORSE_COW_TOML,
        "quadrupeds" => partseg::grammar::QUADRUPEDS_TOML,
        path => return Ok(PathBuf::from(path)),
    };
    fs::create_dir_all(dir)?;
    let p = dir.join("grammar.toml");
    fs::write(&p, builtin)?;
    Ok(p)
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let pick = |explicit: &Option<PathBuf>, file: &str| -> Result<PathBuf> {
        match (explicit, &a.scene) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(file)),
            (None, None) => bail!("give --scene or both --obj and --scp"),
        }
    };
    let paths = PipelinePaths {
        obj: pick(&a.obj, OBJ_FILE)?,
        scp: pick(&a.scp, SCP_FILE)?,
        grammar: grammar_path(&cli.grammar, &a.out)?,
        refiner: a.models.refiner.clone(),
        model: a.models.model.clone(),
    };
    let out = run_pipeline(&paths, &a.out, &a.crf.config(a.oracle))?;
    println!("{}", serde_json::to_string(&out.report)?);
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let g = grammar(&cli.grammar)?;
    let (no, np) = (g.num_objects(), g.num_parts());
    let mut obj_acc = vec![vec![0u64; no]; no];
    let mut part_acc = vec![vec![0u64; np]; np];
    let (mut fg_sum, mut n) = (0.0, 0usize);
    for dir in scene_dirs(&a.scenes)? {
        let name = name_of(&dir);
        let pred_dir = a.preds.join(&name);
        let load =
            |p: PathBuf| LabelMap::load(&p).with_context(|| format!("[eval] {}", p.display()));
        let (po, pp) = (
            load(pred_dir.join(OBJECT_OUT))?,
            load(pred_dir.join(PART_OUT))?,
        );
        let (go, gp) = (
            load(dir.join(OBJECT_GT_FILE))?,
            load(dir.join(PART_GT_FILE))?,
        );
        let ro = iou(&po, &go, no)?;
        let rp = iou(&pp, &gp, np)?;
        let fg = foreground_iou(&po, &go)?;
        accumulate(&mut obj_acc, &ro.confusion)?;
        accumulate(&mut part_acc, &rp.confusion)?;
        fg_sum += fg;
        n += 1;
        println!(
            "{}",
            json!({
                "image": name,
                "object_miou": ro.mean_iou,
                "object_pixel_accuracy": ro.pixel_accuracy,
                "part_miou": rp.mean_iou,
                "part_pixel_accuracy": rp.pixel_accuracy,
                "foreground_iou": fg,
            })
        );
    }
    let (ro, rp) = (from_confusion(obj_acc), from_confusion(part_acc));
    println!(
        "{}",
        json!({
            "aggregate": true,
            "images": n,
            "object_miou": ro.mean_iou,
            "object_pixel_accuracy": ro.pixel_accuracy,
            "object_per_class": ro.per_class,
            "part_miou": rp.mean_iou,
            "part_pixel_accuracy": rp.pixel_accuracy,
            "part_per_class": rp.per_class,
            "mean_foreground_iou": fg_sum / n.max(1) as f64,
        })
    );
    Ok(())
}

fn oracle_check(cli: &Cli, a: &OracleArgs) -> Result<()> {
    let cfg = a.crf.config(true);
    let (mut groups, mut agree, mut skipped) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 1.0;
    for dir in scene_dirs(&a.scenes)? {
        let out_dir = a.out.join(name_of(&dir));
        let paths = PipelinePaths {
            obj: dir.join(OBJ_FILE),
            scp: dir.join(SCP_FILE),
            grammar: grammar_path(&cli.grammar, &out_dir)?,
            refiner: a.models.refiner.clone(),
            model: a.models.model.clone(),
        };
        let out = run_pipeline(&paths, &out_dir, &cfg)?;
        skipped += out.report.oracle_skipped;
        for gr in &out.report.groups {
            if let Some(o) = &gr.oracle {
                groups += 1;
                agree += usize::from(o.same_labels);
                worst = worst.max(o.energy_ratio);
            }
        }
    }
    println!(
        "{}",
        json!({
            "groups_checked": groups,
            "groups_skipped": skipped,
            "same_labels": agree,
            "worst_energy_ratio": worst,
        })
    );
    Ok(())
}
