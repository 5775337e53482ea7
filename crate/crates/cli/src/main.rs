//! `boxmine` command line: synthesize scenes, mine instance masks, score
//! them, and audit the gradients.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use boxmine::consistency::{consistency_loss, ConsistencyConfig};
use boxmine::error::{Error, Result};
use boxmine::evaluate::{map_at, GroundTruthInstance, Prediction};
use boxmine::gradcheck::{self, GradCheckConfig};
use boxmine::io::{load_instances, load_scene, save_instances, save_scene, InstanceRecord, Scene};
use boxmine::mining::MiningConfig;
use boxmine::optimize::{LossWeights, ScheduleConfig};
use boxmine::perturb::{apply_to_box, apply_to_points, compose_perturbation, PerturbationSpec};
use boxmine::pipeline::{
    mine_scene, FileSource, ForegroundPriorConfig, InitConfig, JitteredSource, NmsConfig,
    PipelineConfig, ProposalRegistry,
};
use boxmine::synth::{generate_scene, ClassRecipe, ShapeRegistry, SynthConfig};

#[derive(Parser)]
#[command(
    name = "boxmine",
    version,
    about = "Box-supervised point-cloud instance-mask mining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a set of synthetic scenes with designed occupancies.
    Synth(SynthArgs),
    /// Mine instance masks for every scene in a directory.
    Mine(MineArgs),
    /// Score mined instances against ground truth (mAP tables).
    Eval(EvalArgs),
    /// Audit analytic loss gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Report the perturbation-consistency losses for one scene.
    Consistency(ConsistencyArgs),
    /// Report per-class occupancy ratios of mined instances.
    Occupancy(OccupancyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for scene files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Total point budget per scene.
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    /// Class recipes as shape:occupancy (repeatable). Defaults to
    /// full-box:1.0 shell:0.84 l-shape:0.7 shell:0.54.
    #[arg(long = "class")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 4)]
    instances_min: usize,
    #[arg(long, default_value_t = 8)]
    instances_max: usize,
    #[arg(long, default_value_t = 500)]
    instance_points_min: usize,
    #[arg(long, default_value_t = 900)]
    instance_points_max: usize,
    #[arg(long, default_value_t = 0.4)]
    box_min: f64,
    #[arg(long, default_value_t = 0.6)]
    box_max: f64,
    #[arg(long, default_value_t = 1.6)]
    extent: f64,
    #[arg(long, default_value_t = 0.02)]
    color_noise: f64,
    #[arg(long, default_value_t = 0.05)]
    normal_noise: f64,
    #[arg(long, default_value_t = 0.55)]
    color_margin: f64,
    /// Background color as r,g,b in [0,1].
    #[arg(long, default_value = "0.52,0.52,0.52")]
    background_color: String,
    /// Embed jittered proposals in the annotation files.
    #[arg(long)]
    emit_proposals: bool,
}

#[derive(Args)]
struct MineArgs {
    /// Directory of .scene files.
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory for .inst and .energy.csv files.
    #[arg(long)]
    out: PathBuf,
    /// Proposal source: gt, jitter, or file.
    #[arg(long, default_value = "gt")]
    proposals: String,
    /// External annotation file for the `file` source.
    #[arg(long)]
    proposals_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,

    // mining
    #[arg(long, default_value_t = 0.3)]
    delta_low: f64,
    #[arg(long, default_value_t = 0.7)]
    delta_high: f64,
    #[arg(long, default_value_t = 0.03)]
    radius: f64,
    #[arg(long, default_value_t = 1000.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1000.0)]
    theta1: f64,
    #[arg(long, default_value_t = 1000.0)]
    theta2: f64,
    #[arg(long, default_value_t = 1000.0)]
    theta3: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,

    // schedule
    #[arg(long, default_value_t = 600)]
    phase1_iters: usize,
    #[arg(long, default_value_t = 200)]
    phase2_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Step-decay iteration indices (repeatable).
    #[arg(long = "decay-at", default_values_t = vec![300usize, 450])]
    decay_at: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 10)]
    refresh_every: usize,
    #[arg(long, default_value_t = 1.0)]
    w_seed: f64,
    #[arg(long, default_value_t = 1.0)]
    w_sp: f64,
    #[arg(long, default_value_t = 1.0)]
    w_pc: f64,
    #[arg(long, default_value_t = 1.0)]
    w_or: f64,

    // pipeline
    #[arg(long, default_value_t =  0.25)]
    nms_iou: f64,
    #[arg(long, default_value_t = 0.7)]
    init_inside: f64,
    #[arg(long, default_value_t = 0.1)]
    init_outside: f64,
    /// Disable the color-contrast foreground prior.
    #[arg(long)]
    no_prior: bool,
    #[arg(long, default_value_t = 0.3)]
    prior_low: f64,
    #[arg(long, default_value_t = 0.05)]
    prior_contrast: f64,
    #[arg(long, default_value_t = 16)]
    prior_kmeans_iters: usize,

    // jitter source parameters
    #[arg(long, default_value_t = 0.9)]
    jitter_scale_min: f64,
    #[arg(long, default_value_t = 1.1)]
    jitter_scale_max: f64,
    #[arg(long, default_value_t = 0.05)]
    jitter_shift: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of .inst files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of .scene files carrying ground truth.
    #[arg(long)]
    scenes: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, default_value = "0.25,0.5")]
    thresholds: String,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Scene file providing ground-truth boxes.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Jitter amplitude of the sampled perturbation.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Proposal source for both branches: `gt` is exactly equivariant
    /// (zero losses); `jitter` mimics an imperfect detector.
    #[arg(long, default_value = "gt")]
    source: String,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 1e-8)]
    kl_eps: f64,
    /// Replay a saved perturbation record instead of sampling.
    #[arg(long)]
    perturbation: Option<PathBuf>,
    /// Save the perturbation record used.
    #[arg(long)]
    save_perturbation: Option<PathBuf>,
}

#[derive(Args)]
struct OccupancyArgs {
    /// Directory of .inst files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of .scene files.
    #[arg(long)]
    scenes: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Mine(args) => cmd_mine(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::Consistency(args) => cmd_consistency(args),
        Command::Occupancy(args) => cmd_occupancy(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Sorted .scene paths of a directory.
fn discover_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "scene"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .scene files found in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_color(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("color '{s}' must be r,g,b")));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad color component '{p}'")))?;
    }
    Ok(out)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let registry = ShapeRegistry::with_builtins();
    let mut cfg = SynthConfig {
        seed: args.seed,
        points: args.points,
        instances_min: args.instances_min,
        instances_max: args.instances_max,
        instance_points_min: args.instance_points_min,
        instance_points_max: args.instance_points_max,
        box_size_min: args.box_min,
        box_size_max: args.box_max,
        extent: args.extent,
        color_noise: args.color_noise,
        normal_noise: args.normal_noise,
        color_margin: args.color_margin,
        background_color: parse_color(&args.background_color)?,
        emit_proposals: args.emit_proposals,
        ..SynthConfig::default()
    };
    if !args.classes.is_empty() {
        cfg.classes = args
            .classes
            .iter()
            .map(|s| ClassRecipe::parse(s))
            .collect::<Result<_>>()?;
    }
    fs::create_dir_all(&args.out)?;
    for i in 0..args.scenes {
        let scene = generate_scene(&cfg, &registry, i)?;
        let path = args.out.join(format!("scene_{i:03}.scene"));
        save_scene(&path, &scene)?;
        println!(
            "wrote {} ({} points, {} instances)",
            path.display(),
            scene.cloud.len(),
            scene.gt_boxes.len()
        );
    }
    Ok(())
}

fn pipeline_config(args: &MineArgs) -> PipelineConfig {
    PipelineConfig {
        mining: MiningConfig {
            delta_low: args.delta_low,
            delta_high: args.delta_high,
            radius: args.radius,
            sigma: args.sigma,
            theta1: args.theta1,
            theta2: args.theta2,
            theta3: args.theta3,
            k_neighbors: args.k,
        },
        schedule: ScheduleConfig {
            phase1_iters: args.phase1_iters,
            phase2_iters: args.phase2_iters,
            step_size: args.step,
            decay_points: args.decay_at.clone(),
            decay_factor: args.decay_factor,
            label_refresh_every: args.refresh_every,
            weights: LossWeights {
                seed: args.w_seed,
                propagation: args.w_sp,
                property: args.w_pc,
                refinement: args.w_or,
            },
        },
        init: InitConfig {
            inside_score: args.init_inside,
            outside_score: args.init_outside,
        },
        prior: ForegroundPriorConfig {
            enabled: !args.no_prior,
            low_score: args.prior_low,
            min_contrast: args.prior_contrast,
            kmeans_iters: args.prior_kmeans_iters,
        },
        nms: NmsConfig {
            iou_threshold: args.nms_iou,
        },
    }
}

fn cmd_mine(args: MineArgs) -> Result<()> {
    let mut registry = ProposalRegistry::with_builtins();
    registry.register(Box::new(JitteredSource {
        scale_min: args.jitter_scale_min,
        scale_max: args.jitter_scale_max,
        shift: args.jitter_shift,
    }));
    if args.proposals_file.is_some() {
        registry.register(Box::new(FileSource {
            path: args.proposals_file.clone(),
        }));
    }
    let source = registry.get(&args.proposals)?;
    let cfg = pipeline_config(&args);
    fs::create_dir_all(&args.out)?;
    for (index, scene_path) in discover_scenes(&args.scenes)?.iter().enumerate() {
        let scene = load_scene(scene_path)?;
        let out = mine_scene(&scene, source, &cfg, args.seed.wrapping_add(index as u64))?;
        for w in &out.warnings {
            eprintln!("warning: {}: {w}", stem_of(scene_path));
        }
        let records: Vec<InstanceRecord> = out
            .instances
            .iter()
            .map(|c| InstanceRecord::new(c, out.proposals[c.proposal_id].aabb))
            .collect();
        let stem = stem_of(scene_path);
        save_instances(&args.out.join(format!("{stem}.inst")), &records)?;
        fs::write(
            args.out.join(format!("{stem}.energy.csv")),
            out.report.to_csv(),
        )?;
        println!(
            "{stem}: {} instances, final grad norm {:.3e}",
            out.instances.len(),
            out.report.final_grad_norm
        );
    }
    Ok(())
}

/// One loaded scene with its mined instance records.
type LoadedScene = (usize, Scene, Vec<InstanceRecord>);

/// Load predictions and ground truth for matching scene/instance stems.
fn load_eval_inputs(
    pred_dir: &Path,
    scene_dir: &Path,
) -> Result<(Vec<Prediction>, Vec<GroundTruthInstance>, Vec<LoadedScene>)> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut loaded = Vec::new();
    for (index, scene_path) in discover_scenes(scene_dir)?.iter().enumerate() {
        let scene = load_scene(scene_path)?;
        let inst_path = pred_dir.join(format!("{}.inst", stem_of(scene_path)));
        let records = if inst_path.exists() {
            load_instances(&inst_path)?
        } else {
            Vec::new()
        };
        for m in &scene.gt_masks {
            gts.push(GroundTruthInstance::new(index, m.class_id, m.points.clone())?);
        }
        for r in &records {
            preds.push(Prediction {
                scene: index,
                proposal_id: r.proposal_id,
                class_id: r.class_id,
                confidence: r.confidence,
                points: r.points.clone(),
            });
        }
        loaded.push((index, scene, records));
    }
    Ok((preds, gts, loaded))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let thresholds: Vec<f64> = args
        .thresholds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold '{s}'")))
        })
        .collect::<Result<_>>()?;
    let (preds, gts, _) = load_eval_inputs(&args.pred, &args.scenes)?;
    let report = map_at(&preds, &gts, &thresholds)?;
    print!("{}", report.to_table());
    if let Some(csv) = args.csv {
        fs::write(&csv, report.to_csv())?;
        println!("wrote {}", csv.display());
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let report = gradcheck::run(&GradCheckConfig {
        seed: args.seed,
        cases: args.cases,
        step: args.step,
        tolerance: args.tol,
    })?;
    print!("{}", report.to_table());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Evaluation(
            "gradient audit exceeded tolerance".into(),
        ))
    }
}

fn cmd_consistency(args: ConsistencyArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    if scene.gt_boxes.is_empty() {
        return Err(Error::Config(
            "scene has no ground-truth boxes to build proposals from".into(),
        ));
    }
    let spec = match &args.perturbation {
        Some(path) => PerturbationSpec::from_record(fs::read_to_string(path)?.trim())?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            PerturbationSpec::sample(&mut rng, args.jitter)
        }
    };
    if let Some(path) = &args.save_perturbation {
        fs::write(path, format!("{}\n", spec.to_record()))?;
    }
    let m = compose_perturbation(&spec);

    let registry = ProposalRegistry::with_builtins();
    let source = registry.get(&args.source)?;
    let mut rng_a = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let mut rng_b = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(2));
    let originals = source.proposals(&scene, &mut rng_a)?;
    let branch_a: Vec<_> = originals.iter().map(|p| p.perturbed(&m)).collect();
    let transformed = Scene {
        cloud: apply_to_points(&m, &scene.cloud),
        num_classes: scene.num_classes,
        gt_boxes: scene
            .gt_boxes
            .iter()
            .map(|b| boxmine::io::GtBox {
                instance_id: b.instance_id,
                class_id: b.class_id,
                aabb: apply_to_box(&m, &b.aabb),
            })
            .collect(),
        gt_masks: vec![],
        proposals: vec![],
    };
    let branch_b = source.proposals(&transformed, &mut rng_b)?;
    let loss = consistency_loss(
        &branch_a,
        &branch_b,
        &ConsistencyConfig {
            lambda_semantic: args.lambda1,
            lambda_geometric: args.lambda2,
            kl_epsilon: args.kl_eps,
        },
    )?;
    println!("perturbation: {}", spec.to_record());
    println!("semantic:  {}", loss.semantic);
    println!("geometric: {}", loss.geometric);
    println!("total:     {}", loss.total);
    Ok(())
}

fn cmd_occupancy(args: OccupancyArgs) -> Result<()> {
    use std::collections::BTreeMap;
    let (_, _, loaded) = load_eval_inputs(&args.pred, &args.scenes)?;
    // class -> (count, mined ratio sum, gt count, gt ratio sum)
    let mut rows: BTreeMap<usize, (usize, f64, usize, f64)> = BTreeMap::new();
    for (_, scene, records) in &loaded {
        for r in records {
            let in_box = boxmine::geometry::points_in_box(&scene.cloud, &r.aabb).len();
            if in_box == 0 {
                continue;
            }
            let entry = rows.entry(r.class_id).or_default();
            entry.0 += 1;
            entry.1 += r.points.len() as f64 / in_box as f64;
        }
        for (gt_box, gt_mask) in scene.gt_boxes.iter().zip(&scene.gt_masks) {
            let in_box = boxmine::geometry::points_in_box(&scene.cloud, &gt_box.aabb).len();
            if in_box == 0 {
                continue;
            }
            let entry = rows.entry(gt_box.class_id).or_default();
            entry.2 += 1;
            entry.3 += gt_mask.points.len() as f64 / in_box as f64;
        }
    }
    if rows.is_empty() {
        return Err(Error::Evaluation("no instances to report".into()));
    }
    println!(
        "{:>6} {:>8} {:>10} {:>8} {:>10}",
        "class", "mined", "occupancy", "gt", "occupancy"
    );
    let mut csv = String::from("class,mined_instances,mined_occupancy,gt_instances,gt_occupancy\n");
    for (class, (mc, ms, gc, gs)) in &rows {
        let mined = if *mc > 0 { ms / *mc as f64 } else { f64::NAN };
        let gt = if *gc > 0 { gs / *gc as f64 } else { f64::NAN };
        println!("{class:>6} {mc:>8} {mined:>10.4} {gc:>8} {gt:>10.4}");
        csv.push_str(&format!("{class},{mc},{mined},{gc},{gt}\n"));
    }
    if let Some(path) = args.csv {
        fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
