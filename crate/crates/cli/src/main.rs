use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splat_core::checkpoint;
use splat_core::colmap::read_model;
use splat_core::cvpm::{camera_unit, combine_decisions, prune_mask, PruneContext, PruneReport};
use splat_core::dataset::Dataset;
use splat_core::image::{read_image, write_ppm};
use splat_core::synth::{SynthConfig, SyntheticScene};
use splat_core::train::{evaluate, MetricTable, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "splat", version, about = "Neural Gaussian splatting: synthesize, train, render, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train on a dataset and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Render every camera of a COLMAP text model from a checkpoint.
    Render(RenderArgs),
    /// Print PSNR/SSIM of held-out views.
    Eval(EvalArgs),
    /// Apply the pruning mask to a checkpoint's Gaussians and report counts.
    PruneReport(PruneArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthetic-scene settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    floaters: Option<usize>,
    #[arg(long)]
    outliers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    views_per_step: Option<usize>,
    /// Disable the cross-view consistency loss and pruning.
    #[arg(long)]
    no_cvpm: bool,
    /// Drop the structural gradient path.
    #[arg(long)]
    no_svc: bool,
    /// Disable tri-plane attention.
    #[arg(long)]
    no_attention: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding cameras.txt and images.txt.
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, conflicts_with = "renders", required_unless_present = "renders")]
    checkpoint: Option<PathBuf>,
    /// Directory of pre-rendered images named like the dataset images.
    #[arg(long)]
    renders: Option<PathBuf>,
    /// Print the table as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose training cameras are used.
    #[arg(long)]
    dataset: PathBuf,
    /// TOML training configuration supplying the thresholds.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the pruned checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    config.seed = args.seed.unwrap_or(config.seed);
    config.gaussians = args.gaussians.unwrap_or(config.gaussians);
    config.views = args.views.unwrap_or(config.views);
    config.size = args.size.unwrap_or(config.size);
    config.floaters = args.floaters.unwrap_or(config.floaters);
    config.outliers = args.outliers.unwrap_or(config.outliers);
    let scene = SyntheticScene::generate(&config)?;
    create_dir(&args.out)?;
    scene.write(&args.out)?;
    println!(
        "wrote {} views, {} points ({} artifacts) to {}",
        scene.cameras.len(),
        scene.points.len(),
        scene.artifacts.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    c.iterations = args.iterations.unwrap_or(c.iterations);
    c.seed = args.seed.unwrap_or(c.seed);
    c.views_per_step = args.views_per_step.unwrap_or(c.views_per_step);
    c.cvpm &= !args.no_cvpm;
    c.svc &= !args.no_svc;
    c.model.cscm.attention &= !args.no_attention;
    c.validate()?;
    Ok(c)
}

fn print_table(table: &MetricTable, names: &[String], json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(table)?);
        return Ok(());
    }
    println!("{:<24} {:>8} {:>7}", "view", "psnr", "ssim");
    for v in &table.views {
        println!("{:<24} {:>8.3} {:>7.3}", names[v.view], v.psnr, v.ssim);
    }
    println!("{:<24} {:>8.3} {:>7.3}", "mean", table.mean_psnr, table.mean_ssim);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = train_config(&args)?;
    let data = Dataset::load(&args.dataset)?;
    if data.points.is_empty() {
        bail!("{} has no points3D.txt to initialize anchors", args.dataset.display());
    }
    create_dir(&args.out)?;
    std::fs::write(args.out.join("config.toml"), config.to_toml())?;
    let mut trainer = Trainer::new(config, &data.points, data.train_views())?;
    let log_path = args.out.join("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let result = trainer.run(|record| {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| splat_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })
    });
    log.flush()?;
    result?;
    checkpoint::save(args.out.join("checkpoint.bin"), &trainer.scene, trainer.iteration())?;
    if !data.test.is_empty() {
        let table = evaluate(&trainer.scene, &data.test_views())?;
        std::fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&table)?)?;
        print_table(&table, &data.names, false)?;
    }
    println!(
        "trained {} iterations: {} anchors, {} Gaussians",
        trainer.iteration(),
        trainer.scene.anchor_count(),
        trainer.scene.live_slot_count()
    );
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let (scene, _) = checkpoint::load(&args.checkpoint)?;
    let posed = read_model(&args.cameras)?;
    create_dir(&args.out)?;
    for p in &posed {
        let out = scene.render(&p.camera)?;
        let path = args.out.join(Path::new(&p.name).with_extension("ppm"));
        write_ppm(&path, &out.color)?;
    }
    println!("rendered {} views to {}", posed.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let data = Dataset::load(&args.dataset)?;
    let views = data.test_views();
    let table = match (&args.checkpoint, &args.renders) {
        (Some(ckpt), _) => {
            let (scene, _) = checkpoint::load(ckpt)?;
            evaluate(&scene, &views)?
        }
        (None, Some(dir)) => {
            let renders = views
                .iter()
                .map(|v| read_image(dir.join(&data.names[v.index])))
                .collect::<splat_core::Result<Vec<_>>>()?;
            MetricTable::from_images(views.iter().zip(&renders).map(|(v, r)| (v.index, r, &v.image)))?
        }
        (None, None) => bail!("either --checkpoint or --renders is required"),
    };
    print_table(&table, &data.names, args.json)
}

fn prune_report(args: PruneArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let (mut scene, iteration) = checkpoint::load(&args.checkpoint)?;
    let data = Dataset::load(&args.dataset)?;
    let cams: Vec<_> = data.train.iter().map(|&i| data.cameras[i].clone()).collect();
    let (refs, means) = scene.live_means();
    scene.bounds.refresh_statistics(&means);
    let ctx = PruneContext {
        unit: camera_unit(&cams).unwrap_or_else(|| scene.bounds.diagonal()),
        centroid: scene.bounds.centroid,
        sigma: scene.bounds.spatial_sigma,
        thresholds: config.prune,
    };
    let decisions: Vec<_> = cams.iter().map(|c| prune_mask(&means, c, &ctx)).collect();
    for (&i, d) in data.train.iter().zip(&decisions) {
        let count = |v: &[bool]| v.iter().filter(|&&b| b).count();
        println!(
            "{}",
            serde_json::json!({
                "camera": data.names[i],
                "near_camera": count(&d.near_camera),
                "outlier": count(&d.outlier),
                "flagged": count(&d.mask),
            })
        );
    }
    let mask = combine_decisions(&decisions);
    let any = |f: fn(&splat_core::cvpm::PruneDecision) -> &Vec<bool>| {
        (0..means.len()).filter(|&g| decisions.iter().any(|d| f(d)[g])).count()
    };
    let dead: Vec<_> = refs.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect();
    let mut report = PruneReport {
        iteration,
        cameras: data.train.clone(),
        flagged_near_camera: any(|d| &d.near_camera),
        flagged_outlier: any(|d| &d.outlier),
        removed_gaussians: dead.len(),
        ..Default::default()
    };
    if dead.len() < refs.len() {
        let (_, removed) = scene.remove_slots(&dead)?;
        report.removed_anchors = removed;
    }
    report.surviving_gaussians = scene.live_slot_count();
    report.surviving_anchors = scene.anchor_count();
    println!("{}", serde_json::to_string(&report)?);
    if let Some(out) = &args.out {
        checkpoint::save(out, &scene, iteration)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::PruneReport(a) => prune_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
