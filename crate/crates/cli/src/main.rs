use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use binpick_core::io::{save_cloud, CloudFormat};
use binpick_core::pipeline::{
    bench, bench_table, load_input, plan_segmentation, preprocess, run_pipeline, PipelineConfig, PlanFile,
    PlanStatus,
};
use binpick_core::preprocess::write_pgm_depth;
use binpick_core::register::{clusters_from_labels, register_all};
use binpick_core::segment::segment_cloud;
use binpick_core::synth::{synth_scene, Shape};
use binpick_core::PointCloud;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const EXIT_EMPTY: u8 = 2;

#[derive(Parser)]
#[command(name = "binpick", version, about = "Bin-picking perception: segment, register and plan grasps")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input cloud (.xyz, .ply) or depth image (.pgm).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Directory for the written artifacts.
    #[arg(long, global = true, default_value = ".")]
    output: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Format of written clouds.
    #[arg(long, global = true, default_value = "xyz")]
    format: CloudFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess and segment a frame; writes the labeled cloud.
    Segment,
    /// Register the template against every cluster of a labeled cloud.
    Register {
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Register and rank the clusters of a labeled cloud.
    Plan {
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Full pipeline on one frame.
    Run {
        #[arg(long)]
        template: Option<PathBuf>,
        /// Plan file of the previous frame; enables the unchanged-scene skip.
        #[arg(long)]
        previous: Option<PathBuf>,
        /// Ids from the previous plan that have been picked since.
        #[arg(long, value_delimiter = ',', requires = "previous")]
        grasped: Vec<usize>,
    },
    /// Generate a labeled synthetic pile plus object templates.
    Synth,
    /// Time octree against linear-scan segmentation.
    Bench {
        /// Target object point counts; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Print the full default config.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: Cli) -> Result<u8> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut config = match &c.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if !matches!(cli.command, Command::Config) {
        fs::create_dir_all(&c.output).with_context(|| format!("creating {}", c.output.display()))?;
    }
    match cli.command {
        Command::Segment => cmd_segment(c, &config),
        Command::Register { template } => cmd_register(c, &config, template),
        Command::Plan { template } => cmd_plan(c, &config, template),
        Command::Run {
            template,
            previous,
            grasped,
        } => cmd_run(c, &config, template, previous, &grasped),
        Command::Synth => cmd_synth(c, &config),
        Command::Bench { sizes } => cmd_bench(c, &config, sizes),
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(0)
        }
    }
}

fn input(c: &Common) -> Result<&Path> {
    c.input.as_deref().context("--input is required")
}

fn cloud_path(c: &Common, stem: &str) -> PathBuf {
    c.output.join(format!("{stem}.{}", c.format.extension()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn load_template(config: &PipelineConfig, flag: Option<PathBuf>) -> Result<PointCloud<f64>> {
    let path = flag
        .or_else(|| config.template_path().map(Path::to_path_buf))
        .context("no template: pass --template or set `template` in the config")?;
    load_input(&path, &config.camera).with_context(|| format!("loading template {}", path.display()))
}

fn load_main_input(c: &Common, config: &PipelineConfig) -> Result<PointCloud<f64>> {
    let path = input(c)?;
    load_input(path, &config.camera).with_context(|| format!("loading input {}", path.display()))
}

fn cmd_segment(c: &Common, config: &PipelineConfig) -> Result<u8> {
    let raw = load_main_input(c, config)?;
    let cloud = preprocess(&raw, config).context("preprocess stage")?;
    let seg = if cloud.is_empty() {
        None
    } else {
        Some(segment_cloud(&cloud, &config.segment.params()).context("segment stage")?)
    };
    let labels = seg.as_ref().map(|s| s.labels()).unwrap_or_default();
    let labeled = cloud.with_labels(labels)?;
    save_cloud(&labeled, cloud_path(c, "labeled"), c.format)?;
    let clusters: Vec<_> = seg
        .iter()
        .flat_map(|s| &s.clusters)
        .map(|k| json!({ "id": k.id, "size": k.indices.len(), "centroid": k.centroid }))
        .collect();
    let noise = seg.as_ref().map_or(0, |s| s.noise.len());
    write_json(
        &c.output.join("segments.json"),
        &json!({ "points": labeled.len(), "noise": noise, "clusters": clusters }),
    )?;
    println!("{:>6} {:>8} {:>10} {:>10} {:>10}", "id", "size", "x", "y", "z");
    for k in seg.iter().flat_map(|s| &s.clusters) {
        let p = k.centroid;
        println!("{:>6} {:>8} {:>10.4} {:>10.4} {:>10.4}", k.id, k.indices.len(), p.x, p.y, p.z);
    }
    println!("{} points, {} clusters, {} noise", labeled.len(), clusters.len(), noise);
    Ok(if clusters.is_empty() { EXIT_EMPTY } else { 0 })
}

fn load_labeled(c: &Common, config: &PipelineConfig) -> Result<PointCloud<f64>> {
    let cloud = load_main_input(c, config)?;
    if cloud.labels().is_none() {
        bail!("input has no label column; run `segment` first");
    }
    Ok(cloud)
}

fn cmd_register(c: &Common, config: &PipelineConfig, template: Option<PathBuf>) -> Result<u8> {
    let cloud = load_labeled(c, config)?;
    let template = load_template(config, template)?;
    let seg = clusters_from_labels(&cloud)?;
    let regs = register_all(&cloud, &seg, &template, &config.register.params());
    let rows: Vec<_> = regs
        .iter()
        .map(|r| match &r.result {
            Ok(res) => json!({
                "cluster_id": r.cluster_id,
                "pose": res.transform,
                "rmse": res.rmse,
                "iterations": res.iterations_used,
                "converged": res.converged,
            }),
            Err(e) => json!({ "cluster_id": r.cluster_id, "error": e }),
        })
        .collect();
    write_json(&c.output.join("registrations.json"), &rows)?;
    println!(
        "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10}",
        "id", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "rmse"
    );
    for r in &regs {
        match &r.result {
            Ok(res) => {
                let q = res.transform.quaternion();
                let t = res.transform.translation();
                println!(
                    "{:>6} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>9.4} {:>9.4} {:>9.4} {:>10.6}",
                    r.cluster_id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, res.rmse
                );
            }
            Err(e) => println!("{:>6} failed: {e}", r.cluster_id),
        }
    }
    Ok(if regs.is_empty() { EXIT_EMPTY } else { 0 })
}

fn cmd_plan(c: &Common, config: &PipelineConfig, template: Option<PathBuf>) -> Result<u8> {
    let cloud = load_labeled(c, config)?;
    let template = load_template(config, template)?;
    let seg = clusters_from_labels(&cloud)?;
    let plan = if seg.clusters.is_empty() {
        PlanFile::empty(config.seed, &["register", "plan"])
    } else {
        plan_segmentation(&cloud, &seg, &template, config).context("plan stage")?.0
    };
    fs::write(c.output.join("plan.json"), plan.to_json())?;
    print!("{}", plan.summary());
    Ok(exit_for(&plan))
}

fn exit_for(plan: &PlanFile) -> u8 {
    match plan.status {
        PlanStatus::Planned => 0,
        PlanStatus::EmptyBin => EXIT_EMPTY,
    }
}

fn cmd_run(
    c: &Common,
    config: &PipelineConfig,
    template: Option<PathBuf>,
    previous: Option<PathBuf>,
    grasped: &[usize],
) -> Result<u8> {
    let raw = load_main_input(c, config)?;
    let previous = previous
        .map(|p| -> Result<PlanFile> {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(PlanFile::from_json(&text)?)
        })
        .transpose()?;
    // without a template the pipeline still handles empty bins and reused plans
    let template = match template.or_else(|| config.template_path().map(Path::to_path_buf)) {
        Some(path) => Some(
            load_input(&path, &config.camera).with_context(|| format!("loading template {}", path.display()))?,
        ),
        None => None,
    };
    let out = run_pipeline(config, &raw, template.as_ref(), previous.as_ref(), grasped)?;
    fs::write(c.output.join("plan.json"), out.plan.to_json())?;
    write_json(&c.output.join("timings.json"), &out.timings)?;
    save_cloud(&out.labeled, cloud_path(c, "labeled"), c.format)?;
    print!("{}", out.plan.summary());
    let t = &out.timings;
    println!(
        "timings: preprocess {:.3}s segment {:.3}s register {:.3}s plan {:.3}s total {:.3}s",
        t.preprocess, t.segment, t.register, t.plan, t.total
    );
    Ok(exit_for(&out.plan))
}

fn cmd_synth(c: &Common, config: &PipelineConfig) -> Result<u8> {
    let spec = config.scene_spec();
    let scene = synth_scene(&spec)?;
    save_cloud(&scene.cloud, cloud_path(c, "scene"), c.format)?;
    let mut pgm = fs::File::create(c.output.join("depth.pgm"))?;
    write_pgm_depth(&scene.depth_image(), &mut pgm)?;
    write_json(
        &c.output.join("truth.json"),
        &json!({ "seed": config.seed, "spec": spec, "objects": scene.objects }),
    )?;
    let mut kinds = spec.kinds.clone();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    for kind in kinds {
        let template = Shape::standard(kind, 1.0).template(config.preprocess.voxel_leaf);
        let path = c.output.join(format!("template_{}.ply", kind.name()));
        save_cloud(&template, &path, CloudFormat::Ply)?;
    }
    println!(
        "{} objects, {} points ({} on objects)",
        scene.objects.len(),
        scene.cloud.len(),
        scene.labels().iter().filter(|&&l| l >= 0).count()
    );
    Ok(0)
}

fn cmd_bench(c: &Common, config: &PipelineConfig, sizes: Vec<usize>) -> Result<u8> {
    let sizes = if sizes.is_empty() { config.bench.sizes.clone() } else { sizes };
    let rows = bench(config, &sizes)?;
    write_json(&c.output.join("bench.json"), &rows)?;
    print!("{}", bench_table(&rows));
    Ok(0)
}
