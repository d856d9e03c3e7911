use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gazeteach::config::Config;
use gazeteach::dataset::{validate, Dataset, DatasetWriter};
use gazeteach::geometry::{Aabb3, Point3};
use gazeteach::metrics::{auto_label_sets, evaluate, parse_detections, parse_ground_truth, EvalReport};
use gazeteach::pipeline::plan;
use gazeteach::scene::{sample_gaze, Scene, Shape};
use gazeteach::teach::script::run_scripted;
use gazeteach::teach::server::serve;
use gazeteach::teach::TeachService;

#[derive(Parser)]
#[command(name = "gazeteach", version, about = "Teach a simulated robot new objects by looking at them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every source of randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn config(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate or inspect scene files.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Run a teaching script headlessly and append the sessions to a dataset.
    Teach {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Serve one interactive client over WebSocket.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Dataset recorded sessions are appended to.
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check every file of a dataset; exits with 1 on any violation.
    Validate { dataset: PathBuf },
    /// Frames per class and entity.
    Stats {
        dataset: PathBuf,
        #[arg(long, default_value_t = 40)]
        width: usize,
    },
    /// COCO-style evaluation of detections against ground truth.
    Eval {
        /// Ground-truth boxes, one `image_id,class,x_min,y_min,x_max,y_max` per line.
        #[arg(long, requires = "det", conflicts_with = "dataset")]
        gt: Option<PathBuf>,
        /// Detections, ground-truth columns plus `score`.
        #[arg(long, requires = "gt")]
        det: Option<PathBuf>,
        /// Evaluate a dataset's auto-labels against its rendered boxes.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write the per-class table here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the precision/recall curves at IoU 0.5 here.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Print the orbit plan for a bounding box as JSON.
    Plan {
        /// x_min,y_min,z_min,x_max,y_max,z_max in meters
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        bbox: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default config as TOML.
    Config,
}

#[derive(Subcommand)]
enum SceneCommand {
    /// Random tabletop with `count` primitives.
    Generate {
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the objects of a scene with a gaze point on each.
    Inspect {
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_scene(path: &Path) -> Result<Scene> {
    Scene::load(path).with_context(|| format!("loading scene {}", path.display()))
}

fn shape_text(s: &Shape) -> String {
    match s {
        Shape::Box { size } => format!("box {:.3}x{:.3}x{:.3}", size[0], size[1], size[2]),
        Shape::Sphere { radius } => format!("sphere r={radius:.3}"),
        Shape::Cylinder { radius, height } => format!("cylinder r={radius:.3} h={height:.3}"),
    }
}

fn scene_command(cmd: SceneCommand) -> Result<()> {
    match cmd {
        SceneCommand::Generate { count, seed, out } => {
            let scene = Scene::random_tabletop(seed, count)?;
            scene.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} objects to {}", scene.primitives.len(), out.display());
        }
        SceneCommand::Inspect { scene, seed } => {
            let scene = load_scene(&scene)?;
            println!("{:>3}  {:<16} {:<28} {:<26} gaze", "id", "class", "shape", "position");
            for p in &scene.primitives {
                let t = p.pose.translation;
                let g = sample_gaze(&scene, p.id, 0.0, seed)?;
                println!(
                    "{:>3}  {:<16} {:<28} ({:+.3}, {:+.3}, {:+.3})   ({:+.3}, {:+.3}, {:+.3})",
                    p.id,
                    p.class_name,
                    shape_text(&p.shape),
                    t.x,
                    t.y,
                    t.z,
                    g.x,
                    g.y,
                    g.z
                );
            }
        }
    }
    Ok(())
}

fn print_report(rep: &EvalReport, csv: Option<&Path>, pr_csv: Option<&Path>) -> Result<()> {
    print!("{}", rep.summary());
    if !rep.ignored_classes.is_empty() {
        log::warn!("detections of classes without ground truth ignored: {}", rep.ignored_classes.join(", "));
    }
    if let Some(p) = csv {
        std::fs::write(p, rep.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = pr_csv {
        std::fs::write(p, rep.pr_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Scene(cmd) => scene_command(cmd)?,
        Command::Teach { scene, script, out, common } => {
            let config = common.config()?;
            let scene = Arc::new(load_scene(&scene)?);
            let report = run_scripted(&script, scene, config, common.seed, &out)?;
            print!("{}", report.summary());
            println!("dataset: {}", out.display());
        }
        Command::Serve { scene, port, host, out, common } => {
            let config = common.config()?;
            let scene = Arc::new(load_scene(&scene)?);
            let writer = DatasetWriter::open_or_create(&out, config.wrist.intrinsics)?;
            let service = TeachService::new(scene, config, common.seed)?.with_dataset(writer);
            let listener = TcpListener::bind((host.as_str(), port)).with_context(|| format!("binding {host}:{port}"))?;
            println!("listening on ws://{}", listener.local_addr()?);
            serve(listener, service, Arc::new(AtomicBool::new(false)))?;
        }
        Command::Validate { dataset } => {
            let report = validate(&dataset);
            for v in &report.violations {
                println!("{}: {}", v.path.display(), v.message);
            }
            println!("{} frames checked, {} violations", report.frames_checked, report.violations.len());
            if !report.is_ok() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Stats { dataset, width } => {
            let stats = Dataset::open(&dataset)?.stats()?;
            for (class, ents) in &stats.counts {
                let per: Vec<String> = ents.iter().map(|(e, n)| format!("{e:03}:{n}")).collect();
                println!("{class}: {} frames ({})", stats.class_total(class), per.join(" "));
            }
            println!("total: {} frames", stats.total());
            print!("{}", stats.histogram(width));
        }
        Command::Eval { gt, det, dataset, csv, pr_csv } => {
            let (dets, gts) = match (gt, det, dataset) {
                (Some(g), Some(d), None) => {
                    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
                    (
                        parse_detections(&read(&d)?).with_context(|| d.display().to_string())?,
                        parse_ground_truth(&read(&g)?).with_context(|| g.display().to_string())?,
                    )
                }
                (None, None, Some(root)) => auto_label_sets(&Dataset::open(&root)?.read_sessions()?),
                _ => bail!("pass either --gt and --det, or --dataset"),
            };
            let rep = evaluate(&dets, &gts)?;
            print_report(&rep, csv.as_deref(), pr_csv.as_deref())?;
        }
        Command::Plan { bbox, config } => {
            let config = Common { config, seed: 0 }.config()?;
            if bbox.len() != 6 {
                bail!("--bbox takes 6 comma-separated numbers, got {}", bbox.len());
            }
            let b = Aabb3::new(Point3::new(bbox[0], bbox[1], bbox[2]), Point3::new(bbox[3], bbox[4], bbox[5]));
            println!("{}", plan(&b, &config)?.to_json());
        }
        Command::Config => print!("{}", Config::default().to_toml_string()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
