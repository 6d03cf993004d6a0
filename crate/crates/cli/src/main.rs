//! Command-line front end: scene preprocessing, single episodes, dataset
//! generation, metrics, debug renders and the step protocol server.
//!
//! Exit codes: 0 success, 2 bad config, 3 no path, 4 I/O, 1 anything else.

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;
use splatnav::expert::{Outcome, RobotState};
use splatnav::scenario::{
    build_maps, compute_metrics, generate_dataset, read_manifest, run_episode, sample_episode, EpisodeConfig,
    EpisodeResult, ObsMode, StepService, World,
};
use splatnav::splat::{load_scene, save_scene, ShMode, SplatScene};
use splatnav::synthetic::{make_synthetic_scene, SyntheticParams};
use splatnav::{Error, SimConfig};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "splatnav", version, about = "Dynamic navigation scenarios on Gaussian-splat scenes")]
struct Cli {
    /// JSON config; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxelize a scene and write the robot and human maps.
    Voxelize {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump PGM images of the maps and of every voxel layer.
        #[arg(long)]
        pgm: bool,
    },
    /// Run the expert on one episode.
    Plan {
        scene: PathBuf,
        /// Episode file; otherwise one is sampled from --seed.
        #[arg(long)]
        episode: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Humans in a sampled episode (defaults to the config).
        #[arg(long)]
        humans: Option<usize>,
        /// Write planner events as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the full episode record as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an imitation-learning dataset.
    GenData {
        scene: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip rendering observation frames.
        #[arg(long)]
        no_render: bool,
    },
    /// Success rate and average reaching time of a dataset.
    Metrics {
        /// A `manifest.json` or the directory holding it.
        dataset: PathBuf,
    },
    /// Render one observation.
    Render {
        scene: PathBuf,
        /// Robot pose `x,y,heading` (m, m, rad).
        #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
        pose: [f64; 3],
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Episode whose humans are drawn.
        #[arg(long)]
        episode: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the step protocol on stdin/stdout.
    Serve {
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = Obs::Base64)]
        obs: Obs,
        /// Directory for `--obs files`.
        #[arg(long)]
        obs_dir: Option<PathBuf>,
    },
    /// Write the procedural test scene.
    SynthScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        boxes: usize,
        #[arg(long, default_value_t = 12.0)]
        size: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Obs {
    Base64,
    Files,
    Off,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    NoPath(String),
    Io(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::IoPath { .. } | Error::Image(_) => Failure::Io(e.to_string()),
            Error::Format(_) | Error::MissingField(_) | Error::NonFinite { .. } | Error::EmptyScene => {
                Failure::Io(format!("cannot read scene: {e}"))
            }
            Error::NoPath(_) => Failure::NoPath(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::NoPath(_) => 3,
            Failure::Io(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

fn parse_pose(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected x,y,heading, got {} values", v.len()))
}

fn load_config(path: Option<&Path>) -> Result<SimConfig, Failure> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            SimConfig::from_json(&text).map_err(|e| Failure::Config(e.to_string()))?
        }
        None => SimConfig::default(),
    };
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn read_episode(path: &Path) -> Result<EpisodeConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn make_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn scene(path: &Path) -> Result<SplatScene, Failure> {
    Ok(load_scene(path, ShMode::DcOnly)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Voxelize { scene: path, out, pgm } => {
            let s = scene(&path)?;
            let maps = build_maps(&s, &cfg)?;
            make_dir(&out)?;
            write_file(&out.join("robot_map.json"), serde_json::to_string(&maps.robot).expect("maps serialize"))?;
            write_file(&out.join("human_map.json"), serde_json::to_string(&maps.human).expect("maps serialize"))?;
            if pgm {
                maps.robot.write_pgm(out.join("robot_map.pgm"))?;
                maps.human.write_pgm(out.join("human_map.pgm"))?;
                maps.voxels.write_pgm_slices(out.join("slices"))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "voxels": maps.voxels.dims,
                    "occupied_voxels": maps.voxels.occupied_count(),
                    "map": maps.robot.dims,
                    "resolution": maps.robot.resolution,
                })
            );
        }
        Cmd::Plan {
            scene: path,
            episode,
            seed,
            humans,
            trace,
            out,
        } => {
            let world = World::new(scene(&path)?, cfg)?;
            let ep = match episode {
                Some(p) => read_episode(&p)?,
                None => sample_episode(&world, seed, humans.unwrap_or(world.cfg.human.count))?,
            };
            let rec = run_episode(&world, &ep, None)?;
            if let Some(p) = trace {
                let mut text = String::new();
                for e in &rec.trace {
                    text.push_str(&serde_json::to_string(e).expect("trace serializes"));
                    text.push('\n');
                }
                write_file(&p, text)?;
            }
            if let Some(p) = out {
                write_file(&p, serde_json::to_string_pretty(&rec).expect("record serializes"))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "outcome": rec.outcome.as_str(),
                    "reaching_time": rec.reaching_time,
                    "replans": rec.replans,
                    "samples": rec.samples.len(),
                })
            );
            if rec.outcome == Outcome::PlanFailure {
                return Err(Failure::NoPath("the expert found no path".into()));
            }
        }
        Cmd::GenData {
            scene: path,
            episodes,
            seed,
            out,
            no_render,
        } => {
            let mut cfg = cfg;
            if no_render {
                cfg.dataset.render = false;
            }
            let n = episodes.unwrap_or(cfg.dataset.episodes);
            let seed = seed.unwrap_or(cfg.dataset.seed);
            let world = World::new(scene(&path)?, cfg)?;
            let manifest = generate_dataset(&world, n, seed, &out)?;
            println!("{}", serde_json::to_string(&manifest.metrics).expect("metrics serialize"));
        }
        Cmd::Metrics { dataset } => {
            let path = if dataset.is_dir() { dataset.join("manifest.json") } else { dataset };
            let manifest = read_manifest(&path)?;
            let results: Vec<EpisodeResult> = manifest
                .episodes
                .iter()
                .map(|e| EpisodeResult {
                    outcome: e.outcome,
                    reaching_time: e.reaching_time,
                })
                .collect();
            let m = compute_metrics(&results, manifest.time_limit)?;
            println!("scene        {}", manifest.scene);
            println!("episodes     {}", m.episodes);
            println!("SR           {:.1}%", 100.0 * m.sr);
            println!("ART          {:.2} s", m.art);
            println!("collisions   {}", m.collisions);
            println!("timeouts     {}", m.timeouts);
            println!("plan fails   {}", m.plan_failures);
        }
        Cmd::Render {
            scene: path,
            pose,
            time,
            episode,
            out,
        } => {
            let world = World::new(scene(&path)?, cfg)?;
            let humans = match episode {
                Some(p) => world.actors(&read_episode(&p)?)?,
                None => Vec::new(),
            };
            let state = RobotState::at_rest(pose[0], pose[1], pose[2]);
            world.render_at(&humans, &state, time)?.save_png(&out)?;
            if !world.robot_map.is_free(Vector2::new(pose[0], pose[1])) {
                eprintln!("note: the pose is inside an obstacle");
            }
        }
        Cmd::Serve { scene: path, obs, obs_dir } => {
            let mode = match obs {
                Obs::Base64 => ObsMode::Base64,
                Obs::Off => ObsMode::Off,
                Obs::Files => {
                    let dir = obs_dir.ok_or_else(|| Failure::Config("--obs files needs --obs-dir".into()))?;
                    make_dir(&dir)?;
                    ObsMode::Files(dir)
                }
            };
            let world = World::new(scene(&path)?, cfg)?;
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            StepService::new(&world, mode).serve(stdin.lock(), stdout.lock())?;
        }
        Cmd::SynthScene { out, seed, boxes, size } => {
            let params = SyntheticParams {
                seed,
                boxes,
                size,
                ..SyntheticParams::default()
            };
            let s = make_synthetic_scene(&params)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                make_dir(dir)?;
            }
            save_scene(&s, &out)?;
            println!("{} primitives", s.primitives.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) => format!("bad config: {m}"),
                Failure::NoPath(m) | Failure::Io(m) | Failure::Other(m) => m.clone(),
            };
            let _ = writeln!(std::io::stderr(), "error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
