use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splat4d::linalg::{Quat, Vec3};
use splat4d::se3::SE3Pose;
use splat4d_cli::config::SessionConfig;
use splat4d_cli::pipeline::{self, Component, RenderRequest, Session};
use splat4d_cli::synth::{self, SceneSpec, BOX_SCENE, STATIC_SCENE};
use splat4d_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "splat4d", version, about = "Dynamic Gaussian-splatting SLAM on RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Default)]
struct Overrides {
    /// Session configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set mapping.phase_a_iterations=200`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec (`box` and `static` name the bundled scenes).
    Synth { spec: String, out: PathBuf },
    /// Select keyframes and estimate their poses.
    Track {
        dataset: PathBuf,
        session: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Optimize the scene, resuming from the session checkpoint.
    Map {
        session: PathBuf,
        /// Stop after this many iterations.
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render one view of the mapped scene to a PNG.
    Render {
        session: PathBuf,
        /// Keyframe index giving the scene time and default pose.
        #[arg(long, default_value_t = 0)]
        time: usize,
        /// Camera-to-world pose `tx ty tz qx qy qz qw`.
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
        /// Apply the keyframe's exposure: blur, gain and bias.
        #[arg(long)]
        blur: bool,
        #[arg(long, short, default_value = "render.png")]
        out: PathBuf,
    },
    /// Write PSNR, SSIM, ATE and Gaussian counts to the session's metrics.txt.
    Eval {
        session: PathBuf,
        /// Ground-truth dataset; defaults to the tracked one.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Align trajectories with a similarity transform.
        #[arg(long)]
        sim3: bool,
    },
    /// Re-map a tracked session with one component disabled.
    Ablate {
        session: PathBuf,
        #[arg(long, value_parser = ["ir", "aow", "rum"])]
        disable: String,
        /// Output session directory; defaults to `<session>-no-<component>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

fn base_config(o: &Overrides, start: SessionConfig) -> Result<SessionConfig> {
    let mut cfg = match &o.config {
        Some(p) => SessionConfig::load(p)?,
        None => start,
    };
    for s in &o.set {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn parse_pose(s: &str) -> Result<SE3Pose<f64>> {
    let bad = || CliError::InvalidConfig(format!("--pose needs `tx ty tz qx qy qz qw`, got `{s}`"));
    let v: Vec<f64> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if v.len() != 7 || v.iter().any(|x| !x.is_finite()) {
        return Err(bad());
    }
    let q = Quat::new(v[6], v[3], v[4], v[5]);
    if q.norm() == 0.0 {
        return Err(bad());
    }
    Ok(SE3Pose::new(q.normalized(), Vec3::new(v[0], v[1], v[2])))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = match spec.as_str() {
                "box" if !Path::new("box").exists() => SceneSpec::parse(BOX_SCENE)?,
                "static" if !Path::new("static").exists() => SceneSpec::parse(STATIC_SCENE)?,
                path => SceneSpec::load(Path::new(path))?,
            };
            let ds = synth::generate(&spec)?;
            ds.write(&out)?;
            println!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Track {
            dataset,
            session,
            overrides,
        } => {
            let cfg = base_config(&overrides, SessionConfig::default())?;
            let s = pipeline::track(&dataset, &session, cfg)?;
            println!("tracked {} keyframes", s.keyframes.len());
        }
        Command::Map {
            session,
            iterations,
            overrides,
        } => {
            if overrides.config.is_some() || !overrides.set.is_empty() {
                let mut s = Session::load(&session)?;
                let dataset = s.config.session.dataset.clone();
                s.config = base_config(&overrides, s.config.clone())?;
                s.config.session.dataset = dataset;
                s.save()?;
            }
            let r = pipeline::map(&session, iterations)?;
            println!(
                "ran {} iterations; {} static and {} dynamic Gaussians",
                r.iterations, r.static_count, r.dynamic_count
            );
        }
        Command::Render {
            session,
            time,
            pose,
            blur,
            out,
        } => {
            let req = RenderRequest {
                keyframe: time,
                pose: pose.as_deref().map(parse_pose).transpose()?,
                blur,
            };
            pipeline::render(&session, &req, &out)?;
        }
        Command::Eval { session, gt, sim3 } => {
            let m = pipeline::evaluate(&session, gt.as_deref(), sim3)?;
            print!("{}", m.to_text());
        }
        Command::Ablate {
            session,
            disable,
            out,
            gt,
        } => {
            let c: Component = disable.parse()?;
            let out = out.unwrap_or_else(|| {
                let mut name = session.file_name().unwrap_or_default().to_os_string();
                name.push(format!("-no-{c}"));
                session.with_file_name(name)
            });
            let m = pipeline::ablate(&session, c, &out, gt.as_deref())?;
            print!("{}", m.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
