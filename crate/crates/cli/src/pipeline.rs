//! Session workflow: tracking a dataset, mapping, rendering and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use splat4d::camera::PinholeCamera;
use splat4d::image::Image;
use splat4d::mapper::{MapInputs, MapReport, MapState};
use splat4d::metrics::{align_poses, ate_rmse, psnr, ssim_metric};
use splat4d::scaffold::Track;
use splat4d::se3::{se3_exp, se3_log, SE3Pose};
use splat4d::tracker::{
    build_edges, collect_correspondences, covisible_overlap, dba_solve, select_keyframe, tum_line, CorrespondenceProvider,
    DbaConfig, FlowCorrespondence, FrameStats, Keyframe, SyntheticFlow,
};
use splat4d::uncertainty::{write_beta2, LocalStatsFeatures, NoisySegmenter, OracleSegmenter, SegmentationProvider};

use crate::config::{SegmenterKind, SessionConfig};
use crate::dataset::{self, ingest_tum, TumDataset};
use crate::error::{read_to_string, write_file, CliError, Result};

pub const SESSION_FILE: &str = "session.toml";
pub const KEYFRAMES_FILE: &str = "keyframes.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const REFINED_MARKER: &str = "pose_refined";

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRecord {
    /// Index into the dataset's associated frames.
    pub frame: usize,
    pub timestamp: f64,
    pub pose: SE3Pose<f64>,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub dir: PathBuf,
    pub config: SessionConfig,
    pub keyframes: Vec<KeyframeRecord>,
}

fn parse_keyframes(text: &str, path: &Path) -> Result<Vec<KeyframeRecord>> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let bad = || CliError::malformed(path, format!("bad keyframe line `{line}`"));
        let (frame, rest) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        let frame = frame.parse().map_err(|_| bad())?;
        let (ts, pose) = dataset::parse_trajectory(rest)
            .map_err(|_| bad())?
            .pop()
            .ok_or_else(bad)?;
        out.push(KeyframeRecord {
            frame,
            timestamp: ts,
            pose,
        });
    }
    Ok(out)
}

fn format_keyframes(records: &[KeyframeRecord]) -> String {
    let mut kf = String::from("# frame timestamp tx ty tz qx qy qz qw\n");
    for k in records {
        let _ = writeln!(kf, "{} {} {}", k.frame, k.timestamp, dataset::exact_pose_fields(&k.pose));
    }
    kf
}

impl Session {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(SESSION_FILE);
        if !cfg_path.is_file() {
            return Err(CliError::Session(format!("{} is not a session directory", dir.display())));
        }
        let config = SessionConfig::load(&cfg_path)?;
        let kf_path = dir.join(KEYFRAMES_FILE);
        let keyframes = parse_keyframes(&read_to_string(&kf_path)?, &kf_path)?;
        if keyframes.is_empty() {
            return Err(CliError::Session(format!("{} lists no keyframes", kf_path.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            keyframes,
        })
    }

    pub fn save(&self) -> Result<()> {
        write_file(&self.dir.join(SESSION_FILE), self.config.to_toml())?;
        let mut traj = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for k in &self.keyframes {
            let _ = writeln!(traj, "{}", tum_line(k.timestamp, &k.pose));
        }
        write_file(&self.dir.join(KEYFRAMES_FILE), format_keyframes(&self.keyframes))?;
        write_file(&self.dir.join(TRAJECTORY_FILE), traj)
    }

    pub fn dataset(&self) -> Result<TumDataset> {
        ingest_tum(Path::new(&self.config.session.dataset))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR)
    }

    pub fn poses(&self) -> Vec<SE3Pose<f64>> {
        self.keyframes.iter().map(|k| k.pose).collect()
    }
}

/// Reprojection flow between dataset frames from the ground-truth trajectory
/// and the observed depths, corrupted on the ground-truth dynamic masks.
pub fn flow_oracle(ds: &TumDataset, frames: &[usize], config: &SessionConfig) -> Result<SyntheticFlow> {
    let mut poses = Vec::with_capacity(frames.len());
    let mut depths = Vec::with_capacity(frames.len());
    let mut masks = Vec::with_capacity(frames.len());
    for &f in frames {
        let ts = ds.frames[f].timestamp;
        let pose = ds
            .groundtruth_pose(ts)
            .ok_or_else(|| CliError::Session(format!("no ground-truth pose near {ts:.6}; the flow oracle needs one")))?;
        poses.push(pose);
        depths.push(ds.depth(f)?);
        let m = ds.dynamic_mask(f)?;
        masks.push((!m.is_empty()).then_some(m));
    }
    let t = &config.tracking;
    let mut flow = SyntheticFlow::new(ds.camera, poses, depths);
    flow.noise_sigma = t.flow_noise;
    flow.variance = t.flow_variance;
    flow.outlier_masks = masks;
    flow.outlier_magnitude = t.outlier_px;
    flow.seed = config.session.seed;
    Ok(flow)
}

fn load_keyframes(ds: &TumDataset, records: &[KeyframeRecord]) -> Result<Vec<Keyframe>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Keyframe {
                pose: r.pose,
                image: ds.rgb(r.frame)?,
                depth: ds.depth(r.frame)?,
                time: i,
                timestamp: r.timestamp,
            })
        })
        .collect()
}

fn solve_keyframes(
    provider: &dyn CorrespondenceProvider,
    keyframes: &[Keyframe],
    beta2: &[Option<Image<f64>>],
    camera: &PinholeCamera<f64>,
    config: &SessionConfig,
    dba: &DbaConfig,
) -> Result<Vec<SE3Pose<f64>>> {
    if keyframes.len() < 2 {
        return Ok(keyframes.iter().map(|k| k.pose).collect());
    }
    let edges = build_edges(keyframes.len(), config.tracking.edge_radius);
    let corr = collect_correspondences(provider, &edges, dba.stride)?;
    Ok(dba_solve(keyframes, &corr, beta2, camera, dba)?.poses)
}

/// Predicts the next keyframe pose by repeating the last inter-keyframe motion,
/// scaled to the frame gap.
fn constant_velocity(kfs: &[KeyframeRecord], frame: usize) -> Result<SE3Pose<f64>> {
    let last = kfs.last().expect("at least one keyframe");
    if kfs.len() < 2 {
        return Ok(last.pose);
    }
    let prev = &kfs[kfs.len() - 2];
    let xi = se3_log(&prev.pose.inverse().compose(&last.pose))?;
    let s = (frame - last.frame) as f64 / (last.frame - prev.frame) as f64;
    Ok(last.pose.compose(&se3_exp(&xi.scale(s))))
}

/// Selects keyframes from the dataset and solves their poses incrementally.
pub fn track(dataset_dir: &Path, session_dir: &Path, mut config: SessionConfig) -> Result<Session> {
    config.validate()?;
    let ds = ingest_tum(dataset_dir)?;
    config.session.dataset = std::fs::canonicalize(dataset_dir)
        .map_err(|e| CliError::io(dataset_dir, e))?
        .to_string_lossy()
        .into_owned();
    let all: Vec<usize> = (0..ds.len()).collect();
    let oracle = flow_oracle(&ds, &all, &config)?;
    let kcfg = config.keyframe_config();
    let mut dba = config.dba_config();
    dba.use_uncertainty = false;
    let stride = dba.stride;

    let mut records = vec![KeyframeRecord {
        frame: 0,
        timestamp: ds.frames[0].timestamp,
        pose: SE3Pose::identity(),
    }];
    let mut keyframes = load_keyframes(&ds, &records)?;
    for f in 1..ds.len() {
        let last = records.last().expect("nonempty").frame;
        let c: FlowCorrespondence = oracle.correspondences(last, f, stride)?;
        let valid: Vec<usize> = oracle_cells(&oracle, last, stride);
        let seen: Vec<usize> = c.samples.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| i).collect();
        let stats = FrameStats {
            mean_flow: c.mean_flow(ds.camera.width, ds.camera.height),
            overlap: covisible_overlap(&valid, &seen),
        };
        if !select_keyframe(&stats, &kcfg) {
            continue;
        }
        let pose = constant_velocity(&records, f)?;
        records.push(KeyframeRecord {
            frame: f,
            timestamp: ds.frames[f].timestamp,
            pose,
        });
        keyframes.push(Keyframe {
            pose,
            image: ds.rgb(f)?,
            depth: ds.depth(f)?,
            time: keyframes.len(),
            timestamp: ds.frames[f].timestamp,
        });
        let sub = subset_oracle(&oracle, &records);
        let poses = solve_keyframes(&sub, &keyframes, &[], &ds.camera, &config, &dba)?;
        for ((r, k), p) in records.iter_mut().zip(keyframes.iter_mut()).zip(poses) {
            r.pose = p;
            k.pose = p;
        }
    }
    let session = Session {
        dir: session_dir.to_path_buf(),
        config,
        keyframes: records,
    };
    session.save()?;
    write_file(&session_dir.join(TRACKED_FILE), format_keyframes(&session.keyframes))?;
    Ok(session)
}

/// Grid cells of frame `f` with a valid depth.
fn oracle_cells(oracle: &SyntheticFlow, f: usize, stride: usize) -> Vec<usize> {
    let depth = &oracle.depths[f];
    let grid = splat4d::tracker::DepthGrid::new(depth.width, depth.height, stride);
    (0..grid.len())
        .filter(|&k| {
            let (x, y) = grid.pixel(k);
            let z = depth.get(x, y, 0);
            z > 0.0 && z.is_finite()
        })
        .collect()
}

/// The oracle restricted to the keyframes, indexed by keyframe.
fn subset_oracle(oracle: &SyntheticFlow, records: &[KeyframeRecord]) -> SyntheticFlow {
    let pick = |i: &KeyframeRecord| i.frame;
    SyntheticFlow {
        camera: oracle.camera,
        poses: records.iter().map(|r| oracle.poses[pick(r)]).collect(),
        depths: records.iter().map(|r| oracle.depths[pick(r)].clone()).collect(),
        noise_sigma: oracle.noise_sigma,
        variance: oracle.variance,
        outlier_masks: records.iter().map(|r| oracle.outlier_masks[pick(r)].clone()).collect(),
        outlier_magnitude: oracle.outlier_magnitude,
        seed: oracle.seed,
    }
}

/// Everything mapping reads besides the session itself.
pub struct MapData {
    pub dataset: TumDataset,
    pub keyframes: Vec<Keyframe>,
    pub tracks: Vec<Track>,
    pub segmenter: Box<dyn SegmentationProvider>,
    pub features: LocalStatsFeatures,
}

impl MapData {
    pub fn load(session: &Session) -> Result<Self> {
        let dataset = session.dataset()?;
        let keyframes = load_keyframes(&dataset, &session.keyframes)?;
        let cfg = &session.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.session.seed ^ 0x7472_6163_6b73);
        let noise = Normal::new(0.0, cfg.mapping.track_noise).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        let tracks = dataset
            .tracks()?
            .into_iter()
            .map(|t| Track {
                pixels: session
                    .keyframes
                    .iter()
                    .map(|k| {
                        let (ex, ey) = (noise.sample(&mut rng), noise.sample(&mut rng));
                        t.pixels[k.frame].map(|[u, v]| [u + ex, v + ey])
                    })
                    .collect(),
            })
            .filter(|t| t.pixels.iter().any(Option::is_some))
            .collect();
        let oracle = OracleSegmenter {
            instances: session
                .keyframes
                .iter()
                .map(|k| dataset.instance_masks(k.frame))
                .collect::<Result<_>>()?,
        };
        let segmenter: Box<dyn SegmentationProvider> = match cfg.uncertainty.segmenter {
            SegmenterKind::Oracle => Box::new(oracle),
            SegmenterKind::Noisy => Box::new(NoisySegmenter {
                oracle,
                box_half: cfg.uncertainty.noisy_box,
            }),
        };
        Ok(Self {
            dataset,
            keyframes,
            tracks,
            segmenter,
            features: LocalStatsFeatures,
        })
    }

    pub fn inputs(&self) -> MapInputs<'_> {
        MapInputs {
            keyframes: &self.keyframes,
            camera: &self.dataset.camera,
            tracks: &self.tracks,
            segmenter: self.segmenter.as_ref(),
            features: &self.features,
        }
    }
}

/// Loads the session's checkpoint, or seeds a fresh mapping state.
pub fn load_state(session: &Session, data: &MapData) -> Result<MapState> {
    let ck = session.checkpoint_dir();
    if ck.join("state.bin").is_file() {
        Ok(MapState::load_checkpoint(&ck)?)
    } else {
        Ok(MapState::new(&data.inputs(), &session.config.mapper_config())?)
    }
}

/// Re-solves the keyframe poses with the trained uncertainty as flow weights.
fn refine_poses(session: &mut Session, data: &mut MapData, state: &mut MapState) -> Result<()> {
    let frames: Vec<usize> = session.keyframes.iter().map(|k| k.frame).collect();
    let oracle = flow_oracle(&data.dataset, &frames, &session.config)?;
    let beta2 = (0..frames.len())
        .map(|t| state.predict_beta2(&data.inputs(), t).map(Some))
        .collect::<splat4d::Result<Vec<_>>>()?;
    let mut dba = session.config.dba_config();
    if !dba.use_uncertainty {
        return Ok(());
    }
    dba.use_uncertainty = true;
    for (k, p) in data.keyframes.iter_mut().zip(&state.poses) {
        k.pose = *p;
    }
    let poses = solve_keyframes(&oracle, &data.keyframes, &beta2, &data.dataset.camera, &session.config, &dba)?;
    for ((r, k), p) in session.keyframes.iter_mut().zip(data.keyframes.iter_mut()).zip(&poses) {
        r.pose = *p;
        k.pose = *p;
    }
    state.poses = poses;
    Ok(())
}

/// Runs up to `iterations` mapping steps (the whole remaining schedule when
/// `None`), resuming from and saving to the session checkpoint.
pub fn map(session_dir: &Path, iterations: Option<usize>) -> Result<MapReport> {
    let mut session = Session::load(session_dir)?;
    let mut data = MapData::load(&session)?;
    let cfg = session.config.mapper_config();
    let mut state = load_state(&session, &data)?;
    let ck = session.checkpoint_dir();
    let mut budget = iterations.unwrap_or(usize::MAX);
    let mut report = MapReport {
        iterations: 0,
        last_loss: f64::NAN,
        static_count: state.scene.static_set.len(),
        dynamic_count: state.scene.dynamic_set.len(),
    };
    let absorb = |r: MapReport, report: &mut MapReport| {
        report.iterations += r.iterations;
        if r.iterations > 0 {
            report.last_loss = r.last_loss;
        }
        report.static_count = r.static_count;
        report.dynamic_count = r.dynamic_count;
    };
    if state.iteration < cfg.phase_a_iterations {
        let n = budget.min(cfg.phase_a_iterations - state.iteration);
        let r = state.run(&data.inputs(), &cfg, n)?;
        budget -= r.iterations;
        absorb(r, &mut report);
    }
    let marker = ck.join(REFINED_MARKER);
    if state.iteration >= cfg.phase_a_iterations && session.config.tracking.refine_after_static && !marker.is_file() {
        refine_poses(&mut session, &mut data, &mut state)?;
        session.save()?;
        write_file(&marker, "")?;
    }
    if budget > 0 {
        let r = state.run(&data.inputs(), &cfg, budget)?;
        absorb(r, &mut report);
    }
    state.save_checkpoint(&ck)?;
    export_uncertainty(&session, &state)?;
    Ok(report)
}

fn export_uncertainty(session: &Session, state: &MapState) -> Result<()> {
    for (t, b) in state.beta2.iter().enumerate() {
        if let Some(b) = b {
            let mut buf = Vec::new();
            write_beta2(&mut buf, b)?;
            write_file(&session.dir.join("beta2").join(format!("{t:04}.bin")), buf)?;
        }
    }
    for (t, m) in state.masks.iter().enumerate() {
        dataset::write_mask(&session.dir.join("masks").join(format!("{t:04}.png")), m)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub keyframes: usize,
    pub psnr_train: f64,
    pub ssim_train: f64,
    pub psnr_heldout: Option<f64>,
    pub ssim_heldout: Option<f64>,
    pub heldout_frames: usize,
    pub ate_cm: Option<f64>,
    pub static_gaussians: usize,
    pub dynamic_gaussians: usize,
    pub iterations: usize,
}

impl Metrics {
    pub fn gaussians(&self) -> usize {
        self.static_gaussians + self.dynamic_gaussians
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "keyframes = {}", self.keyframes);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "psnr_train = {:.6}", self.psnr_train);
        let _ = writeln!(s, "ssim_train = {:.6}", self.ssim_train);
        let _ = writeln!(s, "psnr_heldout = {}", opt(self.psnr_heldout));
        let _ = writeln!(s, "ssim_heldout = {}", opt(self.ssim_heldout));
        let _ = writeln!(s, "heldout_frames = {}", self.heldout_frames);
        let _ = writeln!(s, "ate_cm = {}", opt(self.ate_cm));
        let _ = writeln!(s, "gaussians_static = {}", self.static_gaussians);
        let _ = writeln!(s, "gaussians_dynamic = {}", self.dynamic_gaussians);
        let _ = writeln!(s, "gaussians_total = {}", self.gaussians());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for l in text.lines() {
            if let Some((k, v)) = l.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let bad = |k: &str| CliError::Session(format!("metrics lack a valid `{k}`"));
        let f = |k: &str| -> Result<f64> { kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let n = |k: &str| -> Result<usize> { kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let o = |k: &str| -> Result<Option<f64>> { f(k).map(|v| (!v.is_nan()).then_some(v)) };
        Ok(Self {
            keyframes: n("keyframes")?,
            iterations: n("iterations")?,
            psnr_train: f("psnr_train")?,
            ssim_train: f("ssim_train")?,
            psnr_heldout: o("psnr_heldout")?,
            ssim_heldout: o("ssim_heldout")?,
            heldout_frames: n("heldout_frames")?,
            ate_cm: o("ate_cm")?,
            static_gaussians: n("gaussians_static")?,
            dynamic_gaussians: n("gaussians_dynamic")?,
        })
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Train-view quality against the observed keyframes, held-out quality against
/// sharp frames at aligned ground-truth poses, and ATE of the keyframes.
pub fn evaluate(session_dir: &Path, gt_dir: Option<&Path>, sim3: bool) -> Result<Metrics> {
    let session = Session::load(session_dir)?;
    let data = MapData::load(&session)?;
    let gt = match gt_dir {
        Some(d) => ingest_tum(d)?,
        None => session.dataset()?,
    };
    let ck = session.checkpoint_dir();
    if !ck.join("state.bin").is_file() {
        return Err(CliError::Session(format!("{} has not been mapped yet", session_dir.display())));
    }
    let state = MapState::load_checkpoint(&ck)?;
    let cfg = session.config.mapper_config();
    let cam = data.dataset.camera;

    let mut ps = Vec::new();
    let mut ss = Vec::new();
    for (t, kf) in data.keyframes.iter().enumerate() {
        let out = state.render_keyframe(&cam, t, &cfg)?;
        let img = out.color.map(|v| v.clamp(0.0, 1.0));
        ps.push(psnr(&img, &kf.image, None)?);
        ss.push(ssim_metric(&img, &kf.image, None)?);
    }

    let gt_poses: Option<Vec<SE3Pose<f64>>> = session.keyframes.iter().map(|k| gt.groundtruth_pose(k.timestamp)).collect();
    let mut ate_cm = None;
    let mut hp = Vec::new();
    let mut hs = Vec::new();
    if let Some(gt_poses) = gt_poses.filter(|g| g.len() >= 3) {
        ate_cm = Some(100.0 * ate_rmse(&state.poses, &gt_poses, sim3)?);
        let align = align_poses(&state.poses, &gt_poses, sim3)?;
        let kf_frames: Vec<usize> = session.keyframes.iter().map(|k| k.frame).collect();
        for f in 0..gt.len() {
            if kf_frames.contains(&f) {
                continue;
            }
            let (Some(sharp), Some(pose)) = (gt.sharp(f)?, gt.groundtruth_pose(gt.frames[f].timestamp)) else {
                continue;
            };
            let t = kf_frames
                .iter()
                .enumerate()
                .min_by_key(|(_, k)| k.abs_diff(f))
                .map(|(i, _)| i)
                .expect("keyframes exist");
            let out = state.render(&cam, t, &align.pull_back(&pose), None, cfg.weighting())?;
            let img = out.color.map(|v| v.clamp(0.0, 1.0));
            hp.push(psnr(&img, &sharp, None)?);
            hs.push(ssim_metric(&img, &sharp, None)?);
        }
    }
    let metrics = Metrics {
        keyframes: session.keyframes.len(),
        iterations: state.iteration,
        psnr_train: mean(&ps).unwrap_or(f64::NAN),
        ssim_train: mean(&ss).unwrap_or(f64::NAN),
        psnr_heldout: mean(&hp),
        ssim_heldout: mean(&hs),
        heldout_frames: hp.len(),
        ate_cm,
        static_gaussians: state.scene.static_set.len(),
        dynamic_gaussians: state.scene.dynamic_set.len(),
    };
    write_file(&session.dir.join(METRICS_FILE), metrics.to_text())?;
    Ok(metrics)
}

#[derive(Debug, Clone, Default)]
pub struct RenderRequest {
    /// Keyframe whose time and pose are used.
    pub keyframe: usize,
    /// Overrides the keyframe pose.
    pub pose: Option<SE3Pose<f64>>,
    /// Integrates over the keyframe's exposure and applies its gain.
    pub blur: bool,
}

pub fn render(session_dir: &Path, request: &RenderRequest, out: &Path) -> Result<()> {
    let session = Session::load(session_dir)?;
    let ck = session.checkpoint_dir();
    if !ck.join("state.bin").is_file() {
        return Err(CliError::Session(format!("{} has not been mapped yet", session_dir.display())));
    }
    let state = MapState::load_checkpoint(&ck)?;
    let t = request.keyframe;
    if t >= state.poses.len() {
        return Err(CliError::Session(format!("keyframe {t} out of range (0..{})", state.poses.len())));
    }
    let cfg = session.config.mapper_config();
    let cam = session.dataset()?.camera;
    let pose = request.pose.unwrap_or(state.poses[t]);
    let exposure = request.blur.then_some(&state.exposures[t]);
    let img = state.render(&cam, t, &pose, exposure, cfg.weighting())?.color;
    dataset::write_rgb(out, &img.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Ir,
    Aow,
    Rum,
}

impl std::str::FromStr for Component {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir" => Ok(Component::Ir),
            "aow" => Ok(Component::Aow),
            "rum" => Ok(Component::Rum),
            _ => Err(CliError::InvalidConfig(format!("unknown component `{s}` (expected ir, aow or rum)"))),
        }
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Ir => "ir",
            Component::Aow => "aow",
            Component::Rum => "rum",
        })
    }
}

/// Copies the tracked session into `out` with one component disabled, maps
/// it from scratch with the poses tracking produced and evaluates it.
pub fn ablate(session_dir: &Path, component: Component, out: &Path, gt_dir: Option<&Path>) -> Result<Metrics> {
    let mut session = Session::load(session_dir)?;
    if let Some(tracked) = tracked_keyframes(session_dir)? {
        session.keyframes = tracked;
    }
    match component {
        Component::Ir => session.config.components.ir = false,
        Component::Aow => session.config.components.aow = false,
        Component::Rum => session.config.components.rum = false,
    }
    session.config.validate()?;
    session.dir = out.to_path_buf();
    let ck = session.checkpoint_dir();
    if ck.exists() {
        std::fs::remove_dir_all(&ck).map_err(|e| CliError::io(&ck, e))?;
    }
    session.save()?;
    write_file(&out.join(TRACKED_FILE), format_keyframes(&session.keyframes))?;
    map(out, None)?;
    evaluate(out, gt_dir, false)
}

/// Keyframe poses as tracking left them, before any refinement.
pub const TRACKED_FILE: &str = "keyframes.tracked.txt";

fn tracked_keyframes(session_dir: &Path) -> Result<Option<Vec<KeyframeRecord>>> {
    let p = session_dir.join(TRACKED_FILE);
    if !p.is_file() {
        return Ok(None);
    }
    parse_keyframes(&read_to_string(&p)?, &p).map(Some)
}
