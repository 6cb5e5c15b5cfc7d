//! 4D mapping: the photometric, structural and geometric loss rendered through
//! integrate-and-render, scaffold regularizers, adaptive opacity weights,
//! densification and the static-then-dynamic schedule.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::PinholeCamera;
use crate::error::{shape_err, Error, Result};
use crate::exposure::{ExposureGrad, ExposureParams, IrRenderer};
use crate::gaussian::{
    bind_to_nearest_node, densify_and_prune, read_ply, write_ply, DensifyConfig, GaussianPrimitive,
    GaussianScene, GradientStats, Splat,
};
use crate::image::Image;
use crate::linalg::{Quat, Vec3};
use crate::optim::Adam;
use crate::raster::{RenderOutput, Renderer, SplatGrad};
use crate::scaffold::{
    deform_gaussian_backward, deform_scene, init_nodes_from_tracks, read_scaffold, write_scaffold,
    GaussianGrad, NodeInitConfig, OpacityWeighting, ScaffoldGraph, ScaffoldGrad, Track,
};
use crate::se3::{se3_exp, SE3Pose, Twist};
use crate::ssim::{ssim_map, ssim_map_backward, ssim_prime};
use crate::tracker::Keyframe;
use crate::uncertainty::{
    reweighted_mask, sample_prompts, threshold_mask, uncertainty_loss, uncertainty_residual, BinaryMask,
    FeatureProvider, Mlp, SegmentationProvider, DEFAULT_DELTA_RU, DEFAULT_DELTA_U, DEFAULT_LAMBDA_REG,
    DEFAULT_PROMPTS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the structural (1 − SSIM) term.
    pub lambda1: f64,
    /// Weight of the depth term.
    pub lambda2: f64,
    /// Depth weight inside the uncertainty residual.
    pub lambda1_u: f64,
    pub lambda_reg: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub arap: f64,
    pub aow_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.5,
            lambda1_u: 0.5,
            lambda_reg: DEFAULT_LAMBDA_REG,
            velocity: 1e-3,
            acceleration: 0.1,
            arap: 0.1,
            aow_smooth: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda1_u,
            self.lambda_reg,
            self.velocity,
            self.acceleration,
            self.arap,
            self.aow_smooth,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Invalid("loss weights must be finite and non-negative".into()));
        }
        if self.lambda1 > 1.0 {
            return Err(Error::Invalid("lambda1 must not exceed 1".into()));
        }
        Ok(())
    }

    /// Photometric terms only.
    pub fn without_regularizers(self) -> Self {
        Self {
            velocity: 0.0,
            acceleration: 0.0,
            arap: 0.0,
            aow_smooth: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub mean: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub scaffold: f64,
    pub aow: f64,
    pub exposure: f64,
    pub pose: f64,
    pub uncertainty: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 2.5e-3,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 1e-2,
            color: 1e-2,
            scaffold: 1e-3,
            aow: 1e-3,
            exposure: 1e-3,
            pose: 1e-4,
            uncertainty: 5e-4,
        }
    }
}

/// Which mechanisms are active. Everything is on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub aow: bool,
    pub ir: bool,
    pub rum: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            aow: true,
            ir: true,
            rum: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub loss: LossConfig,
    pub lr: LearningRates,
    pub components: Components,
    pub phase_a_iterations: usize,
    pub phase_b_iterations: usize,
    /// When nonzero the predictor keeps training on full renders every this
    /// many dynamic-phase iterations.
    pub interleave_every: usize,
    pub densify_every: usize,
    pub densify: DensifyConfig,
    pub seed: u64,
    pub refine_poses: bool,
    /// Pixel stride when seeding static Gaussians from depth.
    pub static_seed_stride: usize,
    /// Pixel stride when seeding dynamic Gaussians inside the mask.
    pub dynamic_seed_stride: usize,
    pub initial_opacity: f64,
    /// Initial per-node opacity weight.
    pub aow_init: f64,
    /// Relative depth agreement under which a static Gaussian counts as lying
    /// on a masked dynamic surface.
    pub surface_tolerance: f64,
    /// Relative depth margin of the free-space test applied to static seeds;
    /// 0 disables the test.
    pub free_space_tolerance: f64,
    pub delta_u: f64,
    pub delta_ru: f64,
    pub prompts: usize,
    pub node_init: NodeInitConfig,
    pub exposure_rot_step: f64,
    pub exposure_trans_step: f64,
    pub exposure_max_samples: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: LearningRates::default(),
            components: Components::default(),
            phase_a_iterations: 300,
            phase_b_iterations: 500,
            interleave_every: 0,
            densify_every: 100,
            densify: DensifyConfig::default(),
            seed: 0,
            refine_poses: false,
            static_seed_stride: 2,
            dynamic_seed_stride: 2,
            initial_opacity: 0.7,
            aow_init: 5.0,
            surface_tolerance: 0.1,
            free_space_tolerance: 0.1,
            delta_u: DEFAULT_DELTA_U,
            delta_ru: DEFAULT_DELTA_RU,
            prompts: DEFAULT_PROMPTS,
            node_init: NodeInitConfig::default(),
            exposure_rot_step: 0.005,
            exposure_trans_step: 0.005,
            exposure_max_samples: 6,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.static_seed_stride == 0 || self.dynamic_seed_stride == 0 {
            return Err(Error::Invalid("seed strides must be positive".into()));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::Invalid("initial opacity must lie in (0, 1)".into()));
        }
        if self.exposure_max_samples == 0 {
            return Err(Error::Invalid("exposure_max_samples must be positive".into()));
        }
        if !(self.surface_tolerance >= 0.0 && self.free_space_tolerance >= 0.0) {
            return Err(Error::Invalid("depth tolerances must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.phase_a_iterations + self.phase_b_iterations
    }

    pub fn weighting(&self) -> OpacityWeighting {
        if self.components.aow {
            OpacityWeighting::Adaptive
        } else {
            OpacityWeighting::Disabled
        }
    }
}

/// Value and image-space adjoints of one frame's reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLoss {
    pub value: f64,
    pub grad_color: Image<f64>,
    pub grad_depth: Image<f64>,
}

/// `(1−λ₁)·L1 + λ₁·(1 − SSIM) + λ₂·L1(depth)` with every term a pixel mean,
/// optionally weighting each pixel. Depth counts only where observed.
pub fn photometric_loss(
    rendered: &RenderOutput<f64>,
    image: &Image<f64>,
    depth: &Image<f64>,
    cfg: &LossConfig,
    weights: Option<&Image<f64>>,
) -> Result<FrameLoss> {
    rendered.color.check_shape(image)?;
    rendered.depth.check_shape(depth)?;
    let (w, h) = (image.width, image.height);
    if let Some(wt) = weights {
        if wt.width != w || wt.height != h || wt.channels != 1 {
            return Err(shape_err(format!("{w}x{h}x1"), wt.shape_str()));
        }
    }
    let n = (w * h) as f64;
    let wp = |p: usize| weights.map_or(1.0, |wt| wt.data[p]);
    let mut grad_color = Image::zeros(w, h, 3);
    let mut grad_depth = Image::zeros(w, h, 1);

    let mut l1 = 0.0;
    let c1 = (1.0 - cfg.lambda1) / (3.0 * n);
    for p in 0..w * h {
        let wv = wp(p);
        for c in 0..3 {
            let i = p * 3 + c;
            let d = rendered.color.data[i] - image.data[i];
            l1 += wv * d.abs();
            grad_color.data[i] = c1 * wv * sign(d);
        }
    }
    l1 /= 3.0 * n;

    let mut structural = 0.0;
    if cfg.lambda1 > 0.0 {
        let s = ssim_map(&rendered.color, image)?;
        let mut g = Image::zeros(w, h, 1);
        for p in 0..w * h {
            structural += wp(p) * (1.0 - s.data[p]);
            g.data[p] = -cfg.lambda1 * wp(p) / n;
        }
        structural /= n;
        let gs = ssim_map_backward(&rendered.color, image, &g)?;
        for (a, b) in grad_color.data.iter_mut().zip(&gs.data) {
            *a += b;
        }
    }

    let valid = depth.data.iter().filter(|d| **d > 0.0).count();
    let mut geo = 0.0;
    if valid > 0 {
        let nv = valid as f64;
        for p in 0..w * h {
            let obs = depth.data[p];
            if obs <= 0.0 {
                continue;
            }
            let d = rendered.depth.data[p] - obs;
            geo += wp(p) * d.abs();
            grad_depth.data[p] = cfg.lambda2 * wp(p) * sign(d) / nv;
        }
        geo /= nv;
    }
    Ok(FrameLoss {
        value: (1.0 - cfg.lambda1) * l1 + cfg.lambda1 * structural + cfg.lambda2 * geo,
        grad_color,
        grad_depth,
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scaffold smoothness and opacity-weight regularizers with their gradient.
pub fn scaffold_regularizers(graph: &ScaffoldGraph<f64>, cfg: &LossConfig) -> (f64, ScaffoldGrad<f64>) {
    let mut grad = ScaffoldGrad::zeros_like(graph);
    let n = graph.nodes.len();
    let t_count = graph.keyframe_count();
    if n == 0 || t_count < 2 {
        return (0.0, grad);
    }
    let x = |k: usize, t: usize| graph.nodes[k].translation(t);
    let mut value = 0.0;

    if cfg.velocity > 0.0 {
        let cnt = (n * (t_count - 1)) as f64;
        for k in 0..n {
            for t in 0..t_count - 1 {
                let d = x(k, t + 1) - x(k, t);
                value += cfg.velocity * d.norm_squared() / cnt;
                let g = d.scale(2.0 * cfg.velocity / cnt);
                grad.translation[k][t + 1] += g;
                grad.translation[k][t] -= g;
            }
        }
    }
    if cfg.acceleration > 0.0 && t_count >= 3 {
        let cnt = (n * (t_count - 2)) as f64;
        for k in 0..n {
            for t in 1..t_count - 1 {
                let a = x(k, t + 1) - x(k, t).scale(2.0) + x(k, t - 1);
                value += cfg.acceleration * a.norm_squared() / cnt;
                let g = a.scale(2.0 * cfg.acceleration / cnt);
                grad.translation[k][t + 1] += g;
                grad.translation[k][t] -= g.scale(2.0);
                grad.translation[k][t - 1] += g;
            }
        }
    }
    if cfg.arap > 0.0 {
        let pairs: Vec<(usize, usize)> = graph
            .edges
            .iter()
            .enumerate()
            .flat_map(|(k, nb)| nb.iter().filter(move |&&j| j != k).map(move |&j| (k, j)))
            .collect();
        if !pairs.is_empty() {
            let cnt = (pairs.len() * (t_count - 1)) as f64;
            for &(k, j) in &pairs {
                for t in 0..t_count - 1 {
                    let a = x(k, t + 1) - x(j, t + 1);
                    let b = x(k, t) - x(j, t);
                    let (la, lb) = (a.norm(), b.norm());
                    let e = la - lb;
                    value += cfg.arap * e * e / cnt;
                    let c = 2.0 * cfg.arap * e / cnt;
                    if la > 0.0 {
                        let u = a.scale(c / la);
                        grad.translation[k][t + 1] += u;
                        grad.translation[j][t + 1] -= u;
                    }
                    if lb > 0.0 {
                        let u = b.scale(c / lb);
                        grad.translation[k][t] -= u;
                        grad.translation[j][t] += u;
                    }
                }
            }
        }
    }
    if cfg.aow_smooth > 0.0 {
        let cnt = (n * (t_count - 1)) as f64;
        for k in 0..n {
            let w = &graph.nodes[k].opacity_weights;
            for t in 0..t_count - 1 {
                let d = w[t + 1] - w[t];
                value += cfg.aow_smooth * d * d / cnt;
                let g = 2.0 * cfg.aow_smooth * d / cnt;
                grad.opacity_weights[k][t + 1] += g;
                grad.opacity_weights[k][t] -= g;
            }
        }
    }
    (value, grad)
}

/// How frames are rendered during mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub weighting: OpacityWeighting,
    /// When false a single sharp render without exposure adjustment is used.
    pub integrate: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            weighting: OpacityWeighting::Adaptive,
            integrate: true,
        }
    }
}

enum Backend {
    Integrated(IrRenderer<f64>),
    Plain(Renderer<f64>),
}

struct FrameGrad {
    splats: Vec<SplatGrad<f64>>,
    mean2d: Vec<[f64; 2]>,
    exposure: Option<ExposureGrad<f64>>,
    pose: Twist<f64>,
}

fn render_splats(
    splats: &[Splat<f64>],
    camera: &PinholeCamera<f64>,
    pose: &SE3Pose<f64>,
    exposure: &ExposureParams<f64>,
    background: Vec3<f64>,
    integrate: bool,
) -> Result<(RenderOutput<f64>, Backend)> {
    if integrate {
        let mut r = IrRenderer::new();
        let out = r.forward(splats, camera, pose, exposure, background)?;
        Ok((out, Backend::Integrated(r)))
    } else {
        let mut r = Renderer::new();
        let out = r.forward(splats, camera, pose, background);
        Ok((out, Backend::Plain(r)))
    }
}

fn backward(backend: &Backend, gc: &Image<f64>, gd: &Image<f64>) -> Result<FrameGrad> {
    match backend {
        Backend::Integrated(r) => {
            let g = r.backward(gc, gd)?;
            Ok(FrameGrad {
                splats: g.splats,
                mean2d: g.mean2d,
                exposure: Some(g.exposure),
                pose: g.pose,
            })
        }
        Backend::Plain(r) => {
            let g = r.backward(gc, gd)?;
            Ok(FrameGrad {
                splats: g.splats,
                mean2d: g.mean2d,
                exposure: None,
                pose: g.pose,
            })
        }
    }
}

fn frame_splats(
    scene: &GaussianScene<f64>,
    graph: &ScaffoldGraph<f64>,
    t: usize,
    weighting: OpacityWeighting,
) -> Result<Vec<Splat<f64>>> {
    if scene.dynamic_set.is_empty() {
        Ok(scene.static_splats())
    } else {
        deform_scene(scene, graph, t, weighting)
    }
}

fn static_grad(g: &GaussianPrimitive<f64>, sg: &SplatGrad<f64>) -> GaussianGrad<f64> {
    let o = g.opacity();
    GaussianGrad {
        mean: sg.mean,
        rotation: sg.rotation,
        log_scale: sg.log_scale,
        opacity_logit: sg.opacity * o * (1.0 - o),
        color: sg.color,
    }
}

/// Gradients of the mapping objective for every trainable group.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingGrad {
    pub static_set: Vec<GaussianGrad<f64>>,
    pub dynamic_set: Vec<GaussianGrad<f64>>,
    pub scaffold: ScaffoldGrad<f64>,
    /// One entry per keyframe; zero for frames not evaluated.
    pub exposures: Vec<ExposureGrad<f64>>,
    /// Left-twist pose gradients per keyframe.
    pub poses: Vec<Twist<f64>>,
    /// Screen-space mean gradient norms (normalized device units), static then
    /// dynamic, summed over evaluated frames.
    pub screen: Vec<f64>,
}

impl MappingGrad {
    fn zeros(scene: &GaussianScene<f64>, graph: &ScaffoldGraph<f64>, frames: usize) -> Self {
        Self {
            static_set: vec![GaussianGrad::default(); scene.static_set.len()],
            dynamic_set: vec![GaussianGrad::default(); scene.dynamic_set.len()],
            scaffold: ScaffoldGrad::zeros_like(graph),
            exposures: vec![zero_exposure_grad(); frames],
            poses: vec![Twist::zeros(); frames],
            screen: vec![0.0; scene.len()],
        }
    }
}

fn zero_exposure_grad() -> ExposureGrad<f64> {
    ExposureGrad {
        gain_log: 0.0,
        bias: 0.0,
        motion: Twist::zeros(),
    }
}

fn add_twist(a: &mut Twist<f64>, b: &Twist<f64>, s: f64) {
    a.rotational += b.rotational.scale(s);
    a.translational += b.translational.scale(s);
}

/// Distributes the splat gradients of a frame onto scene, scaffold, exposure
/// and pose gradients, scaled by `s`.
#[allow(clippy::too_many_arguments)]
fn accumulate_frame(
    scene: &GaussianScene<f64>,
    graph: &ScaffoldGraph<f64>,
    t: usize,
    weighting: OpacityWeighting,
    fg: &FrameGrad,
    camera: &PinholeCamera<f64>,
    s: f64,
    out: &mut MappingGrad,
) -> Result<()> {
    let ns = scene.static_set.len();
    for (i, g) in scene.static_set.iter().enumerate() {
        let sg = fg.splats[i].scaled(s);
        out.static_set[i].accumulate(&static_grad(g, &sg));
    }
    for (i, (g, b)) in scene.dynamic_set.iter().enumerate() {
        let sg = fg.splats[ns + i].scaled(s);
        let gg = deform_gaussian_backward(g, b, graph, t, weighting, &sg, &mut out.scaffold)?;
        out.dynamic_set[i].accumulate(&gg);
    }
    let (hx, hy) = (camera.width as f64 * 0.5, camera.height as f64 * 0.5);
    for (acc, m) in out.screen.iter_mut().zip(&fg.mean2d) {
        *acc += ((m[0] * hx).powi(2) + (m[1] * hy).powi(2)).sqrt() * s;
    }
    if let Some(e) = &fg.exposure {
        let eg = &mut out.exposures[t];
        eg.gain_log += e.gain_log * s;
        eg.bias += e.bias * s;
        add_twist(&mut eg.motion, &e.motion, s);
    }
    add_twist(&mut out.poses[t], &fg.pose, s);
    Ok(())
}

/// Mean reconstruction loss over `frames` plus scaffold regularizers, with
/// gradients for every trainable group.
#[allow(clippy::too_many_arguments)]
pub fn mapping_loss(
    scene: &GaussianScene<f64>,
    graph: &ScaffoldGraph<f64>,
    keyframes: &[Keyframe],
    poses: &[SE3Pose<f64>],
    exposures: &[ExposureParams<f64>],
    frames: &[usize],
    camera: &PinholeCamera<f64>,
    cfg: &LossConfig,
    opts: RenderOptions,
) -> Result<(f64, MappingGrad)> {
    if frames.is_empty() {
        return Err(Error::Invalid("mapping loss needs at least one keyframe".into()));
    }
    if poses.len() != keyframes.len() || exposures.len() != keyframes.len() {
        return Err(shape_err(
            format!("{} poses and exposures", keyframes.len()),
            format!("{} poses, {} exposures", poses.len(), exposures.len()),
        ));
    }
    let mut grad = MappingGrad::zeros(scene, graph, keyframes.len());
    let s = 1.0 / frames.len() as f64;
    let mut value = 0.0;
    for &t in frames {
        let kf = keyframes
            .get(t)
            .ok_or_else(|| Error::Invalid(format!("keyframe {t} out of range")))?;
        let splats = frame_splats(scene, graph, t, opts.weighting)?;
        let (out, backend) = render_splats(&splats, camera, &poses[t], &exposures[t], scene.background, opts.integrate)?;
        let fl = photometric_loss(&out, &kf.image, &kf.depth, cfg, None)?;
        value += fl.value * s;
        let fg = backward(&backend, &fl.grad_color, &fl.grad_depth)?;
        accumulate_frame(scene, graph, t, opts.weighting, &fg, camera, s, &mut grad)?;
    }
    let (reg, rg) = scaffold_regularizers(graph, cfg);
    grad.scaffold.accumulate(&rg);
    Ok((value + reg, grad))
}

/// Adam state for one set of Gaussians, one optimizer per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOptim {
    pub mean: Adam,
    pub rotation: Adam,
    pub log_scale: Adam,
    pub opacity: Adam,
    pub color: Adam,
}

impl GaussianOptim {
    fn new(lr: &LearningRates, extent: f64, n: usize) -> Self {
        Self {
            mean: Adam::new(lr.mean * extent, 3 * n),
            rotation: Adam::new(lr.rotation, 4 * n),
            log_scale: Adam::new(lr.log_scale, 3 * n),
            opacity: Adam::new(lr.opacity, n),
            color: Adam::new(lr.color, 3 * n),
        }
    }

    fn adams_mut(&mut self) -> [&mut Adam; 5] {
        [
            &mut self.mean,
            &mut self.rotation,
            &mut self.log_scale,
            &mut self.opacity,
            &mut self.color,
        ]
    }

    /// Zeroes the moments at a new size; step counts are kept.
    fn reset(&mut self, n: usize) {
        for (a, k) in self.adams_mut().into_iter().zip([3, 4, 3, 1, 3]) {
            a.m = vec![0.0; k * n];
            a.v = vec![0.0; k * n];
        }
    }

    fn step<'a>(&mut self, set: impl Iterator<Item = &'a mut GaussianPrimitive<f64>>, grads: &[GaussianGrad<f64>]) {
        let mut gs: Vec<&mut GaussianPrimitive<f64>> = set.collect();
        if gs.is_empty() {
            return;
        }
        let mut p = Vec::with_capacity(gs.len() * 4);
        let mut g = Vec::with_capacity(gs.len() * 4);
        macro_rules! group {
            ($adam:expr, $get:expr, $grad:expr, $set:expr) => {{
                p.clear();
                g.clear();
                for (x, d) in gs.iter().zip(grads) {
                    p.extend_from_slice(&$get(&**x));
                    g.extend_from_slice(&$grad(d));
                }
                $adam.update(&mut p, &g);
                let k = p.len() / gs.len();
                for (i, x) in gs.iter_mut().enumerate() {
                    $set(&mut **x, &p[i * k..(i + 1) * k]);
                }
            }};
        }
        group!(
            self.mean,
            |x: &GaussianPrimitive<f64>| x.mean.to_array().to_vec(),
            |d: &GaussianGrad<f64>| d.mean.to_array().to_vec(),
            |x: &mut GaussianPrimitive<f64>, v: &[f64]| x.mean = Vec3::new(v[0], v[1], v[2])
        );
        group!(
            self.rotation,
            |x: &GaussianPrimitive<f64>| x.rotation.to_array().to_vec(),
            |d: &GaussianGrad<f64>| d.rotation.to_array().to_vec(),
            |x: &mut GaussianPrimitive<f64>, v: &[f64]| x.rotation = Quat::new(v[0], v[1], v[2], v[3]).normalized()
        );
        group!(
            self.log_scale,
            |x: &GaussianPrimitive<f64>| x.log_scale.to_array().to_vec(),
            |d: &GaussianGrad<f64>| d.log_scale.to_array().to_vec(),
            |x: &mut GaussianPrimitive<f64>, v: &[f64]| x.log_scale = Vec3::new(v[0], v[1], v[2])
        );
        group!(
            self.opacity,
            |x: &GaussianPrimitive<f64>| vec![x.opacity_logit],
            |d: &GaussianGrad<f64>| vec![d.opacity_logit],
            |x: &mut GaussianPrimitive<f64>, v: &[f64]| x.opacity_logit = v[0]
        );
        group!(
            self.color,
            |x: &GaussianPrimitive<f64>| x.color.to_array().to_vec(),
            |d: &GaussianGrad<f64>| d.color.to_array().to_vec(),
            |x: &mut GaussianPrimitive<f64>, v: &[f64]| x.color =
                Vec3::new(v[0].clamp(0.0, 1.0), v[1].clamp(0.0, 1.0), v[2].clamp(0.0, 1.0))
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub static_set: GaussianOptim,
    pub dynamic_set: GaussianOptim,
    pub scaffold_rotation: Adam,
    pub scaffold_translation: Adam,
    pub aow: Adam,
    pub exposure: Adam,
    pub poses: Adam,
    pub uncertainty: Adam,
}

impl OptimState {
    pub fn new(lr: &LearningRates, extent: f64, keyframes: usize, mlp_params: usize) -> Self {
        Self {
            static_set: GaussianOptim::new(lr, extent, 0),
            dynamic_set: GaussianOptim::new(lr, extent, 0),
            scaffold_rotation: Adam::new(lr.scaffold, 0),
            scaffold_translation: Adam::new(lr.scaffold * extent, 0),
            aow: Adam::new(lr.aow, 0),
            exposure: Adam::new(lr.exposure, 8 * keyframes),
            poses: Adam::new(lr.pose, 6 * keyframes),
            uncertainty: Adam::new(lr.uncertainty, mlp_params),
        }
    }

    fn adams_mut(&mut self) -> Vec<&mut Adam> {
        let mut v: Vec<&mut Adam> = Vec::new();
        v.extend(self.static_set.adams_mut());
        v.extend(self.dynamic_set.adams_mut());
        v.push(&mut self.scaffold_rotation);
        v.push(&mut self.scaffold_translation);
        v.push(&mut self.aow);
        v.push(&mut self.exposure);
        v.push(&mut self.poses);
        v.push(&mut self.uncertainty);
        v
    }
}

/// Inputs that stay fixed for a mapping session.
pub struct MapInputs<'a> {
    pub keyframes: &'a [Keyframe],
    pub camera: &'a PinholeCamera<f64>,
    /// 2D tracks spanning the keyframes, used to build the scaffold.
    pub tracks: &'a [Track],
    pub segmenter: &'a dyn SegmentationProvider,
    pub features: &'a dyn FeatureProvider,
}

/// Everything a mapping session mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct MapState {
    pub scene: GaussianScene<f64>,
    pub graph: ScaffoldGraph<f64>,
    pub poses: Vec<SE3Pose<f64>>,
    pub exposures: Vec<ExposureParams<f64>>,
    pub mlp: Mlp,
    /// Latest β² map per keyframe.
    pub beta2: Vec<Option<Image<f64>>>,
    /// Latest |color| and |depth| residual per keyframe (4 channels).
    pub residuals: Vec<Option<Image<f64>>>,
    /// Reweighted uncertainty mask per keyframe, set when the dynamic phase starts.
    pub masks: Vec<BinaryMask>,
    pub optim: OptimState,
    pub stats: GradientStats,
    pub scene_extent: f64,
    pub iteration: usize,
    pub dynamic_initialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapReport {
    pub iterations: usize,
    pub last_loss: f64,
    pub static_count: usize,
    pub dynamic_count: usize,
}

fn frame_rng(seed: u64, iteration: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

fn median_depth(keyframes: &[Keyframe]) -> f64 {
    let mut v: Vec<f64> = keyframes
        .iter()
        .flat_map(|k| k.depth.data.iter().copied())
        .filter(|d| *d > 0.0 && d.is_finite())
        .collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Back-projects observed pixels at `stride` into Gaussians wherever the
/// current render of `splats` leaves the pixel mostly uncovered.
#[allow(clippy::too_many_arguments)]
fn seed_from_depth(
    splats: &[Splat<f64>],
    kf: &Keyframe,
    pose: &SE3Pose<f64>,
    camera: &PinholeCamera<f64>,
    stride: usize,
    opacity: f64,
    allow: impl Fn(usize, usize, Vec3<f64>) -> bool,
) -> Vec<GaussianPrimitive<f64>> {
    let cover = Renderer::new().forward(splats, camera, pose, Vec3::zeros()).alpha;
    let off = stride / 2;
    let mut out = Vec::new();
    for y in (off..camera.height).step_by(stride) {
        for x in (off..camera.width).step_by(stride) {
            let z = kf.depth.get(x, y, 0);
            if !(z > 0.0 && z.is_finite()) || cover.get(x, y, 0) >= 0.5 {
                continue;
            }
            let p = pose.transform_point(camera.back_project(x as f64, y as f64, z));
            if !allow(x, y, p) {
                continue;
            }
            let scale = 0.5 * stride as f64 * z / camera.fx;
            let c = Vec3::new(kf.image.get(x, y, 0), kf.image.get(x, y, 1), kf.image.get(x, y, 2));
            out.push(GaussianPrimitive::isotropic(p, scale, opacity, c));
        }
    }
    out
}

/// True when most other keyframes that see `p` observe a surface clearly
/// behind it, i.e. their rays pass through empty space at `p`.
fn violates_free_space(
    p: Vec3<f64>,
    source: usize,
    keyframes: &[Keyframe],
    poses: &[SE3Pose<f64>],
    camera: &PinholeCamera<f64>,
    tolerance: f64,
) -> bool {
    if tolerance <= 0.0 {
        return false;
    }
    let (mut seen, mut through) = (0usize, 0usize);
    for (t, (kf, pose)) in keyframes.iter().zip(poses).enumerate() {
        if t == source {
            continue;
        }
        let pc = pose.inverse().transform_point(p);
        if pc.z <= camera.near {
            continue;
        }
        let (u, v) = camera.project(pc);
        if !camera.in_bounds(u, v) {
            continue;
        }
        let (x, y) = (
            (u.round().max(0.0) as usize).min(camera.width - 1),
            (v.round().max(0.0) as usize).min(camera.height - 1),
        );
        let d = kf.depth.get(x, y, 0);
        if !(d > 0.0 && d.is_finite()) {
            continue;
        }
        seen += 1;
        if d > pc.z * (1.0 + tolerance) {
            through += 1;
        }
    }
    2 * through > seen
}

fn residual_image(rendered: &RenderOutput<f64>, kf: &Keyframe) -> Image<f64> {
    let (w, h) = (kf.image.width, kf.image.height);
    let mut r = Image::zeros(w, h, 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                r.set(x, y, c, (rendered.color.get(x, y, c) - kf.image.get(x, y, c)).abs());
            }
            let d = kf.depth.get(x, y, 0);
            if d > 0.0 {
                r.set(x, y, 3, (rendered.depth.get(x, y, 0) - d).abs());
            }
        }
    }
    r
}

impl MapState {
    /// Seeds the static set from the keyframe depths, one keyframe at a time,
    /// only where earlier seeds leave gaps.
    pub fn new(inputs: &MapInputs, cfg: &MapperConfig) -> Result<Self> {
        cfg.validate()?;
        let kfs = inputs.keyframes;
        if kfs.is_empty() {
            return Err(Error::Invalid("mapping needs at least one keyframe".into()));
        }
        let cam = inputs.camera;
        for k in kfs {
            if k.image.width != cam.width || k.image.height != cam.height || k.image.channels != 3 {
                return Err(shape_err(format!("{}x{}x3", cam.width, cam.height), k.image.shape_str()));
            }
            if k.depth.width != cam.width || k.depth.height != cam.height {
                return Err(shape_err(format!("{}x{}x1", cam.width, cam.height), k.depth.shape_str()));
            }
        }
        let poses: Vec<SE3Pose<f64>> = kfs.iter().map(|k| k.pose).collect();
        let mut scene = GaussianScene::new(Vec3::zeros());
        for (t, (kf, pose)) in kfs.iter().zip(&poses).enumerate() {
            let seeds = seed_from_depth(
                &scene.static_splats(),
                kf,
                pose,
                cam,
                cfg.static_seed_stride,
                cfg.initial_opacity,
                |_, _, p| !violates_free_space(p, t, kfs, &poses, cam, cfg.free_space_tolerance),
            );
            scene.static_set.extend(seeds);
        }
        let extent = median_depth(kfs);
        let exposure = ExposureParams {
            rot_step: cfg.exposure_rot_step,
            trans_step: cfg.exposure_trans_step,
            max_samples: cfg.exposure_max_samples,
            ..ExposureParams::default()
        };
        let mlp = Mlp::new(inputs.features.dim(), cfg.seed);
        let mut optim = OptimState::new(&cfg.lr, extent, kfs.len(), mlp.params.len());
        optim.static_set.reset(scene.static_set.len());
        let n = kfs.len();
        Ok(Self {
            stats: GradientStats::new(scene.len()),
            scene,
            graph: ScaffoldGraph::fully_connected(Vec::new()),
            poses,
            exposures: vec![exposure; n],
            mlp,
            beta2: vec![None; n],
            residuals: vec![None; n],
            masks: Vec::new(),
            optim,
            scene_extent: extent,
            iteration: 0,
            dynamic_initialized: false,
        })
    }

    pub fn render_options(&self, cfg: &MapperConfig) -> RenderOptions {
        RenderOptions {
            weighting: cfg.weighting(),
            integrate: cfg.components.ir,
        }
    }

    /// Renders keyframe `t`'s scene state from `pose`. With `exposure` the
    /// frame is integrated and exposure-adjusted, otherwise rendered sharp.
    pub fn render(
        &self,
        camera: &PinholeCamera<f64>,
        t: usize,
        pose: &SE3Pose<f64>,
        exposure: Option<&ExposureParams<f64>>,
        weighting: OpacityWeighting,
    ) -> Result<RenderOutput<f64>> {
        let splats = frame_splats(&self.scene, &self.graph, t, weighting)?;
        match exposure {
            Some(e) => IrRenderer::new().forward(&splats, camera, pose, e, self.scene.background),
            None => Ok(Renderer::new().forward(&splats, camera, pose, self.scene.background)),
        }
    }

    /// Renders keyframe `t` the way it is trained.
    pub fn render_keyframe(&self, camera: &PinholeCamera<f64>, t: usize, cfg: &MapperConfig) -> Result<RenderOutput<f64>> {
        let e = cfg.components.ir.then_some(&self.exposures[t]);
        self.render(camera, t, &self.poses[t], e, cfg.weighting())
    }

    fn beta2_for(&self, inputs: &MapInputs, t: usize) -> Result<(Vec<f64>, Image<f64>)> {
        let kf = &inputs.keyframes[t];
        let feats = inputs.features.features(&kf.image, self.residuals[t].as_ref());
        let b = Image::from_vec(kf.image.width, kf.image.height, 1, self.mlp.predict_batch(&feats))?;
        Ok((feats, b))
    }

    fn record_stats(&mut self, screen: &[f64]) {
        if self.stats.counts.len() != screen.len() {
            self.stats = GradientStats::new(screen.len());
        }
        for (i, g) in screen.iter().enumerate() {
            if *g > 0.0 {
                self.stats.record(i, *g);
            }
        }
    }

    fn step_exposure(&mut self, grads: &[ExposureGrad<f64>]) -> Result<()> {
        let mut p = Vec::with_capacity(8 * self.exposures.len());
        let mut g = Vec::with_capacity(p.capacity());
        for (e, eg) in self.exposures.iter().zip(grads) {
            p.push(e.gain_log);
            p.push(e.bias);
            p.extend_from_slice(&e.motion()?.to_array());
            g.push(eg.gain_log);
            g.push(eg.bias);
            g.extend_from_slice(&eg.motion.to_array());
        }
        self.optim.exposure.update(&mut p, &g);
        for (i, e) in self.exposures.iter_mut().enumerate() {
            let v = &p[8 * i..8 * i + 8];
            e.gain_log = v[0];
            e.bias = v[1];
            e.set_motion(&Twist::from_array([v[2], v[3], v[4], v[5], v[6], v[7]]));
        }
        Ok(())
    }

    fn step_poses(&mut self, grads: &[Twist<f64>]) {
        let mut p = vec![0.0; 6 * self.poses.len()];
        let mut g = Vec::with_capacity(p.len());
        for (t, tw) in grads.iter().enumerate() {
            // Keyframe 0 anchors the gauge.
            g.extend_from_slice(&if t == 0 { [0.0; 6] } else { tw.to_array() });
        }
        self.optim.poses.update(&mut p, &g);
        for (t, pose) in self.poses.iter_mut().enumerate().skip(1) {
            let d: [f64; 6] = std::array::from_fn(|k| p[6 * t + k]);
            *pose = se3_exp(&Twist::from_array(d)).compose(pose);
        }
    }

    fn step_scaffold(&mut self, grad: &ScaffoldGrad<f64>, train_aow: bool) {
        if self.graph.nodes.is_empty() {
            return;
        }
        let mut q = Vec::new();
        let mut gq = Vec::new();
        let mut tr = Vec::new();
        let mut gt = Vec::new();
        let mut w = Vec::new();
        let mut gw = Vec::new();
        for (k, node) in self.graph.nodes.iter().enumerate() {
            for (t, p) in node.trajectory.iter().enumerate() {
                q.extend_from_slice(&p.rotation.to_array());
                gq.extend_from_slice(&grad.rotation[k][t].to_array());
                tr.extend_from_slice(&p.translation.to_array());
                gt.extend_from_slice(&grad.translation[k][t].to_array());
            }
            w.extend_from_slice(&node.opacity_weights);
            gw.extend_from_slice(&grad.opacity_weights[k]);
        }
        self.optim.scaffold_rotation.update(&mut q, &gq);
        self.optim.scaffold_translation.update(&mut tr, &gt);
        if train_aow {
            self.optim.aow.update(&mut w, &gw);
        }
        let mut i = 0;
        let mut j = 0;
        for node in self.graph.nodes.iter_mut() {
            for p in node.trajectory.iter_mut() {
                p.rotation = Quat::new(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]).normalized();
                p.translation = Vec3::new(tr[3 * i], tr[3 * i + 1], tr[3 * i + 2]);
                i += 1;
            }
            for v in node.opacity_weights.iter_mut() {
                *v = w[j];
                j += 1;
            }
        }
    }

    fn densify(&mut self, cfg: &MapperConfig) {
        let dcfg = DensifyConfig {
            scene_extent: self.scene_extent,
            seed: cfg.densify.seed ^ cfg.seed ^ self.iteration as u64,
            ..cfg.densify
        };
        let (scene, _) = densify_and_prune(&self.scene, &self.stats, &dcfg);
        self.scene = scene;
        self.optim.static_set.reset(self.scene.static_set.len());
        self.optim.dynamic_set.reset(self.scene.dynamic_set.len());
        self.stats = GradientStats::new(self.scene.len());
    }

    fn phase_a_step(&mut self, inputs: &MapInputs, cfg: &MapperConfig, t: usize) -> Result<f64> {
        let kf = &inputs.keyframes[t];
        let cam = inputs.camera;
        let splats = self.scene.static_splats();
        let (out, backend) = render_splats(
            &splats,
            cam,
            &self.poses[t],
            &self.exposures[t],
            self.scene.background,
            cfg.components.ir,
        )?;
        let (feats, beta2) = self.beta2_for(inputs, t)?;
        let weights = beta2.map(|b| 1.0 / b);
        let fl = photometric_loss(&out, &kf.image, &kf.depth, &cfg.loss, Some(&weights))?;

        let uv = self.uncertainty_update(kf, cfg, &out, &feats, &beta2)?;

        let fg = backward(&backend, &fl.grad_color, &fl.grad_depth)?;
        let mut grad = MappingGrad::zeros(&self.scene, &self.graph, self.poses.len());
        accumulate_frame(&self.scene, &self.graph, t, OpacityWeighting::Disabled, &fg, cam, 1.0, &mut grad)?;
        self.optim.static_set.step(self.scene.static_set.iter_mut(), &grad.static_set);
        if cfg.components.ir {
            self.step_exposure(&grad.exposures)?;
        }
        if cfg.refine_poses {
            self.step_poses(&grad.poses);
        }
        self.record_stats(&grad.screen);
        self.residuals[t] = Some(residual_image(&out, kf));
        self.beta2[t] = Some(beta2);
        Ok(fl.value + uv)
    }

    /// One predictor step on the uncertainty loss of a detached render.
    fn uncertainty_update(
        &mut self,
        kf: &Keyframe,
        cfg: &MapperConfig,
        out: &RenderOutput<f64>,
        feats: &[f64],
        beta2: &Image<f64>,
    ) -> Result<f64> {
        let sp = ssim_prime(&out.color, &kf.image)?;
        let r = uncertainty_residual(&sp, &out.depth, &kf.depth, cfg.loss.lambda1_u)?;
        let ul = uncertainty_loss(&r.data, &beta2.data, cfg.loss.lambda_reg)?;
        let gm = self.mlp.backward_batch(feats, &ul.grad_beta2);
        self.optim.uncertainty.update(&mut self.mlp.params, &gm);
        Ok(ul.value)
    }

    /// Current predictor output for keyframe `t`.
    pub fn predict_beta2(&self, inputs: &MapInputs, t: usize) -> Result<Image<f64>> {
        Ok(self.beta2_for(inputs, t)?.1)
    }

    /// Builds the reweighted masks, the scaffold and the dynamic set, and
    /// removes static Gaussians lying on masked surfaces.
    pub fn initialize_dynamic(&mut self, inputs: &MapInputs, cfg: &MapperConfig) -> Result<()> {
        let kfs = inputs.keyframes;
        let cam = inputs.camera;
        let n = kfs.len();
        let mut masks = Vec::with_capacity(n);
        for t in 0..n {
            let (_, beta2) = self.beta2_for(inputs, t)?;
            let m_u = threshold_mask(&beta2, cfg.delta_u);
            let m_ru = if cfg.components.rum && !m_u.is_empty() && cfg.prompts > 0 {
                let prompts = sample_prompts(&m_u, cfg.prompts, cfg.seed ^ t as u64)?;
                let candidates = inputs.segmenter.segment(t, &kfs[t].image, &prompts);
                reweighted_mask(&m_u, &candidates, cfg.delta_ru)?
            } else {
                m_u
            };
            self.beta2[t] = Some(beta2);
            masks.push(m_ru);
        }
        self.masks = masks;
        self.dynamic_initialized = true;

        let bool_masks: Vec<Vec<bool>> = self.masks.iter().map(|m| m.data.clone()).collect();
        let depths: Vec<Image<f64>> = kfs.iter().map(|k| k.depth.clone()).collect();
        let mut graph = match init_nodes_from_tracks(inputs.tracks, &depths, &self.poses, &bool_masks, cam, &cfg.node_init) {
            Ok(g) => g,
            Err(Error::NoTracks) | Err(Error::EmptyScaffold) => return Ok(()),
            Err(e) => return Err(e),
        };
        for node in graph.nodes.iter_mut() {
            node.opacity_weights = vec![cfg.aow_init; n];
        }
        self.graph = graph;

        let tol = cfg.surface_tolerance;
        let masks = &self.masks;
        let poses = &self.poses;
        self.scene.static_set.retain(|g| {
            !(0..n).any(|t| {
                let pc = poses[t].inverse().transform_point(g.mean);
                if pc.z <= cam.near {
                    return false;
                }
                let (u, v) = cam.project(pc);
                if !cam.in_bounds(u, v) {
                    return false;
                }
                let (x, y) = (
                    (u.round().max(0.0) as usize).min(cam.width - 1),
                    (v.round().max(0.0) as usize).min(cam.height - 1),
                );
                let d = kfs[t].depth.get(x, y, 0);
                masks[t].get(x, y) && d > 0.0 && (pc.z - d).abs() <= tol * d
            })
        });

        for t in 0..n {
            let current: Vec<Splat<f64>> = if self.scene.dynamic_set.is_empty() {
                Vec::new()
            } else {
                let mut dyn_only = self.scene.clone();
                dyn_only.static_set.clear();
                deform_scene(&dyn_only, &self.graph, t, OpacityWeighting::Disabled)?
            };
            let mask = &self.masks[t];
            let seeds = seed_from_depth(
                &current,
                &kfs[t],
                &self.poses[t],
                cam,
                cfg.dynamic_seed_stride,
                cfg.initial_opacity,
                |x, y, _| mask.get(x, y),
            );
            for g in seeds {
                let b = bind_to_nearest_node(g.mean, &self.graph, t)?;
                self.scene.dynamic_set.push((g, b));
            }
        }
        let cells = self.graph.nodes.len() * n;
        self.optim.static_set.reset(self.scene.static_set.len());
        self.optim.dynamic_set.reset(self.scene.dynamic_set.len());
        self.optim.scaffold_rotation = Adam::new(cfg.lr.scaffold, 4 * cells);
        self.optim.scaffold_translation = Adam::new(cfg.lr.scaffold * self.scene_extent, 3 * cells);
        self.optim.aow = Adam::new(cfg.lr.aow, cells);
        self.stats = GradientStats::new(self.scene.len());
        Ok(())
    }

    fn phase_b_step(&mut self, inputs: &MapInputs, cfg: &MapperConfig, t: usize) -> Result<f64> {
        let opts = self.render_options(cfg);
        let (value, grad) = mapping_loss(
            &self.scene,
            &self.graph,
            inputs.keyframes,
            &self.poses,
            &self.exposures,
            &[t],
            inputs.camera,
            &cfg.loss,
            opts,
        )?;
        self.optim.static_set.step(self.scene.static_set.iter_mut(), &grad.static_set);
        self.optim
            .dynamic_set
            .step(self.scene.dynamic_set.iter_mut().map(|(g, _)| g), &grad.dynamic_set);
        self.step_scaffold(&grad.scaffold, cfg.components.aow);
        if cfg.components.ir {
            self.step_exposure(&grad.exposures)?;
        }
        if cfg.refine_poses {
            self.step_poses(&grad.poses);
        }
        self.record_stats(&grad.screen);
        if cfg.interleave_every > 0 && self.iteration % cfg.interleave_every == 0 {
            let kf = &inputs.keyframes[t];
            let out = self.render(inputs.camera, t, &self.poses[t], cfg.components.ir.then_some(&self.exposures[t]), opts.weighting)?;
            let (feats, beta2) = self.beta2_for(inputs, t)?;
            self.uncertainty_update(kf, cfg, &out, &feats, &beta2)?;
            self.residuals[t] = Some(residual_image(&out, kf));
            self.beta2[t] = Some(beta2);
        }
        Ok(value)
    }

    /// Runs up to `iterations` further steps of the schedule. One keyframe,
    /// drawn from a per-iteration seed, is optimized per step.
    pub fn run(&mut self, inputs: &MapInputs, cfg: &MapperConfig, iterations: usize) -> Result<MapReport> {
        let n = inputs.keyframes.len();
        if n != self.poses.len() {
            return Err(shape_err(format!("{} keyframes", self.poses.len()), n));
        }
        let mut last = f64::NAN;
        let mut done = 0;
        while done < iterations && self.iteration < cfg.total_iterations() {
            let t = frame_rng(cfg.seed, self.iteration, 1).random_range(0..n);
            last = if self.iteration < cfg.phase_a_iterations {
                self.phase_a_step(inputs, cfg, t)?
            } else {
                if !self.dynamic_initialized {
                    self.initialize_dynamic(inputs, cfg)?;
                }
                self.phase_b_step(inputs, cfg, t)?
            };
            self.iteration += 1;
            done += 1;
            if cfg.densify_every > 0 && self.iteration % cfg.densify_every == 0 && self.iteration < cfg.total_iterations() {
                self.densify(cfg);
            }
        }
        Ok(MapReport {
            iterations: done,
            last_loss: last,
            static_count: self.scene.static_set.len(),
            dynamic_count: self.scene.dynamic_set.len(),
        })
    }
}

/// Runs the mapping schedule for `iterations` steps.
pub fn run_mapping(state: &mut MapState, inputs: &MapInputs, cfg: &MapperConfig, iterations: usize) -> Result<MapReport> {
    state.run(inputs, cfg, iterations)
}

const STATE_MAGIC: &[u8; 8] = b"S4DSTATE";

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for x in v {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn read_vec<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n > 1 << 32 {
        return Err(Error::Format("implausible vector length".into()));
    }
    (0..n).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
}

fn write_image<W: Write>(w: &mut W, img: Option<&Image<f64>>) -> Result<()> {
    match img {
        None => w.write_u8(0)?,
        Some(i) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(i.width as u32)?;
            w.write_u32::<LittleEndian>(i.height as u32)?;
            w.write_u32::<LittleEndian>(i.channels as u32)?;
            write_vec(w, &i.data)?;
        }
    }
    Ok(())
}

fn read_image<R: Read>(r: &mut R) -> Result<Option<Image<f64>>> {
    if r.read_u8()? == 0 {
        return Ok(None);
    }
    let w = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let c = r.read_u32::<LittleEndian>()? as usize;
    Ok(Some(Image::from_vec(w, h, c, read_vec(r)?)?))
}

fn write_pose<W: Write>(w: &mut W, p: &SE3Pose<f64>) -> Result<()> {
    let q = p.rotation;
    let t = p.translation;
    for v in [q.w, q.x, q.y, q.z, t.x, t.y, t.z] {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_pose<R: Read>(r: &mut R) -> Result<SE3Pose<f64>> {
    let mut v = [0.0; 7];
    for x in v.iter_mut() {
        *x = r.read_f64::<LittleEndian>()?;
    }
    Ok(SE3Pose::new(Quat::new(v[0], v[1], v[2], v[3]), Vec3::new(v[4], v[5], v[6])))
}

fn write_adam<W: Write>(w: &mut W, a: &Adam) -> Result<()> {
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u64::<LittleEndian>(a.step)?;
    write_vec(w, &a.m)?;
    write_vec(w, &a.v)
}

fn read_adam<R: Read>(r: &mut R, a: &mut Adam) -> Result<()> {
    a.lr = r.read_f64::<LittleEndian>()?;
    a.beta1 = r.read_f64::<LittleEndian>()?;
    a.beta2 = r.read_f64::<LittleEndian>()?;
    a.eps = r.read_f64::<LittleEndian>()?;
    a.step = r.read_u64::<LittleEndian>()?;
    a.m = read_vec(r)?;
    a.v = read_vec(r)?;
    Ok(())
}

/// Exposure table, one line per keyframe:
/// `gain_log bias start(7) end(7) rot_step trans_step max_samples`, poses as
/// `tx ty tz qw qx qy qz`.
pub fn write_exposures(exposures: &[ExposureParams<f64>]) -> String {
    let mut s = String::from("# gain_log bias start_t(3) start_q(4) end_t(3) end_q(4) rot_step trans_step max_samples\n");
    for e in exposures {
        let mut f = vec![e.gain_log, e.bias];
        for p in [&e.start, &e.end] {
            f.extend([p.translation.x, p.translation.y, p.translation.z]);
            f.extend(p.rotation.to_array());
        }
        f.extend([e.rot_step, e.trans_step]);
        let line: Vec<String> = f.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{} {}\n", line.join(" "), e.max_samples));
    }
    s
}

pub fn read_exposures(text: &str) -> Result<Vec<ExposureParams<f64>>> {
    let bad = |m: String| Error::Format(format!("exposure table: {m}"));
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 19 {
            return Err(bad(format!("expected 19 fields, got {}", parts.len())));
        }
        let f: Vec<f64> = parts[..18]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`"))))
            .collect::<Result<_>>()?;
        let pose = |o: usize| SE3Pose::new(Quat::new(f[o + 3], f[o + 4], f[o + 5], f[o + 6]), Vec3::new(f[o], f[o + 1], f[o + 2]));
        out.push(ExposureParams {
            gain_log: f[0],
            bias: f[1],
            start: pose(2),
            end: pose(9),
            rot_step: f[16],
            trans_step: f[17],
            max_samples: parts[18].parse().map_err(|_| bad(format!("bad sample cap `{}`", parts[18])))?,
        });
    }
    Ok(out)
}

impl MapState {
    /// Writes `scene.ply`, `scaffold.txt`, `exposure.txt` and `state.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_ply(&self.scene, BufWriter::new(fs::File::create(dir.join("scene.ply"))?))?;
        fs::write(dir.join("scaffold.txt"), write_scaffold(&self.graph))?;
        fs::write(dir.join("exposure.txt"), write_exposures(&self.exposures))?;
        let mut w = BufWriter::new(fs::File::create(dir.join("state.bin"))?);
        w.write_all(STATE_MAGIC)?;
        w.write_u64::<LittleEndian>(self.iteration as u64)?;
        w.write_u8(u8::from(self.dynamic_initialized))?;
        w.write_f64::<LittleEndian>(self.scene_extent)?;
        w.write_u64::<LittleEndian>(self.poses.len() as u64)?;
        for p in &self.poses {
            write_pose(&mut w, p)?;
        }
        w.write_u64::<LittleEndian>(self.mlp.input as u64)?;
        write_vec(&mut w, &self.mlp.params)?;
        for (b, r) in self.beta2.iter().zip(&self.residuals) {
            write_image(&mut w, b.as_ref())?;
            write_image(&mut w, r.as_ref())?;
        }
        w.write_u64::<LittleEndian>(self.masks.len() as u64)?;
        for m in &self.masks {
            w.write_u32::<LittleEndian>(m.width as u32)?;
            w.write_u32::<LittleEndian>(m.height as u32)?;
            let bytes: Vec<u8> = m.data.iter().map(|b| u8::from(*b)).collect();
            w.write_all(&bytes)?;
        }
        write_vec(&mut w, &self.stats.grad_accum)?;
        w.write_u64::<LittleEndian>(self.stats.counts.len() as u64)?;
        for c in &self.stats.counts {
            w.write_u32::<LittleEndian>(*c)?;
        }
        let mut optim = self.optim.clone();
        for a in optim.adams_mut() {
            write_adam(&mut w, a)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let scene = read_ply(BufReader::new(fs::File::open(dir.join("scene.ply"))?))?;
        let graph = read_scaffold(&fs::read_to_string(dir.join("scaffold.txt"))?)?;
        let exposures = read_exposures(&fs::read_to_string(dir.join("exposure.txt"))?)?;
        let mut r = BufReader::new(fs::File::open(dir.join("state.bin"))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format("state.bin: bad magic".into()));
        }
        let iteration = r.read_u64::<LittleEndian>()? as usize;
        let dynamic_initialized = r.read_u8()? != 0;
        let scene_extent = r.read_f64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        if n != exposures.len() {
            return Err(Error::Format("state.bin: keyframe count disagrees with exposure table".into()));
        }
        let poses = (0..n).map(|_| read_pose(&mut r)).collect::<Result<Vec<_>>>()?;
        let input = r.read_u64::<LittleEndian>()? as usize;
        let params = read_vec(&mut r)?;
        if params.len() != Mlp::param_count(input) {
            return Err(Error::Format("state.bin: predictor size mismatch".into()));
        }
        let mut beta2 = Vec::with_capacity(n);
        let mut residuals = Vec::with_capacity(n);
        for _ in 0..n {
            beta2.push(read_image(&mut r)?);
            residuals.push(read_image(&mut r)?);
        }
        let nm = r.read_u64::<LittleEndian>()? as usize;
        let mut masks = Vec::with_capacity(nm);
        for _ in 0..nm {
            let w = r.read_u32::<LittleEndian>()? as usize;
            let h = r.read_u32::<LittleEndian>()? as usize;
            let mut bytes = vec![0u8; w * h];
            r.read_exact(&mut bytes)?;
            masks.push(BinaryMask {
                width: w,
                height: h,
                data: bytes.into_iter().map(|b| b != 0).collect(),
            });
        }
        let grad_accum = read_vec(&mut r)?;
        let nc = r.read_u64::<LittleEndian>()? as usize;
        let counts = (0..nc)
            .map(|_| Ok(r.read_u32::<LittleEndian>()?))
            .collect::<Result<Vec<u32>>>()?;
        let mut optim = OptimState::new(&LearningRates::default(), 1.0, 0, 0);
        for a in optim.adams_mut() {
            read_adam(&mut r, a)?;
        }
        Ok(Self {
            scene,
            graph,
            poses,
            exposures,
            mlp: Mlp { input, params },
            beta2,
            residuals,
            masks,
            optim,
            stats: GradientStats { grad_accum, counts },
            scene_extent,
            iteration,
            dynamic_initialized,
        })
    }
}
