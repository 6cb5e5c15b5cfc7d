//! Gaussian primitives, the static/dynamic scene container, densification and
//! PLY persistence.

use std::io::{BufRead, BufReader, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Quat, Vec3};
use crate::real::Real;
use crate::scaffold::ScaffoldGraph;

/// A canonical-space Gaussian. Scale is stored as logarithms and opacity as a
/// logit so that every unconstrained parameter value is valid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive<T> {
    pub mean: Vec3<T>,
    /// Normalized on use; need not be exactly unit length between optimizer steps.
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
    pub opacity_logit: T,
    pub color: Vec3<T>,
}

impl<T: Real> GaussianPrimitive<T> {
    pub fn isotropic(mean: Vec3<T>, scale: T, opacity: T, color: Vec3<T>) -> Self {
        let ls = scale.ln();
        Self {
            mean,
            rotation: Quat::identity(),
            log_scale: Vec3::new(ls, ls, ls),
            opacity_logit: opacity.logit(),
            color,
        }
    }

    pub fn opacity(&self) -> T {
        self.opacity_logit.sigmoid()
    }

    pub fn scale(&self) -> Vec3<T> {
        self.log_scale.map(|v| v.exp())
    }

    /// Renderable form with the stored opacity.
    pub fn to_splat(&self) -> Splat<T> {
        Splat {
            mean: self.mean,
            rotation: self.rotation,
            log_scale: self.log_scale,
            opacity: self.opacity(),
            color: self.color,
        }
    }
}

/// A Gaussian as consumed by the rasterizer: world-space pose and an effective
/// opacity probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat<T> {
    pub mean: Vec3<T>,
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
    pub opacity: T,
    pub color: Vec3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianBinding {
    pub node_index: usize,
    /// Keyframe index at which the Gaussian was created.
    pub reference_time: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene<T> {
    pub static_set: Vec<GaussianPrimitive<T>>,
    pub dynamic_set: Vec<(GaussianPrimitive<T>, GaussianBinding)>,
    pub background: Vec3<T>,
}

impl<T: Real> Default for GaussianScene<T> {
    fn default() -> Self {
        Self::new(Vec3::zeros())
    }
}

impl<T: Real> GaussianScene<T> {
    pub fn new(background: Vec3<T>) -> Self {
        Self {
            static_set: Vec::new(),
            dynamic_set: Vec::new(),
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.static_set.len() + self.dynamic_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Static Gaussians as splats (no deformation).
    pub fn static_splats(&self) -> Vec<Splat<T>> {
        self.static_set.iter().map(GaussianPrimitive::to_splat).collect()
    }
}

/// Nearest scaffold node to `mean` at keyframe `t_hat`; ties resolve to the lowest index.
pub fn bind_to_nearest_node<T: Real>(
    mean: Vec3<T>,
    graph: &ScaffoldGraph<T>,
    t_hat: usize,
) -> Result<GaussianBinding> {
    if graph.nodes.is_empty() {
        return Err(Error::EmptyScaffold);
    }
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, node) in graph.nodes.iter().enumerate() {
        let pose = node.trajectory.get(t_hat).ok_or_else(|| {
            Error::Invalid(format!("time {t_hat} outside node trajectory of length {}", node.trajectory.len()))
        })?;
        let d = (pose.translation - mean).norm_squared();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(GaussianBinding {
        node_index: best,
        reference_time: t_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    /// Mean screen-space (NDC) positional-gradient norm above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Gaussians with sigmoid(opacity) below this are removed.
    pub prune_opacity: f64,
    /// Gaussians whose largest scale exceeds `percent_dense * scene_extent` are split, others cloned.
    pub percent_dense: f64,
    pub scene_extent: f64,
    /// Divisor applied to the scale of split children.
    pub split_scale_divisor: f64,
    pub seed: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            scene_extent: 1.0,
            split_scale_divisor: 1.6,
            seed: 0,
        }
    }
}

/// Per-Gaussian positional-gradient accumulators, static set first then dynamic set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStats {
    pub grad_accum: Vec<f64>,
    pub counts: Vec<u32>,
}

impl GradientStats {
    pub fn new(len: usize) -> Self {
        Self {
            grad_accum: vec![0.0; len],
            counts: vec![0; len],
        }
    }

    pub fn record(&mut self, index: usize, grad_norm: f64) {
        self.grad_accum[index] += grad_norm;
        self.counts[index] += 1;
    }

    pub fn mean(&self, index: usize) -> f64 {
        match self.counts.get(index) {
            Some(&c) if c > 0 => self.grad_accum[index] / f64::from(c),
            _ => 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|c| *c == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub static_count: usize,
    pub dynamic_count: usize,
}

enum Action {
    Keep,
    Clone,
    Split,
}

fn decide<T: Real>(g: &GaussianPrimitive<T>, grad: f64, cfg: &DensifyConfig) -> Action {
    if grad <= cfg.grad_threshold {
        return Action::Keep;
    }
    let max_scale = g.scale().to_array().iter().fold(0.0f64, |a, s| a.max(s.to_f64_lossy()));
    if max_scale > cfg.percent_dense * cfg.scene_extent {
        Action::Split
    } else {
        Action::Clone
    }
}

fn split_children<T: Real>(
    g: &GaussianPrimitive<T>,
    cfg: &DensifyConfig,
    rng: &mut ChaCha8Rng,
) -> [GaussianPrimitive<T>; 2] {
    let scale = g.scale();
    let rot = g.rotation.normalized();
    let shrink = T::c(cfg.split_scale_divisor).ln();
    let mut out = [*g, *g];
    for child in out.iter_mut() {
        let z: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let local = Vec3::new(
            scale.x * T::c(z[0]),
            scale.y * T::c(z[1]),
            scale.z * T::c(z[2]),
        );
        child.mean = g.mean + rot.rotate(local);
        child.log_scale = g.log_scale.map(|v| v - shrink);
    }
    out
}

/// Clones small and splits large Gaussians whose mean positional gradient
/// exceeds the threshold, then prunes nearly transparent ones.
pub fn densify_and_prune<T: Real>(
    scene: &GaussianScene<T>,
    stats: &GradientStats,
    cfg: &DensifyConfig,
) -> (GaussianScene<T>, DensifyReport) {
    let mut report = DensifyReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prune = |g: &GaussianPrimitive<T>| g.opacity().to_f64_lossy() < cfg.prune_opacity;
    let n_static = scene.static_set.len();

    let mut out = GaussianScene::new(scene.background);
    for (i, g) in scene.static_set.iter().enumerate() {
        if prune(g) {
            report.pruned += 1;
            continue;
        }
        match decide(g, stats.mean(i), cfg) {
            Action::Keep => out.static_set.push(*g),
            Action::Clone => {
                report.cloned += 1;
                out.static_set.push(*g);
                out.static_set.push(*g);
            }
            Action::Split => {
                report.split += 1;
                out.static_set.extend(split_children(g, cfg, &mut rng));
            }
        }
    }
    for (i, (g, b)) in scene.dynamic_set.iter().enumerate() {
        if prune(g) {
            report.pruned += 1;
            continue;
        }
        match decide(g, stats.mean(n_static + i), cfg) {
            Action::Keep => out.dynamic_set.push((*g, *b)),
            Action::Clone => {
                report.cloned += 1;
                out.dynamic_set.push((*g, *b));
                out.dynamic_set.push((*g, *b));
            }
            Action::Split => {
                report.split += 1;
                for c in split_children(g, cfg, &mut rng) {
                    out.dynamic_set.push((c, *b));
                }
            }
        }
    }
    report.static_count = out.static_set.len();
    report.dynamic_count = out.dynamic_set.len();
    (out, report)
}

const PLY_PROPS: [&str; 14] = [
    "x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "log_scale_0", "log_scale_1",
    "log_scale_2", "opacity_logit", "r", "g", "b",
];

/// Writes the scene as binary little-endian PLY. Static Gaussians carry
/// `node_index = ref_time = -1`.
pub fn write_ply<W: Write>(scene: &GaussianScene<f64>, mut w: W) -> Result<()> {
    let bg = scene.background;
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "comment background {} {} {}", bg.x, bg.y, bg.z)?;
    writeln!(w, "element vertex {}", scene.len())?;
    for p in PLY_PROPS {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "property int node_index")?;
    writeln!(w, "property int ref_time")?;
    writeln!(w, "end_header")?;
    let rows = scene
        .static_set
        .iter()
        .map(|g| (g, -1i32, -1i32))
        .chain(
            scene
                .dynamic_set
                .iter()
                .map(|(g, b)| (g, b.node_index as i32, b.reference_time as i32)),
        );
    for (g, node, t) in rows {
        let vals = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.rotation.w,
            g.rotation.x,
            g.rotation.y,
            g.rotation.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_i32::<LittleEndian>(node)?;
        w.write_i32::<LittleEndian>(t)?;
    }
    Ok(())
}

pub fn read_ply<R: Read>(r: R) -> Result<GaussianScene<f64>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut count = None;
    let mut background = Vec3::zeros();
    let mut props = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("PLY header not terminated".into()));
        }
        let l = line.trim_end();
        if first {
            if l != "ply" {
                return Err(Error::Format("missing PLY magic".into()));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => {
                return Err(Error::Format(format!("unsupported PLY format {other}")))
            }
            ["comment", "background", r, g, b] => {
                let p = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(e.to_string()));
                background = Vec3::new(p(r)?, p(g)?, p(b)?);
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| Error::Format(e.to_string()))?)
            }
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => return Err(Error::Format(format!("unexpected PLY header line `{l}`"))),
        }
    }
    let expected: Vec<(String, String)> = PLY_PROPS
        .iter()
        .map(|p| ("double".to_string(), p.to_string()))
        .chain([
            ("int".to_string(), "node_index".to_string()),
            ("int".to_string(), "ref_time".to_string()),
        ])
        .collect();
    if props != expected {
        return Err(Error::Format("unexpected PLY property layout".into()));
    }
    let count = count.ok_or_else(|| Error::Format("missing vertex count".into()))?;
    let mut scene = GaussianScene::new(background);
    for _ in 0..count {
        let mut v = [0.0f64; 14];
        for x in v.iter_mut() {
            *x = r.read_f64::<LittleEndian>()?;
        }
        let node = r.read_i32::<LittleEndian>()?;
        let t = r.read_i32::<LittleEndian>()?;
        let g = GaussianPrimitive {
            mean: Vec3::new(v[0], v[1], v[2]),
            rotation: Quat::new(v[3], v[4], v[5], v[6]),
            log_scale: Vec3::new(v[7], v[8], v[9]),
            opacity_logit: v[10],
            color: Vec3::new(v[11], v[12], v[13]),
        };
        if node < 0 {
            scene.static_set.push(g);
        } else {
            if t < 0 {
                return Err(Error::Format("dynamic Gaussian with negative ref_time".into()));
            }
            scene.dynamic_set.push((
                g,
                GaussianBinding {
                    node_index: node as usize,
                    reference_time: t as usize,
                },
            ));
        }
    }
    Ok(scene)
}
