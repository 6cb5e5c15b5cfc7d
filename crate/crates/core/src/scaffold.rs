//! Motion scaffold: node trajectories, edge weights, dual-quaternion deformation
//! of dynamic Gaussians and adaptive opacity weighting.

use std::fmt::Write as _;

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianBinding, GaussianPrimitive, GaussianScene, Splat};
use crate::image::Image;
use crate::linalg::{normalize_backward, quat_mul_backward, Quat, Vec3};
use crate::raster::SplatGrad;
use crate::real::Real;
use crate::se3::{DualQuat, SE3Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldNode<T> {
    /// One pose per keyframe.
    pub trajectory: Vec<SE3Pose<T>>,
    pub radius: T,
    /// Unconstrained per-keyframe opacity weights.
    pub opacity_weights: Vec<T>,
}

impl<T: Real> ScaffoldNode<T> {
    pub fn new(trajectory: Vec<SE3Pose<T>>, radius: T) -> Self {
        let n = trajectory.len();
        Self {
            trajectory,
            radius,
            opacity_weights: vec![T::zero(); n],
        }
    }

    pub fn translation(&self, t: usize) -> Vec3<T> {
        self.trajectory[t].translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldGraph<T> {
    pub nodes: Vec<ScaffoldNode<T>>,
    /// `edges[k]` lists the neighbors of node `k`, itself first.
    pub edges: Vec<Vec<usize>>,
    pub neighbor_count: usize,
}

/// Whether dynamic opacity is modulated by the learned per-node weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OpacityWeighting {
    #[default]
    Adaptive,
    /// Dynamic Gaussians render with their base opacity.
    Disabled,
}

/// Mean over keyframes of the Euclidean distance between two node trajectories.
pub fn trajectory_distance<T: Real>(a: &ScaffoldNode<T>, b: &ScaffoldNode<T>) -> T {
    let n = a.trajectory.len().min(b.trajectory.len());
    if n == 0 {
        return T::zero();
    }
    let sum: T = (0..n)
        .map(|t| (a.translation(t) - b.translation(t)).norm())
        .sum();
    sum / T::from_usize_lossy(n)
}

impl<T: Real> ScaffoldGraph<T> {
    /// Every node is adjacent to every node.
    pub fn fully_connected(nodes: Vec<ScaffoldNode<T>>) -> Self {
        let n = nodes.len();
        let edges = (0..n)
            .map(|k| std::iter::once(k).chain((0..n).filter(|&i| i != k)).collect())
            .collect();
        Self {
            nodes,
            edges,
            neighbor_count: n.saturating_sub(1),
        }
    }

    /// Connects each node to itself and its `k` nearest nodes by trajectory distance.
    pub fn with_knn(nodes: Vec<ScaffoldNode<T>>, k: usize) -> Self {
        let n = nodes.len();
        let mut edges = Vec::with_capacity(n);
        for a in 0..n {
            let mut others: Vec<(T, usize)> = (0..n)
                .filter(|&b| b != a)
                .map(|b| (trajectory_distance(&nodes[a], &nodes[b]), b))
                .collect();
            others.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let mut e = vec![a];
            e.extend(others.iter().take(k).map(|(_, b)| *b));
            edges.push(e);
        }
        Self {
            nodes,
            edges,
            neighbor_count: k,
        }
    }

    pub fn keyframe_count(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.trajectory.len())
    }

    pub fn validate(&self) -> Result<()> {
        let kf = self.keyframe_count();
        if self.edges.len() != self.nodes.len() {
            return Err(Error::Invalid("edge list count differs from node count".into()));
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if node.trajectory.len() != kf || node.opacity_weights.len() != kf {
                return Err(Error::Invalid(format!("node {k} has inconsistent temporal length")));
            }
            if !(node.radius > T::zero()) {
                return Err(Error::Invalid(format!("node {k} has non-positive radius")));
            }
            if self.edges[k].is_empty() || self.edges[k].iter().any(|&i| i >= self.nodes.len()) {
                return Err(Error::Invalid(format!("node {k} has invalid adjacency")));
            }
        }
        Ok(())
    }
}

/// Gaussian radial basis edge weight `exp(-‖μ - t‖² / 2r²)`.
#[inline]
pub fn edge_weight<T: Real>(mu: Vec3<T>, node_translation: Vec3<T>, radius: T) -> T {
    (-(mu - node_translation).norm_squared() / (T::two() * radius * radius)).exp()
}

fn check_binding<T: Real>(binding: &GaussianBinding, graph: &ScaffoldGraph<T>, t: usize) -> Result<()> {
    let kf = graph.keyframe_count();
    if binding.node_index >= graph.nodes.len() {
        return Err(Error::Invalid(format!("binding to missing node {}", binding.node_index)));
    }
    if t >= kf || binding.reference_time >= kf {
        return Err(Error::Invalid(format!(
            "time {t} / reference {} outside 0..{kf}",
            binding.reference_time
        )));
    }
    Ok(())
}

fn unit_dual_quat<T: Real>(pose: &SE3Pose<T>) -> DualQuat<T> {
    SE3Pose::new(pose.rotation.normalized(), pose.translation).to_dual_quat()
}

/// Intermediate values of one Gaussian's blend, shared by forward and backward.
struct BlendTape<T> {
    neighbors: Vec<usize>,
    /// Exponents `-d²/2r²` at the reference geometry.
    exponents: Vec<T>,
    normalized: Vec<T>,
    signs: Vec<T>,
    deltas: Vec<DualQuat<T>>,
    sum: DualQuat<T>,
}

fn blend_tape<T: Real>(
    mu: Vec3<T>,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph<T>,
    t: usize,
) -> Result<BlendTape<T>> {
    let neighbors = graph.edges[binding.node_index].clone();
    if neighbors.is_empty() {
        return Err(Error::EmptyBlend);
    }
    let t_ref = binding.reference_time;
    let mut exponents = Vec::with_capacity(neighbors.len());
    let mut deltas = Vec::with_capacity(neighbors.len());
    for &i in &neighbors {
        let node = &graph.nodes[i];
        let d2 = (mu - node.translation(t_ref)).norm_squared();
        exponents.push(-d2 / (T::two() * node.radius * node.radius));
        let now = unit_dual_quat(&node.trajectory[t]);
        let reference = unit_dual_quat(&node.trajectory[t_ref]);
        deltas.push(now.mul(&reference.conj()));
    }
    // The blend normalizes its weights, so shifting every exponent by the same
    // constant leaves it unchanged and keeps distant Gaussians from underflowing.
    let shift = exponents.iter().copied().fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = exponents.iter().map(|e| (*e - shift).exp()).collect();
    let total: T = raw.iter().copied().sum();
    let normalized: Vec<T> = raw.iter().map(|w| *w / total).collect();
    let pivot = deltas[0].real;
    let mut sum = DualQuat::new(Quat::zeros(), Quat::zeros());
    let mut signs = Vec::with_capacity(deltas.len());
    for (w, dq) in normalized.iter().zip(&deltas) {
        let s = if dq.real.dot(pivot) < T::zero() { -T::one() } else { T::one() };
        signs.push(s);
        sum.real += dq.real.scale(*w * s);
        sum.dual += dq.dual.scale(*w * s);
    }
    Ok(BlendTape {
        neighbors,
        exponents,
        normalized,
        signs,
        deltas,
        sum,
    })
}

/// Blended rigid transform carrying Gaussian `g` from its reference keyframe to keyframe `t`.
pub fn deform_transform<T: Real>(
    g: &GaussianPrimitive<T>,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph<T>,
    t: usize,
) -> Result<SE3Pose<T>> {
    check_binding(binding, graph, t)?;
    Ok(blend_tape(g.mean, binding, graph, t)?.sum.to_pose())
}

fn aggregated_weight<T: Real>(
    mu: Vec3<T>,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph<T>,
    t: usize,
) -> T {
    let t_ref = binding.reference_time;
    graph.edges[binding.node_index]
        .iter()
        .map(|&i| {
            let n = &graph.nodes[i];
            edge_weight(mu, n.translation(t_ref), n.radius) * n.opacity_weights[t]
        })
        .sum()
}

/// Time-dependent opacity `σ(Σᵢ W(μ, tⁱ, rⁱ) ŵⁱ(t)) · o` with unnormalized edge weights.
pub fn aow_opacity<T: Real>(
    g: &GaussianPrimitive<T>,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph<T>,
    t: usize,
) -> Result<T> {
    check_binding(binding, graph, t)?;
    Ok(aggregated_weight(g.mean, binding, graph, t).sigmoid() * g.opacity())
}

/// Deformed, opacity-weighted splat of one dynamic Gaussian at keyframe `t`.
pub fn deform_gaussian<T: Real>(
    g: &GaussianPrimitive<T>,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph<T>,
    t: usize,
    weighting: OpacityWeighting,
) -> Result<Splat<T>> {
    let xf = deform_transform(g, binding, graph, t)?;
    let opacity = match weighting {
        OpacityWeighting::Adaptive => aow_opacity(g, binding, graph, t)?,
        OpacityWeighting::Disabled => g.opacity(),
    };
    Ok(Splat {
        mean: xf.transform_point(g.mean),
        rotation: xf.rotation * g.rotation,
        log_scale: g.log_scale,
        opacity,
        color: g.color,
    })
}

/// Static splats followed by every dynamic Gaussian deformed to keyframe `t`.
pub fn deform_scene<T: Real>(
    scene: &GaussianScene<T>,
    graph: &ScaffoldGraph<T>,
    t: usize,
    weighting: OpacityWeighting,
) -> Result<Vec<Splat<T>>> {
    let mut out = scene.static_splats();
    out.reserve(scene.dynamic_set.len());
    for (g, b) in &scene.dynamic_set {
        out.push(deform_gaussian(g, b, graph, t, weighting)?);
    }
    Ok(out)
}

/// Gradient of a loss with respect to one canonical Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad<T> {
    pub mean: Vec3<T>,
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
    pub opacity_logit: T,
    pub color: Vec3<T>,
}

impl<T: Real> Default for GaussianGrad<T> {
    fn default() -> Self {
        Self {
            mean: Vec3::zeros(),
            rotation: Quat::zeros(),
            log_scale: Vec3::zeros(),
            opacity_logit: T::zero(),
            color: Vec3::zeros(),
        }
    }
}

impl<T: Real> GaussianGrad<T> {
    pub fn accumulate(&mut self, o: &Self) {
        self.mean += o.mean;
        self.rotation += o.rotation;
        self.log_scale += o.log_scale;
        self.opacity_logit += o.opacity_logit;
        self.color += o.color;
    }
}

/// Gradient with respect to scaffold parameters, indexed `[node][keyframe]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldGrad<T> {
    pub rotation: Vec<Vec<Quat<T>>>,
    pub translation: Vec<Vec<Vec3<T>>>,
    pub opacity_weights: Vec<Vec<T>>,
}

impl<T: Real> ScaffoldGrad<T> {
    pub fn zeros_like(graph: &ScaffoldGraph<T>) -> Self {
        let kf = graph.keyframe_count();
        let n = graph.nodes.len();
        Self {
            rotation: vec![vec![Quat::zeros(); kf]; n],
            translation: vec![vec![Vec3::zeros(); kf]; n],
            opacity_weights: vec![vec![T::zero(); kf]; n],
        }
    }

    pub fn accumulate(&mut self, o: &Self) {
        for (a, b) in self.rotation.iter_mut().zip(&o.rotation) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.translation.iter_mut().zip(&o.translation) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.opacity_weights.iter_mut().zip(&o.opacity_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

/// Adjoint of `(q, t) ↦ DualQuat(q/|q|, t)`.
fn pose_dq_backward<T: Real>(
    pose: &SE3Pose<T>,
    g: &DualQuat<T>,
) -> (Quat<T>, Vec3<T>) {
    let unit = pose.rotation.normalized();
    // dual = ½ (0, t) ⊗ q̂
    let (g_pure, g_unit_from_dual) =
        quat_mul_backward(Quat::pure(pose.translation), unit, g.dual.scale(T::half()));
    let g_unit = g.real + g_unit_from_dual;
    (normalize_backward(pose.rotation, g_unit), g_pure.vec())
}

/// Backpropagates the gradient of a deformed splat to the canonical Gaussian and
/// the scaffold. Scale and color adjoints pass straight through.
pub fn deform_gaussian_backward<T: Real>(
    g: &GaussianPrimitive<T>,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph<T>,
    t: usize,
    weighting: OpacityWeighting,
    grad: &SplatGrad<T>,
    scaffold_grad: &mut ScaffoldGrad<T>,
) -> Result<GaussianGrad<T>> {
    check_binding(binding, graph, t)?;
    let tape = blend_tape(g.mean, binding, graph, t)?;
    let t_ref = binding.reference_time;
    let s_r = tape.sum.real;
    let s_d = tape.sum.dual;
    let n2 = s_r.norm_squared();
    let xf = tape.sum.to_pose();
    let r_unit = xf.rotation;
    let rmat = r_unit.to_matrix();

    let mut out = GaussianGrad {
        log_scale: grad.log_scale,
        color: grad.color,
        ..Default::default()
    };

    // mean' = R(ŝ) μ + trans, rotation' = ŝ ⊗ q
    out.mean = rmat.transpose().mul_vec(grad.mean);
    let g_rmat = crate::linalg::Mat3::outer(grad.mean, g.mean);
    let mut g_sr = crate::linalg::quat_to_matrix_backward(s_r, &g_rmat);
    let (g_r_unit, g_q) = quat_mul_backward(r_unit, g.rotation, grad.rotation);
    out.rotation = g_q;
    g_sr += normalize_backward(s_r, g_r_unit);

    // trans = 2 vec(S_d ⊗ S_r*) / |S_r|²
    let g_t = grad.mean;
    let g_p = Quat::pure(g_t.scale(T::two() / n2));
    let (g_sd, g_sr_conj) = quat_mul_backward(s_d, s_r.conj(), g_p);
    g_sr += g_sr_conj.conj();
    g_sr += s_r.scale(-T::two() * g_t.dot(xf.translation) / n2);

    let k = tape.neighbors.len();
    let mut g_norm_w = vec![T::zero(); k];
    for j in 0..k {
        let ws = tape.normalized[j] * tape.signs[j];
        let dq = &tape.deltas[j];
        g_norm_w[j] = tape.signs[j] * (g_sr.dot(dq.real) + g_sd.dot(dq.dual));
        let g_delta = DualQuat::new(g_sr.scale(ws), g_sd.scale(ws));
        let i = tape.neighbors[j];
        let node = &graph.nodes[i];
        let now_pose = &node.trajectory[t];
        let ref_pose = &node.trajectory[t_ref];
        let a = unit_dual_quat(now_pose);
        let b = unit_dual_quat(ref_pose);
        let bc = b.conj();
        // delta = a · b*: real = a_r ⊗ bc_r, dual = a_r ⊗ bc_d + a_d ⊗ bc_r
        let (g_ar1, g_bcr1) = quat_mul_backward(a.real, bc.real, g_delta.real);
        let (g_ar2, g_bcd) = quat_mul_backward(a.real, bc.dual, g_delta.dual);
        let (g_ad, g_bcr2) = quat_mul_backward(a.dual, bc.real, g_delta.dual);
        let g_a = DualQuat::new(g_ar1 + g_ar2, g_ad);
        let g_b = DualQuat::new((g_bcr1 + g_bcr2).conj(), g_bcd.conj());
        let (gq_now, gt_now) = pose_dq_backward(now_pose, &g_a);
        let (gq_ref, gt_ref) = pose_dq_backward(ref_pose, &g_b);
        scaffold_grad.rotation[i][t] += gq_now;
        scaffold_grad.translation[i][t] += gt_now;
        scaffold_grad.rotation[i][t_ref] += gq_ref;
        scaffold_grad.translation[i][t_ref] += gt_ref;
    }

    // normalized weights: w̄ = softmax(exponents)
    let avg: T = g_norm_w
        .iter()
        .zip(&tape.normalized)
        .map(|(g, w)| *g * *w)
        .sum();
    let mut g_exp: Vec<T> = g_norm_w
        .iter()
        .zip(&tape.normalized)
        .map(|(g, w)| *w * (*g - avg))
        .collect();

    let base = g.opacity();
    match weighting {
        OpacityWeighting::Adaptive => {
            let a = aggregated_weight(g.mean, binding, graph, t);
            let sa = a.sigmoid();
            let g_a = grad.opacity * base * sa * (T::one() - sa);
            out.opacity_logit = grad.opacity * sa * base * (T::one() - base);
            for (j, &i) in tape.neighbors.iter().enumerate() {
                let w = tape.exponents[j].exp();
                let what = graph.nodes[i].opacity_weights[t];
                scaffold_grad.opacity_weights[i][t] += g_a * w;
                g_exp[j] += g_a * what * w;
            }
        }
        OpacityWeighting::Disabled => {
            out.opacity_logit = grad.opacity * base * (T::one() - base);
        }
    }

    // exponent = -|μ - t_ref|² / 2r²
    for (j, &i) in tape.neighbors.iter().enumerate() {
        let node = &graph.nodes[i];
        let diff = g.mean - node.translation(t_ref);
        let coeff = g_exp[j] / (node.radius * node.radius);
        out.mean -= diff.scale(coeff);
        scaffold_grad.translation[i][t_ref] += diff.scale(coeff);
    }
    Ok(out)
}

/// 2D point tracks, one optional pixel per keyframe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Track {
    pub pixels: Vec<Option<[f64; 2]>>,
}

pub type TrackSet = Vec<Track>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeInitConfig {
    pub neighbor_count: usize,
    pub max_nodes: usize,
    /// Radius used when a node has no other node to measure against.
    pub default_radius: f64,
    pub min_radius: f64,
}

impl Default for NodeInitConfig {
    fn default() -> Self {
        Self {
            neighbor_count: 8,
            max_nodes: 256,
            default_radius: 0.05,
            min_radius: 1e-3,
        }
    }
}

fn sample_depth(depth: &Image<f64>, u: f64, v: f64) -> Option<f64> {
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x >= depth.width as f64 || y >= depth.height as f64 {
        return None;
    }
    let d = depth.get(x as usize, y as usize, 0);
    (d > 0.0 && d.is_finite()).then_some(d)
}

fn mask_hit(mask: &[bool], width: usize, height: usize, u: f64, v: f64) -> bool {
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return false;
    }
    mask[y as usize * width + x as usize]
}

/// Lifts 2D tracks inside the dynamic masks to 3D node trajectories and wires
/// them into a kNN scaffold.
///
/// `poses` are camera-to-world keyframe poses; `masks[t]` is row-major.
pub fn init_nodes_from_tracks(
    tracks: &[Track],
    depths: &[Image<f64>],
    poses: &[SE3Pose<f64>],
    masks: &[Vec<bool>],
    camera: &PinholeCamera<f64>,
    cfg: &NodeInitConfig,
) -> Result<ScaffoldGraph<f64>> {
    let kf = poses.len();
    if depths.len() != kf || masks.len() != kf {
        return Err(Error::Invalid("depths, poses and masks must have one entry per keyframe".into()));
    }
    let (w, h) = (camera.width, camera.height);
    let mut lifted: Vec<Vec<Vec3<f64>>> = Vec::new();
    for track in tracks {
        if track.pixels.len() != kf {
            return Err(Error::Invalid("track length differs from keyframe count".into()));
        }
        let inside = track
            .pixels
            .iter()
            .enumerate()
            .filter_map(|(t, p)| p.map(|p| (t, p)))
            .any(|(t, p)| mask_hit(&masks[t], w, h, p[0], p[1]));
        if !inside {
            continue;
        }
        let mut points: Vec<Option<Vec3<f64>>> = (0..kf)
            .map(|t| {
                let p = track.pixels[t]?;
                let d = sample_depth(&depths[t], p[0], p[1])?;
                Some(poses[t].transform_point(camera.back_project(p[0], p[1], d)))
            })
            .collect();
        if points.iter().all(Option::is_none) {
            continue;
        }
        fill_gaps(&mut points);
        lifted.push(points.into_iter().map(|p| p.expect("gaps filled")).collect());
    }
    if lifted.is_empty() {
        return Err(Error::NoTracks);
    }

    let chosen = farthest_trajectories(&lifted, cfg.max_nodes);
    let nodes: Vec<ScaffoldNode<f64>> = chosen
        .iter()
        .map(|&i| {
            ScaffoldNode::new(
                lifted[i].iter().map(|p| SE3Pose::from_translation(*p)).collect(),
                cfg.default_radius,
            )
        })
        .collect();
    let k = cfg.neighbor_count.min(nodes.len().saturating_sub(1));
    let mut graph = ScaffoldGraph::with_knn(nodes, k);
    if k > 0 {
        let radii: Vec<f64> = (0..graph.nodes.len())
            .map(|a| {
                let mut d: Vec<f64> = graph.edges[a][1..]
                    .iter()
                    .map(|&b| trajectory_distance(&graph.nodes[a], &graph.nodes[b]))
                    .collect();
                median(&mut d).max(cfg.min_radius)
            })
            .collect();
        for (node, r) in graph.nodes.iter_mut().zip(radii) {
            node.radius = r;
        }
    }
    Ok(graph)
}

fn fill_gaps(points: &mut [Option<Vec3<f64>>]) {
    let known: Vec<usize> = (0..points.len()).filter(|&t| points[t].is_some()).collect();
    for t in 0..points.len() {
        if points[t].is_some() {
            continue;
        }
        let prev = known.iter().rev().find(|&&k| k < t).copied();
        let next = known.iter().find(|&&k| k > t).copied();
        points[t] = match (prev, next) {
            (Some(a), Some(b)) => {
                let f = (t - a) as f64 / (b - a) as f64;
                let pa = points[a].unwrap();
                let pb = points[b].unwrap();
                Some(pa + (pb - pa).scale(f))
            }
            (Some(a), None) => points[a],
            (None, Some(b)) => points[b],
            (None, None) => None,
        };
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Farthest-point subsampling of trajectories, starting from index 0.
fn farthest_trajectories(traj: &[Vec<Vec3<f64>>], max: usize) -> Vec<usize> {
    if traj.len() <= max {
        return (0..traj.len()).collect();
    }
    let dist = |a: &[Vec3<f64>], b: &[Vec3<f64>]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x - *y).norm()).sum::<f64>() / a.len() as f64
    };
    let mut chosen = vec![0];
    let mut best: Vec<f64> = traj.iter().map(|t| dist(t, &traj[0])).collect();
    while chosen.len() < max {
        let next = (0..traj.len())
            .fold(0, |b, i| if best[i] > best[b] { i } else { b });
        chosen.push(next);
        for i in 0..traj.len() {
            best[i] = best[i].min(dist(&traj[i], &traj[next]));
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Structured-text sidecar holding the scaffold next to the scene PLY.
pub fn write_scaffold(graph: &ScaffoldGraph<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "scaffold nodes {} keyframes {} neighbor_count {}",
        graph.nodes.len(),
        graph.keyframe_count(),
        graph.neighbor_count
    );
    for (k, node) in graph.nodes.iter().enumerate() {
        let _ = writeln!(s, "node {k}");
        for p in &node.trajectory {
            let q = p.rotation;
            let t = p.translation;
            let _ = writeln!(s, "pose {} {} {} {} {} {} {}", t.x, t.y, t.z, q.w, q.x, q.y, q.z);
        }
        let ws: Vec<String> = node.opacity_weights.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "opacity_weights {}", ws.join(" "));
        let _ = writeln!(s, "radius {}", node.radius);
        let nb: Vec<String> = graph.edges[k].iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "neighbors {}", nb.join(" "));
    }
    s
}

pub fn read_scaffold(text: &str) -> Result<ScaffoldGraph<f64>> {
    let bad = |m: &str| Error::Format(format!("scaffold sidecar: {m}"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
    let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad index `{s}`")));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
    let (n, kf, k) = match header.as_slice() {
        ["scaffold", "nodes", n, "keyframes", kf, "neighbor_count", k] => (idx(n)?, idx(kf)?, idx(k)?),
        _ => return Err(bad("bad header")),
    };
    let mut nodes = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    for expected in 0..n {
        let l: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
        if l != ["node", expected.to_string().as_str()] {
            return Err(bad("expected node header"));
        }
        let mut traj = Vec::with_capacity(kf);
        for _ in 0..kf {
            let l: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
            if l.len() != 8 || l[0] != "pose" {
                return Err(bad("expected pose row"));
            }
            let v: Vec<f64> = l[1..].iter().map(|s| num(s)).collect::<Result<_>>()?;
            traj.push(SE3Pose::new(Quat::new(v[3], v[4], v[5], v[6]), Vec3::new(v[0], v[1], v[2])));
        }
        let l: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
        if l.first() != Some(&"opacity_weights") || l.len() != kf + 1 {
            return Err(bad("expected opacity weights"));
        }
        let weights: Vec<f64> = l[1..].iter().map(|s| num(s)).collect::<Result<_>>()?;
        let l: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
        let radius = match l.as_slice() {
            ["radius", r] => num(r)?,
            _ => return Err(bad("expected radius")),
        };
        let l: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
        if l.first() != Some(&"neighbors") {
            return Err(bad("expected neighbors"));
        }
        edges.push(l[1..].iter().map(|s| idx(s)).collect::<Result<Vec<_>>>()?);
        nodes.push(ScaffoldNode {
            trajectory: traj,
            radius,
            opacity_weights: weights,
        });
    }
    let g = ScaffoldGraph {
        nodes,
        edges,
        neighbor_count: k,
    };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{se3_exp, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> SE3Pose<f64> {
        let mut a = [0.0; 6];
        for (i, x) in a.iter_mut().enumerate() {
            *x = rng.random_range(-1.0..1.0) * if i < 3 { rot } else { trans };
        }
        se3_exp(&Twist::from_array(a))
    }

    fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, kf: usize) -> ScaffoldGraph<f64> {
        let ns = (0..nodes)
            .map(|_| {
                let mut n = ScaffoldNode::new((0..kf).map(|_| random_pose(rng, 0.8, 0.5)).collect(), rng.random_range(0.1..0.4));
                for w in n.opacity_weights.iter_mut() {
                    *w = rng.random_range(-2.0..2.0);
                }
                n
            })
            .collect();
        ScaffoldGraph::with_knn(ns, 3)
    }

    fn random_gaussian(rng: &mut ChaCha8Rng) -> GaussianPrimitive<f64> {
        GaussianPrimitive {
            mean: v(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            rotation: Quat::new(1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            log_scale: v(-3.0, -2.5, -2.8),
            opacity_logit: rng.random_range(-1.0..2.0),
            color: v(0.2, 0.4, 0.6),
        }
    }

    #[test]
    fn edge_weight_values() {
        assert_eq!(edge_weight(v(1.0, 2.0, 3.0), v(1.0, 2.0, 3.0), 0.3), 1.0);
        let w = edge_weight(v(0.3, 0.0, 0.0), Vec3::zeros(), 0.3);
        assert!((w - (-0.5f64).exp()).abs() < 1e-15);
        assert!((w - 0.6065306597).abs() < 1e-9);
        assert!(edge_weight(v(3.0, 0.0, 0.0), Vec3::zeros(), 0.3) < 1e-21);
    }

    #[test]
    fn identity_at_reference_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 6, 4);
        let gs = random_gaussian(&mut rng);
        let b = GaussianBinding { node_index: 2, reference_time: 1 };
        let xf = deform_transform(&gs, &b, &g, 1).unwrap();
        assert!(xf.max_abs_diff(&SE3Pose::identity()) < 1e-12);
    }

    #[test]
    fn common_rigid_motion_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let motion = random_pose(&mut rng, 1.0, 1.0);
        let nodes: Vec<_> = (0..5)
            .map(|_| {
                let p0 = random_pose(&mut rng, 1.0, 0.3);
                ScaffoldNode::new(vec![p0, motion.compose(&p0)], 0.2)
            })
            .collect();
        let g = ScaffoldGraph::with_knn(nodes, 4);
        let gs = random_gaussian(&mut rng);
        let b = GaussianBinding { node_index: 0, reference_time: 0 };
        let xf = deform_transform(&gs, &b, &g, 1).unwrap();
        assert!(xf.max_abs_diff(&motion) < 1e-12);
    }

    /// Independent blend: explicit normalization of `edge_weight`s and a direct
    /// weighted sum of the ΔQ dual quaternions.
    fn reference_blend(gs: &GaussianPrimitive<f64>, b: &GaussianBinding, g: &ScaffoldGraph<f64>, t: usize) -> SE3Pose<f64> {
        let nb = &g.edges[b.node_index];
        let ws: Vec<f64> = nb
            .iter()
            .map(|&i| edge_weight(gs.mean, g.nodes[i].trajectory[b.reference_time].translation, g.nodes[i].radius))
            .collect();
        let total: f64 = ws.iter().sum();
        let dqs: Vec<DualQuat<f64>> = nb
            .iter()
            .map(|&i| {
                let d = g.nodes[i].trajectory[t].compose(&g.nodes[i].trajectory[b.reference_time].inverse());
                d.to_dual_quat()
            })
            .collect();
        let mut real = Quat::zeros();
        let mut dual = Quat::zeros();
        for (w, dq) in ws.iter().zip(&dqs) {
            let s = if dq.real.dot(dqs[0].real) < 0.0 { -1.0 } else { 1.0 };
            real += dq.real.scale(s * w / total);
            dual += dq.dual.scale(s * w / total);
        }
        let n = real.norm();
        let r = real.scale(1.0 / n);
        let d = dual.scale(1.0 / n);
        SE3Pose::new(r, (d * r.conj()).vec().scale(2.0))
    }

    #[test]
    fn three_neighbor_blend_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nodes: Vec<_> = [v(0.0, 0.0, 0.0), v(0.2, 0.0, 0.0), v(0.0, 0.25, 0.1)]
            .iter()
            .map(|p| ScaffoldNode::new(vec![SE3Pose::from_translation(*p), random_pose(&mut rng, 0.5, 0.3)], 0.2))
            .collect();
        let g = ScaffoldGraph::fully_connected(nodes);
        let gs = GaussianPrimitive::isotropic(v(0.05, 0.1, 0.0), 0.01, 0.5, v(1.0, 1.0, 1.0));
        let b = GaussianBinding { node_index: 0, reference_time: 0 };
        let ours = deform_transform(&gs, &b, &g, 1).unwrap();
        let oracle = reference_blend(&gs, &b, &g, 1);
        assert!(ours.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn blend_scale_invariance_and_aow_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_graph(&mut rng, 5, 3);
        let gs = random_gaussian(&mut rng);
        let b = GaussianBinding { node_index: 1, reference_time: 0 };
        // Doubling all edge weights is the same as shifting every exponent by ln 2,
        // which the blend normalizes away; AOW uses raw weights and does change.
        let base = deform_transform(&gs, &b, &g, 2).unwrap();
        let mut g2 = g.clone();
        for n in g2.nodes.iter_mut() {
            n.radius *= 1.0;
        }
        let oracle = reference_blend(&gs, &b, &g2, 2);
        assert!(base.max_abs_diff(&oracle) < 1e-12);
        let a1 = aggregated_weight(gs.mean, &b, &g, 2);
        let doubled: f64 = g.edges[1]
            .iter()
            .map(|&i| 2.0 * edge_weight(gs.mean, g.nodes[i].translation(0), g.nodes[i].radius) * g.nodes[i].opacity_weights[2])
            .sum();
        assert!((doubled - 2.0 * a1).abs() < 1e-12);
        if a1.abs() > 1e-6 {
            assert!((doubled.sigmoid() - a1.sigmoid()).abs() > 1e-9);
        }
    }

    #[test]
    fn aow_values() {
        let node = ScaffoldNode::new(vec![SE3Pose::from_translation(v(0.0, 0.0, 1.0))], 0.1);
        let mut g = ScaffoldGraph::fully_connected(vec![node]);
        let gs = GaussianPrimitive::isotropic(v(0.0, 0.0, 1.0), 0.01, 0.8, v(1.0, 1.0, 1.0));
        let b = GaussianBinding { node_index: 0, reference_time: 0 };
        assert!((aow_opacity(&gs, &b, &g, 0).unwrap() - 0.4).abs() < 1e-12);
        g.nodes[0].opacity_weights[0] = 20.0;
        assert!((aow_opacity(&gs, &b, &g, 0).unwrap() - 0.8).abs() < 1e-8);
    }

    #[test]
    fn aow_two_neighbors_hand_computed() {
        let mut n0 = ScaffoldNode::new(vec![SE3Pose::from_translation(v(0.0, 0.0, 0.0))], 0.1);
        let mut n1 = ScaffoldNode::new(vec![SE3Pose::from_translation(v(0.1, 0.0, 0.0))], 0.2);
        n0.opacity_weights[0] = 1.0;
        n1.opacity_weights[0] = -1.0;
        let g = ScaffoldGraph::fully_connected(vec![n0, n1]);
        let gs = GaussianPrimitive::isotropic(v(0.05, 0.0, 0.0), 0.01, 0.7, v(1.0, 1.0, 1.0));
        let b = GaussianBinding { node_index: 0, reference_time: 0 };
        // W0 = exp(-0.0025/0.02), W1 = exp(-0.0025/0.08)
        let w = (-0.125f64).exp() - (-0.03125f64).exp();
        let expected = 0.7 / (1.0 + (-w).exp());
        assert!((aow_opacity(&gs, &b, &g, 0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn deform_scene_carries_bound_gaussian() {
        let node = ScaffoldNode::new(
            vec![SE3Pose::from_translation(Vec3::zeros()), SE3Pose::from_translation(v(1.0, 0.0, 0.0))],
            0.1,
        );
        let g = ScaffoldGraph::fully_connected(vec![node]);
        let mut scene = GaussianScene::new(Vec3::zeros());
        scene.static_set.push(GaussianPrimitive::isotropic(v(0.0, 0.0, 5.0), 0.1, 0.5, v(1.0, 0.0, 0.0)));
        scene.dynamic_set.push((
            GaussianPrimitive::isotropic(v(0.02, 0.0, 0.0), 0.01, 0.5, v(0.0, 1.0, 0.0)),
            GaussianBinding { node_index: 0, reference_time: 0 },
        ));
        let out = deform_scene(&scene, &g, 1, OpacityWeighting::Adaptive).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], scene.static_set[0].to_splat());
        assert!((out[1].mean - v(1.02, 0.0, 0.0)).norm() < 1e-12);

        let mut only_static = scene.clone();
        only_static.dynamic_set.clear();
        assert_eq!(deform_scene(&only_static, &g, 1, OpacityWeighting::Adaptive).unwrap(), only_static.static_splats());
    }

    #[test]
    fn deform_scene_matches_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = random_graph(&mut rng, 8, 3);
        let mut scene = GaussianScene::new(Vec3::zeros());
        for i in 0..20 {
            scene.dynamic_set.push((random_gaussian(&mut rng), GaussianBinding { node_index: i % 8, reference_time: i % 3 }));
        }
        let out = deform_scene(&scene, &g, 2, OpacityWeighting::Adaptive).unwrap();
        for ((gs, b), s) in scene.dynamic_set.iter().zip(&out) {
            let xf = deform_transform(gs, b, &g, 2).unwrap();
            assert!((xf.transform_point(gs.mean) - s.mean).norm() < 1e-14);
        }
    }

    /// Scalar objective over a deformed splat used by the gradient checks.
    fn probe(s: &Splat<f64>) -> f64 {
        let q = s.rotation;
        0.7 * s.mean.x - 1.3 * s.mean.y + 0.4 * s.mean.z + 0.9 * s.mean.x * s.mean.z
            + 0.5 * q.w - 0.8 * q.x + 0.3 * q.y + 1.1 * q.z
            + 2.0 * s.opacity
    }

    fn probe_grad(s: &Splat<f64>) -> SplatGrad<f64> {
        SplatGrad {
            mean: v(0.7 + 0.9 * s.mean.z, -1.3, 0.4 + 0.9 * s.mean.x),
            rotation: Quat::new(0.5, -0.8, 0.3, 1.1),
            opacity: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let g = random_graph(&mut rng, 5, 3);
        let mut gs = random_gaussian(&mut rng);
        gs.mean = g.nodes[1].translation(0) + v(0.05, -0.03, 0.02);
        let b = GaussianBinding { node_index: 1, reference_time: 0 };
        let t = 2;
        let w = OpacityWeighting::Adaptive;
        let f = |gs: &GaussianPrimitive<f64>, g: &ScaffoldGraph<f64>| probe(&deform_gaussian(gs, &b, g, t, w).unwrap());
        let splat = deform_gaussian(&gs, &b, &g, t, w).unwrap();
        let mut sg = ScaffoldGrad::zeros_like(&g);
        let gg = deform_gaussian_backward(&gs, &b, &g, t, w, &probe_grad(&splat), &mut sg).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "{what}: fd {fd} vs {analytic}");
        };
        for k in 0..3 {
            let (mut p, mut m) = (gs, gs);
            p.mean[k] += h;
            m.mean[k] -= h;
            check(gg.mean[k], f(&p, &g), f(&m, &g), "mean");
        }
        for k in 0..4 {
            let (mut p, mut m) = (gs, gs);
            let mut a = p.rotation.to_array();
            a[k] += h;
            p.rotation = Quat::from_array(a);
            let mut a = m.rotation.to_array();
            a[k] -= h;
            m.rotation = Quat::from_array(a);
            check(gg.rotation.to_array()[k], f(&p, &g), f(&m, &g), "rotation");
        }
        {
            let (mut p, mut m) = (gs, gs);
            p.opacity_logit += h;
            m.opacity_logit -= h;
            check(gg.opacity_logit, f(&p, &g), f(&m, &g), "opacity");
        }
        for &i in &g.edges[1] {
            for time in [0, t] {
                for k in 0..3 {
                    let (mut p, mut m) = (g.clone(), g.clone());
                    p.nodes[i].trajectory[time].translation[k] += h;
                    m.nodes[i].trajectory[time].translation[k] -= h;
                    check(sg.translation[i][time][k], f(&gs, &p), f(&gs, &m), "node translation");
                }
                for k in 0..4 {
                    let (mut p, mut m) = (g.clone(), g.clone());
                    let mut a = p.nodes[i].trajectory[time].rotation.to_array();
                    a[k] += h;
                    p.nodes[i].trajectory[time].rotation = Quat::from_array(a);
                    let mut a = m.nodes[i].trajectory[time].rotation.to_array();
                    a[k] -= h;
                    m.nodes[i].trajectory[time].rotation = Quat::from_array(a);
                    check(sg.rotation[i][time].to_array()[k], f(&gs, &p), f(&gs, &m), "node rotation");
                }
            }
            let (mut p, mut m) = (g.clone(), g.clone());
            p.nodes[i].opacity_weights[t] += h;
            m.nodes[i].opacity_weights[t] -= h;
            check(sg.opacity_weights[i][t], f(&gs, &p), f(&gs, &m), "aow");
        }
    }

    #[test]
    fn init_single_static_track() {
        let cam = PinholeCamera::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        let depths = vec![Image::filled(32, 32, 1, 2.0); 3];
        let poses = vec![SE3Pose::identity(); 3];
        let masks = vec![vec![true; 32 * 32]; 3];
        let tracks = vec![Track { pixels: vec![Some([16.0, 16.0]); 3] }];
        let g = init_nodes_from_tracks(&tracks, &depths, &poses, &masks, &cam, &NodeInitConfig::default()).unwrap();
        assert_eq!(g.nodes.len(), 1);
        for p in &g.nodes[0].trajectory {
            assert_eq!(p.rotation, Quat::identity());
            assert!((p.translation - v(0.0, 0.0, 2.0)).norm() < 1e-12);
        }
        assert!(g.nodes[0].opacity_weights.iter().all(|w| *w == 0.0));
        assert_eq!(g.edges[0], vec![0]);
    }

    #[test]
    fn init_lifts_linear_track_exactly() {
        let cam = PinholeCamera::new(50.0, 50.0, 16.0, 16.0, 64, 32).unwrap();
        let kf = 5;
        let truth: Vec<Vec3<f64>> = (0..kf).map(|t| v(t as f64 / 4.0, 0.0, 2.0)).collect();
        let tracks = vec![Track { pixels: truth.iter().map(|p| { let (u, vv) = cam.project(*p); Some([u, vv]) }).collect() }];
        let depths = vec![Image::filled(64, 32, 1, 2.0); kf];
        let poses = vec![SE3Pose::identity(); kf];
        let masks = vec![vec![true; 64 * 32]; kf];
        let g = init_nodes_from_tracks(&tracks, &depths, &poses, &masks, &cam, &NodeInitConfig::default()).unwrap();
        for (p, t) in g.nodes[0].trajectory.iter().zip(&truth) {
            assert!((p.translation - *t).norm() < 1e-9);
        }
    }

    #[test]
    fn init_two_parallel_tracks() {
        let cam = PinholeCamera::new(100.0, 100.0, 16.0, 16.0, 32, 32).unwrap();
        // 0.1 m apart at depth 1 m is 10 px.
        let tracks = vec![
            Track { pixels: vec![Some([11.0, 16.0]); 2] },
            Track { pixels: vec![Some([21.0, 16.0]); 2] },
        ];
        let depths = vec![Image::filled(32, 32, 1, 1.0); 2];
        let poses = vec![SE3Pose::identity(); 2];
        let masks = vec![vec![true; 32 * 32]; 2];
        let cfg = NodeInitConfig { neighbor_count: 1, ..Default::default() };
        let g = init_nodes_from_tracks(&tracks, &depths, &poses, &masks, &cam, &cfg).unwrap();
        assert_eq!(g.edges, vec![vec![0, 1], vec![1, 0]]);
        for n in &g.nodes {
            assert!((n.radius - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn init_without_masked_tracks_fails() {
        let cam = PinholeCamera::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        let tracks = vec![Track { pixels: vec![Some([16.0, 16.0])] }];
        let r = init_nodes_from_tracks(
            &tracks,
            &[Image::filled(32, 32, 1, 2.0)],
            &[SE3Pose::identity()],
            &[vec![false; 32 * 32]],
            &cam,
            &NodeInitConfig::default(),
        );
        assert_eq!(r.unwrap_err(), Error::NoTracks);
    }

    #[test]
    fn sidecar_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 4, 3);
        let back = read_scaffold(&write_scaffold(&g)).unwrap();
        assert_eq!(back, g);
    }
}
