//! Dense bundle adjustment over keyframe poses and inverse depths, with
//! per-pixel uncertainty weighting, plus keyframe selection and trajectory
//! export.
//!
//! Poses are camera-to-world. Pose increments are left twists:
//! `T <- exp(δ) T`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::camera::PinholeCamera;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::linalg::Mat3;
use crate::se3::{se3_exp, SE3Pose, Twist};
use crate::uncertainty::BinaryMask;

pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_FLOW_THRESH: f64 = 8.0;
pub const DEFAULT_OVERLAP_THRESH: f64 = 0.85;
pub const DEFAULT_EDGE_RADIUS: usize = 3;
/// Inverse-depth floor applied after each update (1 km).
pub const MIN_INV_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub pose: SE3Pose<f64>,
    pub image: Image<f64>,
    /// Meters; non-positive or non-finite entries are invalid.
    pub depth: Image<f64>,
    pub time: usize,
    pub timestamp: f64,
}

/// Inverse depths sampled on a regular grid of pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl DepthGrid {
    pub fn new(width: usize, height: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let off = stride / 2;
        let cols = (width.saturating_sub(off)).div_ceil(stride);
        let rows = (height.saturating_sub(off)).div_ceil(stride);
        Self {
            stride,
            cols,
            rows,
            values: vec![0.0; cols * rows],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pixel(&self, k: usize) -> (usize, usize) {
        let off = self.stride / 2;
        ((k % self.cols) * self.stride + off, (k / self.cols) * self.stride + off)
    }

    /// Grid initialized from a depth map. Also returns the observed inverse
    /// depth per cell, `None` where the depth is invalid.
    pub fn from_depth(depth: &Image<f64>, stride: usize) -> (Self, Vec<Option<f64>>) {
        let mut g = Self::new(depth.width, depth.height, stride);
        let observed: Vec<Option<f64>> = (0..g.len())
            .map(|k| {
                let (x, y) = g.pixel(k);
                let z = depth.get(x, y, 0);
                (z.is_finite() && z > 0.0).then(|| 1.0 / z)
            })
            .collect();
        let mut valid: Vec<f64> = observed.iter().flatten().copied().collect();
        let fill = if valid.is_empty() {
            1.0
        } else {
            valid.sort_by(f64::total_cmp);
            valid[valid.len() / 2]
        };
        for (v, o) in g.values.iter_mut().zip(&observed) {
            *v = o.unwrap_or(fill);
        }
        (g, observed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    /// Predicted location in the target keyframe, pixels.
    pub target: [f64; 2],
    /// Per-axis variance, pixels².
    pub variance: [f64; 2],
}

/// Flow from every grid cell of `source` into `target`. Cells without a
/// prediction are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCorrespondence {
    pub source: usize,
    pub target: usize,
    pub stride: usize,
    pub samples: Vec<Option<FlowSample>>,
}

impl FlowCorrespondence {
    pub fn validate(&self, camera: &PinholeCamera<f64>) -> Result<()> {
        for s in self.samples.iter().flatten() {
            if !(s.variance[0] > 0.0 && s.variance[1] > 0.0) {
                return Err(Error::Invalid("flow variances must be positive".into()));
            }
            if !camera.in_bounds(s.target[0], s.target[1]) {
                return Err(Error::Invalid("flow target out of bounds".into()));
            }
        }
        Ok(())
    }

    /// Mean displacement over cells with a prediction.
    pub fn mean_flow(&self, width: usize, height: usize) -> f64 {
        let grid = DepthGrid::new(width, height, self.stride);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (k, s) in self.samples.iter().enumerate() {
            if let Some(s) = s {
                let (x, y) = grid.pixel(k);
                sum += ((s.target[0] - x as f64).powi(2) + (s.target[1] - y as f64).powi(2)).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub trait CorrespondenceProvider {
    fn correspondences(&self, source: usize, target: usize, stride: usize) -> Result<FlowCorrespondence>;
}

/// Reprojection flow from ground-truth poses and depths, with Gaussian noise
/// and gross outliers on masked pixels.
#[derive(Debug, Clone)]
pub struct SyntheticFlow {
    pub camera: PinholeCamera<f64>,
    pub poses: Vec<SE3Pose<f64>>,
    pub depths: Vec<Image<f64>>,
    pub noise_sigma: f64,
    /// Reported per-axis variance.
    pub variance: f64,
    /// Pixels whose predictions are replaced by outliers, per keyframe.
    pub outlier_masks: Vec<Option<BinaryMask>>,
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl SyntheticFlow {
    pub fn new(camera: PinholeCamera<f64>, poses: Vec<SE3Pose<f64>>, depths: Vec<Image<f64>>) -> Self {
        let n = poses.len();
        Self {
            camera,
            poses,
            depths,
            noise_sigma: 0.0,
            variance: 1.0,
            outlier_masks: vec![None; n],
            outlier_magnitude: 10.0,
            seed: 0,
        }
    }
}

impl CorrespondenceProvider for SyntheticFlow {
    fn correspondences(&self, source: usize, target: usize, stride: usize) -> Result<FlowCorrespondence> {
        let n = self.poses.len();
        if source >= n || target >= n || self.depths.len() != n {
            return Err(Error::Invalid(format!("no keyframe pair ({source}, {target})")));
        }
        let depth = &self.depths[source];
        let grid = DepthGrid::new(depth.width, depth.height, stride);
        let rel = self.poses[target].inverse().compose(&self.poses[source]);
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ ((source as u64) << 32 | target as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
        let mask = self.outlier_masks.get(source).and_then(|m| m.as_ref());
        let samples = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.pixel(k);
                let z = depth.get(x, y, 0);
                let (ex, ey) = (noise.sample(&mut rng), noise.sample(&mut rng));
                let (ox, oy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if !(z.is_finite() && z > 0.0) {
                    return None;
                }
                let [mut u, mut v] = warp([x as f64, y as f64], &rel, z, &self.camera).ok()?;
                u += ex;
                v += ey;
                if mask.is_some_and(|m| m.get(x, y)) {
                    u += ox * self.outlier_magnitude;
                    v += oy * self.outlier_magnitude;
                }
                self.camera.in_bounds(u, v).then_some(FlowSample {
                    target: [u, v],
                    variance: [self.variance; 2],
                })
            })
            .collect();
        Ok(FlowCorrespondence {
            source,
            target,
            stride,
            samples,
        })
    }
}

/// Directed pairs `(i, j)` with `0 < |i - j| <= radius`.
pub fn build_edges(count: usize, radius: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..count {
        for j in 0..count {
            if i != j && i.abs_diff(j) <= radius.max(1) {
                e.push((i, j));
            }
        }
    }
    e
}

pub fn collect_correspondences(
    provider: &dyn CorrespondenceProvider,
    edges: &[(usize, usize)],
    stride: usize,
) -> Result<Vec<FlowCorrespondence>> {
    edges
        .iter()
        .map(|&(i, j)| provider.correspondences(i, j, stride))
        .collect()
}

/// Maps pixel `p` of keyframe i at depth `depth` into keyframe j, given
/// `relative = T_j⁻¹ T_i`.
pub fn warp(p: [f64; 2], relative: &SE3Pose<f64>, depth: f64, camera: &PinholeCamera<f64>) -> Result<[f64; 2]> {
    let x = relative.transform_point(camera.back_project(p[0], p[1], depth));
    if x.z <= camera.near {
        return Err(Error::BehindCamera { depth: x.z });
    }
    let (u, v) = camera.project(x);
    Ok([u, v])
}

/// Warped pixel and its derivatives with respect to left twists of both
/// camera-to-world poses and the source inverse depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpJacobian {
    pub projected: [f64; 2],
    pub d_pose_i: [[f64; 6]; 2],
    pub d_pose_j: [[f64; 6]; 2],
    pub d_inv_depth: [f64; 2],
}

pub fn warp_jacobian(
    p: [f64; 2],
    pose_i: &SE3Pose<f64>,
    pose_j: &SE3Pose<f64>,
    inv_depth: f64,
    camera: &PinholeCamera<f64>,
) -> Result<WarpJacobian> {
    let ray = camera.back_project(p[0], p[1], 1.0);
    let xi = ray.scale(1.0 / inv_depth);
    let xw = pose_i.transform_point(xi);
    let rj_t = pose_j.rotation_matrix().transpose();
    let xj = rj_t.mul_vec(xw - pose_j.translation);
    if xj.z <= camera.near {
        return Err(Error::BehindCamera { depth: xj.z });
    }
    let (u, v) = camera.project(xj);
    let iz = 1.0 / xj.z;
    let dp = [
        [camera.fx * iz, 0.0, -camera.fx * xj.x * iz * iz],
        [0.0, camera.fy * iz, -camera.fy * xj.y * iz * iz],
    ];
    // d xj / d(ω, ρ) of pose i is R_jᵀ [-[xw]×, I]; for pose j it is the negation.
    let a = rj_t.mul_mat(&Mat3::skew(xw)).scale(-1.0);
    let mut d_pose_i = [[0.0; 6]; 2];
    let mut d_pose_j = [[0.0; 6]; 2];
    for r in 0..2 {
        for c in 0..3 {
            let mut rot = 0.0;
            let mut tr = 0.0;
            for k in 0..3 {
                rot += dp[r][k] * a.m[k][c];
                tr += dp[r][k] * rj_t.m[k][c];
            }
            d_pose_i[r][c] = rot;
            d_pose_i[r][c + 3] = tr;
            d_pose_j[r][c] = -rot;
            d_pose_j[r][c + 3] = -tr;
        }
    }
    let dx_dd = rj_t.mul_vec(pose_i.rotation.rotate(ray)).scale(-1.0 / (inv_depth * inv_depth));
    let dd = dx_dd.to_array();
    let d_inv_depth = [
        (0..3).map(|k| dp[0][k] * dd[k]).sum(),
        (0..3).map(|k| dp[1][k] * dd[k]).sum(),
    ];
    Ok(WarpJacobian {
        projected: [u, v],
        d_pose_i,
        d_pose_j,
        d_inv_depth,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbaConfig {
    pub stride: usize,
    pub max_iterations: usize,
    pub pose_tolerance: f64,
    pub lambda_init: f64,
    /// Weight of the observed-depth prior on each inverse depth.
    pub depth_prior_weight: f64,
    /// When false every pixel uses β² = 1.
    pub use_uncertainty: bool,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            max_iterations: 50,
            pose_tolerance: 1e-6,
            lambda_init: 1e-4,
            depth_prior_weight: 100.0,
            use_uncertainty: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbaResult {
    pub poses: Vec<SE3Pose<f64>>,
    pub inverse_depths: Vec<DepthGrid>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Objective after each accepted step, starting with the initial value.
    pub cost_history: Vec<f64>,
}

/// Gauss-Newton system with the pose block dense and the depth block
/// diagonal. `b = -Jᵀ W r`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub hpp: DMatrix<f64>,
    pub bp: DVector<f64>,
    pub hdd: Vec<Vec<f64>>,
    pub bd: Vec<Vec<f64>>,
    /// Pose-depth coupling per depth cell: `(pose block, 6-vector)`.
    pub hpd: Vec<Vec<Vec<(usize, [f64; 6])>>>,
    pub cost: f64,
    pub residual_count: usize,
}

struct Problem<'a> {
    camera: &'a PinholeCamera<f64>,
    corrs: &'a [FlowCorrespondence],
    beta2: Vec<Option<&'a Image<f64>>>,
    observed: Vec<Vec<Option<f64>>>,
    cfg: &'a DbaConfig,
}

struct EdgeLin {
    cost: f64,
    count: usize,
    h: [[f64; 12]; 12],
    b: [f64; 12],
    cells: Vec<(usize, f64, f64, [f64; 6], [f64; 6])>,
}

impl Problem<'_> {
    fn beta2_at(&self, kf: usize, x: usize, y: usize) -> f64 {
        if !self.cfg.use_uncertainty {
            return 1.0;
        }
        self.beta2[kf].map_or(1.0, |b| b.get(x, y, 0))
    }

    fn edge(&self, corr: &FlowCorrespondence, poses: &[SE3Pose<f64>], grids: &[DepthGrid], jac: bool) -> EdgeLin {
        let (i, j) = (corr.source, corr.target);
        let grid = &grids[i];
        let mut out = EdgeLin {
            cost: 0.0,
            count: 0,
            h: [[0.0; 12]; 12],
            b: [0.0; 12],
            cells: Vec::new(),
        };
        for (k, s) in corr.samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let (x, y) = grid.pixel(k);
            let Ok(wj) = warp_jacobian([x as f64, y as f64], &poses[i], &poses[j], grid.values[k], self.camera)
            else {
                continue;
            };
            out.count += 1;
            let b2 = self.beta2_at(i, x, y);
            let mut hdd = 0.0;
            let mut bd = 0.0;
            let mut hpi = [0.0; 6];
            let mut hpj = [0.0; 6];
            for c in 0..2 {
                let w = 1.0 / (s.variance[c] * b2);
                let r = s.target[c] - wj.projected[c];
                out.cost += w * r * r;
                if !jac {
                    continue;
                }
                // Residual Jacobian is the negated warp Jacobian.
                let mut jp = [0.0; 12];
                jp[..6].copy_from_slice(&wj.d_pose_i[c]);
                jp[6..].copy_from_slice(&wj.d_pose_j[c]);
                let jd = wj.d_inv_depth[c];
                for a in 0..12 {
                    out.b[a] += w * jp[a] * r;
                    for bb in 0..12 {
                        out.h[a][bb] += w * jp[a] * jp[bb];
                    }
                }
                hdd += w * jd * jd;
                bd += w * jd * r;
                for a in 0..6 {
                    hpi[a] += w * wj.d_pose_i[c][a] * jd;
                    hpj[a] += w * wj.d_pose_j[c][a] * jd;
                }
            }
            if jac {
                out.cells.push((k, hdd, bd, hpi, hpj));
            }
        }
        out
    }

    fn prior(&self, kf: usize, k: usize, grids: &[DepthGrid]) -> Option<(f64, f64)> {
        let obs = self.observed[kf][k]?;
        let (x, y) = grids[kf].pixel(k);
        let w = self.cfg.depth_prior_weight / self.beta2_at(kf, x, y);
        (w > 0.0).then(|| (w, grids[kf].values[k] - obs))
    }

    fn cost(&self, poses: &[SE3Pose<f64>], grids: &[DepthGrid]) -> (f64, usize) {
        let edges: Vec<(f64, usize)> = self
            .corrs
            .par_iter()
            .map(|c| {
                let e = self.edge(c, poses, grids, false);
                (e.cost, e.count)
            })
            .collect();
        let mut cost = 0.0;
        let mut count = 0;
        for (c, n) in edges {
            cost += c;
            count += n;
        }
        for (kf, g) in grids.iter().enumerate() {
            for k in 0..g.len() {
                if let Some((w, r)) = self.prior(kf, k, grids) {
                    cost += w * r * r;
                }
            }
        }
        (cost, count)
    }

    fn linearize(&self, poses: &[SE3Pose<f64>], grids: &[DepthGrid]) -> NormalEquations {
        let n = poses.len();
        let np = 6 * (n - 1);
        let block = |kf: usize| (kf > 0).then(|| kf - 1);
        let mut ne = NormalEquations {
            hpp: DMatrix::zeros(np, np),
            bp: DVector::zeros(np),
            hdd: grids.iter().map(|g| vec![0.0; g.len()]).collect(),
            bd: grids.iter().map(|g| vec![0.0; g.len()]).collect(),
            hpd: grids.iter().map(|g| vec![Vec::new(); g.len()]).collect(),
            cost: 0.0,
            residual_count: 0,
        };
        let lins: Vec<EdgeLin> = self.corrs.par_iter().map(|c| self.edge(c, poses, grids, true)).collect();
        for (corr, lin) in self.corrs.iter().zip(lins) {
            ne.cost += lin.cost;
            ne.residual_count += lin.count;
            let blocks = [block(corr.source), block(corr.target)];
            for (sa, ba) in blocks.iter().enumerate() {
                let Some(ba) = ba else { continue };
                for a in 0..6 {
                    ne.bp[6 * ba + a] += lin.b[6 * sa + a];
                    for (sb, bb) in blocks.iter().enumerate() {
                        let Some(bb) = bb else { continue };
                        for c in 0..6 {
                            ne.hpp[(6 * ba + a, 6 * bb + c)] += lin.h[6 * sa + a][6 * sb + c];
                        }
                    }
                }
            }
            for (k, hdd, bd, hpi, hpj) in lin.cells {
                ne.hdd[corr.source][k] += hdd;
                ne.bd[corr.source][k] += bd;
                let links = &mut ne.hpd[corr.source][k];
                for (blk, v) in [(blocks[0], hpi), (blocks[1], hpj)] {
                    let Some(blk) = blk else { continue };
                    match links.iter_mut().find(|(b, _)| *b == blk) {
                        Some((_, acc)) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += x),
                        None => links.push((blk, v)),
                    }
                }
            }
        }
        for (kf, g) in grids.iter().enumerate() {
            for k in 0..g.len() {
                if let Some((w, r)) = self.prior(kf, k, grids) {
                    ne.cost += w * r * r;
                    ne.hdd[kf][k] += w;
                    ne.bd[kf][k] -= w * r;
                }
            }
        }
        ne
    }
}

/// Damped solve via the depth Schur complement. Returns pose and depth steps.
fn solve_damped(ne: &NormalEquations, lambda: f64) -> Option<(DVector<f64>, Vec<Vec<f64>>)> {
    let np = ne.bp.len();
    let mut s = ne.hpp.clone();
    for a in 0..np {
        s[(a, a)] += lambda * ne.hpp[(a, a)];
    }
    let mut g = ne.bp.clone();
    for (kf, cells) in ne.hpd.iter().enumerate() {
        for (k, links) in cells.iter().enumerate() {
            let hdd = ne.hdd[kf][k] * (1.0 + lambda);
            if hdd <= 0.0 {
                continue;
            }
            let inv = 1.0 / hdd;
            for (ba, va) in links {
                for a in 0..6 {
                    g[6 * ba + a] -= va[a] * ne.bd[kf][k] * inv;
                    for (bb, vb) in links {
                        for c in 0..6 {
                            s[(6 * ba + a, 6 * bb + c)] -= va[a] * vb[c] * inv;
                        }
                    }
                }
            }
        }
    }
    let dp = if np == 0 {
        DVector::zeros(0)
    } else {
        s.cholesky()?.solve(&g)
    };
    if dp.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let dd = ne
        .hpd
        .iter()
        .enumerate()
        .map(|(kf, cells)| {
            cells
                .iter()
                .enumerate()
                .map(|(k, links)| {
                    let hdd = ne.hdd[kf][k] * (1.0 + lambda);
                    if hdd <= 0.0 {
                        return 0.0;
                    }
                    let mut r = ne.bd[kf][k];
                    for (b, v) in links {
                        r -= (0..6).map(|a| v[a] * dp[6 * b + a]).sum::<f64>();
                    }
                    r / hdd
                })
                .collect()
        })
        .collect();
    Some((dp, dd))
}

struct Setup<'a> {
    problem: Problem<'a>,
    poses: Vec<SE3Pose<f64>>,
    grids: Vec<DepthGrid>,
}

fn setup<'a>(
    keyframes: &[Keyframe],
    correspondences: &'a [FlowCorrespondence],
    beta2: &'a [Option<Image<f64>>],
    camera: &'a PinholeCamera<f64>,
    cfg: &'a DbaConfig,
) -> Result<Setup<'a>> {
    let n = keyframes.len();
    if n < 2 {
        return Err(Error::Invalid("bundle adjustment needs at least two keyframes".into()));
    }
    if correspondences.is_empty() {
        return Err(Error::Invalid("edge set is empty".into()));
    }
    if keyframes.windows(2).any(|w| w[1].time <= w[0].time) {
        return Err(Error::Invalid("keyframe time indices must increase".into()));
    }
    if !beta2.is_empty() && beta2.len() != n {
        return Err(shape_err(format!("{n} uncertainty maps"), format!("{}", beta2.len())));
    }
    let mut grids = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    for kf in keyframes {
        if kf.depth.width != camera.width || kf.depth.height != camera.height {
            return Err(shape_err(
                format!("{}x{} depth", camera.width, camera.height),
                kf.depth.shape_str(),
            ));
        }
        let (g, o) = DepthGrid::from_depth(&kf.depth, cfg.stride);
        grids.push(g);
        observed.push(o);
    }
    for (kf, b) in beta2.iter().enumerate() {
        if let Some(b) = b {
            if b.width != camera.width || b.height != camera.height {
                return Err(shape_err(format!("{}x{} uncertainty", camera.width, camera.height), b.shape_str()));
            }
            if b.data.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Invalid(format!("uncertainty map {kf} has non-positive entries")));
            }
        }
    }
    for c in correspondences {
        if c.source >= n || c.target >= n || c.source == c.target {
            return Err(Error::Invalid(format!("bad edge ({}, {})", c.source, c.target)));
        }
        if c.stride != cfg.stride || c.samples.len() != grids[c.source].len() {
            return Err(shape_err(format!("{} samples", grids[c.source].len()), c.samples.len()));
        }
        c.validate(camera)?;
    }
    let beta2 = if beta2.is_empty() {
        vec![None; n]
    } else {
        beta2.iter().map(|b| b.as_ref()).collect()
    };
    Ok(Setup {
        problem: Problem {
            camera,
            corrs: correspondences,
            beta2,
            observed,
            cfg,
        },
        poses: keyframes.iter().map(|k| k.pose).collect(),
        grids,
    })
}

/// Assembles the normal equations at the keyframes' current poses and
/// observed depths.
pub fn normal_equations(
    keyframes: &[Keyframe],
    correspondences: &[FlowCorrespondence],
    beta2: &[Option<Image<f64>>],
    camera: &PinholeCamera<f64>,
    cfg: &DbaConfig,
) -> Result<NormalEquations> {
    let s = setup(keyframes, correspondences, beta2, camera, cfg)?;
    Ok(s.problem.linearize(&s.poses, &s.grids))
}

/// Levenberg-Marquardt over all poses except keyframe 0 and all grid inverse
/// depths. Each flow residual component is weighted by `1 / (Σ̂ β²)` with β²
/// read from the source keyframe (an empty `beta2` means β² = 1).
pub fn dba_solve(
    keyframes: &[Keyframe],
    correspondences: &[FlowCorrespondence],
    beta2: &[Option<Image<f64>>],
    camera: &PinholeCamera<f64>,
    cfg: &DbaConfig,
) -> Result<DbaResult> {
    let Setup {
        problem,
        mut poses,
        mut grids,
    } = setup(keyframes, correspondences, beta2, camera, cfg)?;
    let mut lambda = cfg.lambda_init;
    let mut ne = problem.linearize(&poses, &grids);
    let initial_cost = ne.cost;
    let mut history = vec![ne.cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let Some((dp, dd)) = solve_damped(&ne, lambda) else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Err(Error::SingularSystem);
            }
            continue;
        };
        let mut cand_poses = poses.clone();
        for (b, p) in cand_poses.iter_mut().skip(1).enumerate() {
            let d: [f64; 6] = std::array::from_fn(|a| dp[6 * b + a]);
            *p = se3_exp(&Twist::from_array(d)).compose(p);
        }
        let mut cand_grids = grids.clone();
        let mut positive = true;
        for (g, d) in cand_grids.iter_mut().zip(&dd) {
            for (v, dv) in g.values.iter_mut().zip(d) {
                *v = (*v + dv).max(MIN_INV_DEPTH);
                positive &= v.is_finite();
            }
        }
        let max_step = dp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let accepted = positive && {
            let (c, count) = problem.cost(&cand_poses, &cand_grids);
            count >= ne.residual_count && c < ne.cost
        };
        if accepted {
            poses = cand_poses;
            grids = cand_grids;
            lambda = (lambda / 10.0).max(1e-12);
            ne = problem.linearize(&poses, &grids);
            history.push(ne.cost);
            if max_step < cfg.pose_tolerance {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if max_step < cfg.pose_tolerance || lambda > 1e12 {
                converged = true;
                break;
            }
        }
    }
    Ok(DbaResult {
        poses,
        inverse_depths: grids,
        iterations,
        converged,
        initial_cost,
        final_cost: ne.cost,
        cost_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeConfig {
    pub flow_thresh: f64,
    pub overlap_thresh: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            flow_thresh: DEFAULT_FLOW_THRESH,
            overlap_thresh: DEFAULT_OVERLAP_THRESH,
        }
    }
}

/// Motion of the current frame relative to the last keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    /// Mean static-pixel flow magnitude, pixels.
    pub mean_flow: f64,
    /// Fraction of the last keyframe's visible Gaussians still visible.
    pub overlap: f64,
}

pub fn select_keyframe(stats: &FrameStats, cfg: &KeyframeConfig) -> bool {
    stats.mean_flow > cfg.flow_thresh || stats.overlap < cfg.overlap_thresh
}

/// `|A ∩ B| / |A|` for sorted-or-not index sets; 1 when `A` is empty.
pub fn covisible_overlap(last: &[usize], current: &[usize]) -> f64 {
    if last.is_empty() {
        return 1.0;
    }
    let cur: std::collections::HashSet<usize> = current.iter().copied().collect();
    last.iter().filter(|i| cur.contains(i)).count() as f64 / last.len() as f64
}

/// `%.{digits}g`-style formatting.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}{:02}", trim(mant.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(format!("{v:.decimals$}"))
    }
}

/// One TUM trajectory line: `timestamp tx ty tz qx qy qz qw`. The timestamp
/// keeps microseconds; pose values use 9 significant digits.
pub fn tum_line(timestamp: f64, pose: &SE3Pose<f64>) -> String {
    let q = pose.rotation.normalized();
    let t = pose.translation;
    let mut out = format!("{timestamp:.6}");
    for v in [t.x, t.y, t.z, q.x, q.y, q.z, q.w] {
        out.push(' ');
        out.push_str(&format_significant(v, 9));
    }
    out
}

pub fn write_tum_trajectory<W: Write>(mut w: W, entries: &[(f64, SE3Pose<f64>)]) -> Result<()> {
    for (ts, p) in entries {
        writeln!(w, "{}", tum_line(*ts, p))?;
    }
    Ok(())
}

/// Translation RMSE between matching poses without any alignment.
pub fn position_rmse(a: &[SE3Pose<f64>], b: &[SE3Pose<f64>]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p.translation - q.translation).norm_squared())
        .sum();
    (s / a.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Quat, Vec3};
    use crate::metrics::ate_rmse;

    fn camera() -> PinholeCamera<f64> {
        PinholeCamera::new(60.0, 60.0, 31.5, 23.5, 64, 48).unwrap()
    }

    /// Depth of a slanted wall plus a closer box, as seen from `pose`.
    fn scene_depth(cam: &PinholeCamera<f64>, pose: &SE3Pose<f64>) -> Image<f64> {
        let mut d = Image::zeros(cam.width, cam.height, 1);
        let o = pose.translation;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let dir_c = cam.back_project(x as f64, y as f64, 1.0);
                let dir = pose.rotation.rotate(dir_c);
                // Plane z = 3 + 0.2 x.
                let t_plane = (3.0 + 0.2 * o.x - o.z) / (dir.z - 0.2 * dir.x);
                let mut t = t_plane;
                // Box face z = 2 for |x|,|y| < 0.4.
                let t_box = (2.0 - o.z) / dir.z;
                let hit = o + dir.scale(t_box);
                if t_box > 0.0 && hit.x.abs() < 0.4 && hit.y.abs() < 0.4 {
                    t = t.min(t_box);
                }
                d.set(x, y, 0, t * 1.0);
            }
        }
        d
    }

    fn gt_poses(n: usize) -> Vec<SE3Pose<f64>> {
        (0..n)
            .map(|i| {
                let s = i as f64;
                SE3Pose::new(
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), -0.02 * s),
                    Vec3::new(0.05 * s, 0.01 * s, 0.02 * s),
                )
            })
            .collect()
    }

    struct Fixture {
        cam: PinholeCamera<f64>,
        gt: Vec<SE3Pose<f64>>,
        keyframes: Vec<Keyframe>,
        provider: SyntheticFlow,
    }

    fn fixture(n: usize) -> Fixture {
        let cam = camera();
        let gt = gt_poses(n);
        let depths: Vec<_> = gt.iter().map(|p| scene_depth(&cam, p)).collect();
        let keyframes = gt
            .iter()
            .zip(&depths)
            .enumerate()
            .map(|(i, (p, d))| Keyframe {
                pose: *p,
                image: Image::zeros(cam.width, cam.height, 3),
                depth: d.clone(),
                time: i,
                timestamp: i as f64 * 0.1,
            })
            .collect();
        let provider = SyntheticFlow::new(cam, gt.clone(), depths);
        Fixture {
            cam,
            gt,
            keyframes,
            provider,
        }
    }

    fn perturb(kfs: &mut [Keyframe], scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kf in kfs.iter_mut().skip(1) {
            let d: [f64; 6] = std::array::from_fn(|_| rng.random_range(-scale..scale));
            kf.pose = kf.pose.compose(&se3_exp(&Twist::from_array(d)));
        }
    }

    fn corrs(f: &Fixture, stride: usize) -> Vec<FlowCorrespondence> {
        collect_correspondences(&f.provider, &build_edges(f.gt.len(), DEFAULT_EDGE_RADIUS), stride).unwrap()
    }

    #[test]
    fn identity_warp_is_identity() {
        let cam = camera();
        let p = warp([10.0, 20.0], &SE3Pose::identity(), 2.5, &cam).unwrap();
        assert!((p[0] - 10.0).abs() < 1e-12 && (p[1] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn forward_translation_scales_offsets_by_depth_ratio() {
        let cam = camera();
        // Camera j sits 1 m ahead of camera i; a point at 2 m ends up at 1 m.
        let rel = SE3Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)).inverse();
        let p = warp([41.5, 23.5], &rel, 2.0, &cam).unwrap();
        assert!((p[0] - (31.5 + 2.0 * 10.0)).abs() < 1e-12);
        assert!((p[1] - 23.5).abs() < 1e-12);
    }

    #[test]
    fn warp_behind_camera() {
        let cam = camera();
        let rel = SE3Pose::from_translation(Vec3::new(0.0, 0.0, -3.0));
        assert!(matches!(
            warp([31.5, 23.5], &rel, 2.0, &cam),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn oracle_flow_matches_reprojection() {
        let f = fixture(3);
        let c = f.provider.correspondences(0, 2, 4).unwrap();
        let grid = DepthGrid::new(64, 48, 4);
        let rel = f.gt[2].inverse().compose(&f.gt[0]);
        let mut checked = 0;
        for (k, s) in c.samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let (x, y) = grid.pixel(k);
            let z = f.provider.depths[0].get(x, y, 0);
            // Reprojection through world coordinates, independent of `warp`.
            let pw = f.gt[0].transform_point(f.cam.back_project(x as f64, y as f64, z));
            let pc = f.gt[2].inverse().transform_point(pw);
            let (u, v) = f.cam.project(pc);
            assert!((s.target[0] - u).abs() < 1e-6 && (s.target[1] - v).abs() < 1e-6);
            let w = warp([x as f64, y as f64], &rel, z, &f.cam).unwrap();
            assert!((w[0] - u).abs() < 1e-6 && (w[1] - v).abs() < 1e-6);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cam = camera();
        let pi = SE3Pose::new(
            Quat::from_axis_angle(Vec3::new(0.3, 0.9, 0.1).scale(1.0 / 0.9539392014169456), 0.2),
            Vec3::new(0.1, -0.2, 0.05),
        );
        let pj = SE3Pose::new(
            Quat::from_axis_angle(Vec3::new(-0.5, 0.2, 0.84).scale(1.0 / 1.0), 0.15),
            Vec3::new(0.3, 0.1, -0.2),
        );
        let p = [20.0, 30.0];
        let d = 0.4;
        let j = warp_jacobian(p, &pi, &pj, d, &cam).unwrap();
        let f = |pi: &SE3Pose<f64>, pj: &SE3Pose<f64>, d: f64| warp_jacobian(p, pi, pj, d, &cam).unwrap().projected;
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        for a in 0..6 {
            let mut e = [0.0; 6];
            e[a] = h;
            let plus = se3_exp(&Twist::from_array(e));
            e[a] = -h;
            let minus = se3_exp(&Twist::from_array(e));
            let fi_p = f(&plus.compose(&pi), &pj, d);
            let fi_m = f(&minus.compose(&pi), &pj, d);
            let fj_p = f(&pi, &plus.compose(&pj), d);
            let fj_m = f(&pi, &minus.compose(&pj), d);
            for r in 0..2 {
                let ni = (fi_p[r] - fi_m[r]) / (2.0 * h);
                let nj = (fj_p[r] - fj_m[r]) / (2.0 * h);
                assert!(rel(j.d_pose_i[r][a], ni) < 1e-4, "i {r} {a}: {} vs {ni}", j.d_pose_i[r][a]);
                assert!(rel(j.d_pose_j[r][a], nj) < 1e-4, "j {r} {a}: {} vs {nj}", j.d_pose_j[r][a]);
            }
        }
        let fp = f(&pi, &pj, d + h);
        let fm = f(&pi, &pj, d - h);
        for r in 0..2 {
            let n = (fp[r] - fm[r]) / (2.0 * h);
            assert!(rel(j.d_inv_depth[r], n) < 1e-4);
        }
    }

    #[test]
    fn noise_free_solve_recovers_poses() {
        let mut f = fixture(6);
        let c = corrs(&f, 4);
        perturb(&mut f.keyframes, 1e-2, 5);
        let before = ate_rmse(&f.keyframes.iter().map(|k| k.pose).collect::<Vec<_>>(), &f.gt, false).unwrap();
        let res = dba_solve(&f.keyframes, &c, &[], &f.cam, &DbaConfig::default()).unwrap();
        let ate = ate_rmse(&res.poses, &f.gt, false).unwrap();
        assert!(before > 1e-3);
        assert!(ate < 1e-4, "ate {ate}");
        assert!(res.final_cost < 1e-12 * res.initial_cost.max(1.0));
        assert_eq!(res.poses[0], f.gt[0]);
    }

    #[test]
    fn objective_never_increases() {
        let mut f = fixture(5);
        f.provider.noise_sigma = 0.5;
        let c = corrs(&f, 4);
        perturb(&mut f.keyframes, 2e-2, 7);
        let res = dba_solve(&f.keyframes, &c, &[], &f.cam, &DbaConfig::default()).unwrap();
        assert!(res.cost_history.len() > 1);
        for w in res.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn uniform_beta2_matches_unweighted_solve() {
        let mut f = fixture(5);
        f.provider.noise_sigma = 0.3;
        let c = corrs(&f, 4);
        perturb(&mut f.keyframes, 1e-2, 9);
        let plain = dba_solve(&f.keyframes, &c, &[], &f.cam, &DbaConfig::default()).unwrap();
        for b in [4.0, 3.7] {
            let maps: Vec<_> = (0..5).map(|_| Some(Image::filled(64, 48, 1, b))).collect();
            let weighted = dba_solve(&f.keyframes, &c, &maps, &f.cam, &DbaConfig::default()).unwrap();
            for (p, q) in weighted.poses.iter().zip(&plain.poses) {
                assert!(p.max_abs_diff(q) < 1e-9, "beta2 {b}");
            }
            assert!((weighted.final_cost * b - plain.final_cost).abs() < 1e-9 * plain.final_cost.max(1.0));
        }
    }

    #[test]
    fn larger_beta2_reduces_contribution() {
        let f = fixture(3);
        let c = corrs(&f, 4);
        let cfg = DbaConfig::default();
        let base = normal_equations(&f.keyframes, &c, &[], &f.cam, &cfg).unwrap();
        let mut map = Image::filled(64, 48, 1, 1.0);
        let region = |x: usize, y: usize| x < 24 && y < 24;
        for y in 0..48 {
            for x in 0..64 {
                if region(x, y) {
                    map.set(x, y, 0, 5.0);
                }
            }
        }
        let maps = vec![Some(map), None, None];
        let heavy = normal_equations(&f.keyframes, &c, &maps, &f.cam, &cfg).unwrap();
        let grid = DepthGrid::new(64, 48, 4);
        let mut touched = 0;
        for k in 0..grid.len() {
            let (x, y) = grid.pixel(k);
            if region(x, y) {
                if base.hdd[0][k] > 0.0 {
                    assert!(heavy.hdd[0][k] < base.hdd[0][k]);
                    touched += 1;
                }
            } else {
                assert_eq!(heavy.hdd[0][k], base.hdd[0][k]);
            }
            assert_eq!(heavy.hdd[1][k], base.hdd[1][k]);
        }
        assert!(touched > 0);
        assert!(heavy.hpp.trace() < base.hpp.trace());
        let diff = &base.hpp - &heavy.hpp;
        assert!(diff.symmetric_eigenvalues().iter().all(|v| *v > -1e-9));
    }

    #[test]
    fn gauge_invariance_under_common_rigid_motion() {
        let g = SE3Pose::new(
            Quat::from_axis_angle(Vec3::new(0.0, 0.6, 0.8), 0.7),
            Vec3::new(1.0, -2.0, 0.5),
        );
        let run = |moved: bool| {
            let mut f = fixture(5);
            f.provider.noise_sigma = 0.3;
            if moved {
                f.gt = f.gt.iter().map(|p| g.compose(p)).collect();
                f.provider.poses = f.gt.clone();
                for (kf, p) in f.keyframes.iter_mut().zip(&f.gt) {
                    kf.pose = *p;
                }
            }
            let c = corrs(&f, 4);
            perturb(&mut f.keyframes, 1e-2, 13);
            let res = dba_solve(&f.keyframes, &c, &[], &f.cam, &DbaConfig::default()).unwrap();
            (res.poses, f.gt)
        };
        let (a, gt_a) = run(false);
        let (b, gt_b) = run(true);
        for (p, q) in a.iter().zip(&b) {
            assert!(g.compose(p).max_abs_diff(q) < 1e-7);
        }
        let ate_a = ate_rmse(&a, &gt_a, false).unwrap();
        let ate_b = ate_rmse(&b, &gt_b, false).unwrap();
        assert!((ate_a - ate_b).abs() < 1e-9, "{ate_a} {ate_b}");
    }

    #[test]
    fn uncertainty_suppresses_outliers() {
        let mut f = fixture(6);
        f.provider.noise_sigma = 0.1;
        f.provider.outlier_magnitude = 8.0;
        let grid = DepthGrid::new(64, 48, 4);
        // Roughly a fifth of the grid cells become outliers.
        let in_region = |x: usize, y: usize| (x / 4 + 2 * (y / 4)) % 5 == 0;
        let mask = BinaryMask::from_fn(64, 48, in_region);
        f.provider.outlier_masks = vec![Some(mask); 6];
        let frac = (0..grid.len())
            .filter(|&k| {
                let (x, y) = grid.pixel(k);
                in_region(x, y)
            })
            .count() as f64
            / grid.len() as f64;
        assert!((frac - 0.2).abs() < 0.02);
        let c = corrs(&f, 4);
        perturb(&mut f.keyframes, 1e-2, 17);
        let beta = Image::from_vec(
            64,
            48,
            1,
            (0..64 * 48).map(|i| if in_region(i % 64, i / 64) { 100.0 } else { 0.1 }).collect(),
        )
        .unwrap();
        let maps: Vec<_> = (0..6).map(|_| Some(beta.clone())).collect();
        let cfg = DbaConfig::default();
        let weighted = dba_solve(&f.keyframes, &c, &maps, &f.cam, &cfg).unwrap();
        let plain = dba_solve(&f.keyframes, &c, &[], &f.cam, &cfg).unwrap();
        let ate_w = ate_rmse(&weighted.poses, &f.gt, false).unwrap();
        let ate_p = ate_rmse(&plain.poses, &f.gt, false).unwrap();
        assert!(ate_w * 5.0 < ate_p, "weighted {ate_w} plain {ate_p}");
    }

    #[test]
    fn degenerate_geometry_is_singular() {
        let f = fixture(3);
        // A single correspondence cell cannot constrain two free poses.
        let mut c = f.provider.correspondences(0, 1, 4).unwrap();
        let first = c.samples.iter().position(|s| s.is_some()).unwrap();
        for (k, s) in c.samples.iter_mut().enumerate() {
            if k != first {
                *s = None;
            }
        }
        let res = dba_solve(&f.keyframes, &[c], &[], &f.cam, &DbaConfig::default());
        assert_eq!(res, Err(Error::SingularSystem));
    }

    #[test]
    fn input_validation() {
        let f = fixture(2);
        let c = corrs(&f, 4);
        assert!(dba_solve(&f.keyframes[..1], &c, &[], &f.cam, &DbaConfig::default()).is_err());
        assert!(dba_solve(&f.keyframes, &[], &[], &f.cam, &DbaConfig::default()).is_err());
        let mut kfs = f.keyframes.clone();
        kfs[1].time = 0;
        assert!(dba_solve(&kfs, &c, &[], &f.cam, &DbaConfig::default()).is_err());
    }

    #[test]
    fn edges_cover_radius() {
        let e = build_edges(5, 3);
        assert!(e.contains(&(0, 3)) && e.contains(&(3, 0)) && !e.contains(&(0, 4)));
        assert_eq!(e.len(), 2 * (4 + 3 + 2));
    }

    #[test]
    fn keyframe_selection() {
        let cfg = KeyframeConfig::default();
        let s = |mean_flow, overlap| FrameStats { mean_flow, overlap };
        assert!(!select_keyframe(&s(0.0, 1.0), &cfg));
        assert!(select_keyframe(&s(20.0, 1.0), &cfg));
        assert!(select_keyframe(&s(0.0, 0.5), &cfg));
        assert!(!select_keyframe(&s(8.0, 0.85), &cfg));
        assert_eq!(covisible_overlap(&[1, 2, 3, 4], &[2, 4, 9]), 0.5);
    }

    #[test]
    fn mean_flow_of_pure_shift() {
        let grid = DepthGrid::new(16, 16, 4);
        let samples = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.pixel(k);
                Some(FlowSample {
                    target: [x as f64 + 3.0, y as f64 + 4.0],
                    variance: [1.0; 2],
                })
            })
            .collect();
        let c = FlowCorrespondence {
            source: 0,
            target: 1,
            stride: 4,
            samples,
        };
        assert!((c.mean_flow(16, 16) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(1.0, 9), "1");
        assert_eq!(format_significant(0.1, 9), "0.1");
        assert_eq!(format_significant(1305031102.175304, 9), "1.3050311e+09");
        assert_eq!(format_significant(-0.123456789123, 9), "-0.123456789");
        assert_eq!(format_significant(1.5e-7, 9), "1.5e-07");
        assert_eq!(format_significant(123.456, 9), "123.456");
        assert_eq!(format_significant(0.0, 9), "0");
    }

    #[test]
    fn tum_export_layout() {
        let p = SE3Pose::new(Quat::identity(), Vec3::new(1.0, 2.0, 3.0));
        let mut buf = Vec::new();
        write_tum_trajectory(&mut buf, &[(0.5, p)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0.500000 1 2 3 0 0 0 1\n");
    }
}
