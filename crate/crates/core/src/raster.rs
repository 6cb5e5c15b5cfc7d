//! CPU splatting renderer with analytic backward pass.
//!
//! The screen-space kernel is a Gaussian truncated at three standard deviations
//! and corrected so that both its value and slope reach zero there. Every pixel outside
//! a splat's 3σ ellipse therefore receives exactly nothing from it, which lets
//! the tiled path cull by 3σ and still agree bit-for-bit with the per-pixel
//! reference.

use rayon::prelude::*;

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussian::Splat;
use crate::image::Image;
use crate::linalg::{quat_to_matrix_backward, Mat3, Quat, Vec3};
use crate::real::Real;
use crate::se3::{SE3Pose, Twist};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const MIN_COV_DET: f64 = 1e-12;
/// Squared Mahalanobis cutoff (3σ).
pub const CUTOFF_M: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub color: Image<T>,
    pub depth: Image<T>,
    pub alpha: Image<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            color: Image::zeros(width, height, 3),
            depth: Image::zeros(width, height, 1),
            alpha: Image::zeros(width, height, 1),
        }
    }
}

/// Gradient with respect to one rendered splat. `opacity` is the adjoint of the
/// effective opacity probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGrad<T> {
    pub mean: Vec3<T>,
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
    pub opacity: T,
    pub color: Vec3<T>,
}

impl<T: Real> Default for SplatGrad<T> {
    fn default() -> Self {
        Self {
            mean: Vec3::zeros(),
            rotation: Quat::zeros(),
            log_scale: Vec3::zeros(),
            opacity: T::zero(),
            color: Vec3::zeros(),
        }
    }
}

impl<T: Real> SplatGrad<T> {
    pub fn accumulate(&mut self, o: &Self) {
        self.mean += o.mean;
        self.rotation += o.rotation;
        self.log_scale += o.log_scale;
        self.opacity += o.opacity;
        self.color += o.color;
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            mean: self.mean.scale(s),
            rotation: self.rotation.scale(s),
            log_scale: self.log_scale.scale(s),
            opacity: self.opacity * s,
            color: self.color.scale(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad<T> {
    pub splats: Vec<SplatGrad<T>>,
    /// Screen-space mean gradient in pixels, used for densification statistics.
    pub mean2d: Vec<[T; 2]>,
    /// Gradient with respect to a left twist perturbation `exp(δ)·pose` of the
    /// camera-to-world pose.
    pub pose: Twist<T>,
}

/// Kernel value and derivative with respect to the squared Mahalanobis distance.
#[inline]
fn kernel<T: Real>(m: T) -> (T, T) {
    let cut = T::c(CUTOFF_M);
    if !(m < cut) {
        return (T::zero(), T::zero());
    }
    // exp(-m/2) minus its tangent line at the cutoff, rescaled to 1 at m = 0.
    let f = T::c((-0.5 * CUTOFF_M).exp());
    let norm = T::one() / (T::one() - f - T::half() * f * cut);
    let e = (-T::half() * m).exp();
    ((e - f + T::half() * f * (m - cut)) * norm, T::half() * (f - e) * norm)
}

/// Camera-space projection of a single splat.
#[derive(Debug, Clone, Copy)]
struct Projected<T> {
    index: usize,
    u: T,
    v: T,
    depth: T,
    /// Inverse 2D covariance (a, b, c) for `[[a, b], [b, c]]`.
    conic: [T; 3],
    opacity: T,
    color: Vec3<T>,
    /// Inclusive pixel bounding box.
    bbox: [usize; 4],
}

fn world_to_camera<T: Real>(pose: &SE3Pose<T>) -> (Mat3<T>, Vec3<T>) {
    (pose.rotation.normalized().to_matrix().transpose(), pose.translation)
}

fn covariance3<T: Real>(s: &Splat<T>) -> (Mat3<T>, Mat3<T>) {
    let r = s.rotation.normalized().to_matrix();
    let m = r.mul_mat(&Mat3::from_diagonal(s.log_scale.map(|v| v.exp())));
    (m.mul_mat(&m.transpose()), m)
}

/// `J·W` for camera-space point `x`.
fn projection_jacobian<T: Real>(cam: &PinholeCamera<T>, x: Vec3<T>, w: &Mat3<T>) -> ([T; 6], [T; 6]) {
    let iz = T::one() / x.z;
    let j = [
        cam.fx * iz,
        T::zero(),
        -cam.fx * x.x * iz * iz,
        T::zero(),
        cam.fy * iz,
        -cam.fy * x.y * iz * iz,
    ];
    let mut t = [T::zero(); 6];
    for r in 0..2 {
        for c in 0..3 {
            t[r * 3 + c] = (0..3).map(|k| j[r * 3 + k] * w.m[k][c]).sum();
        }
    }
    (j, t)
}

/// `T Σ Tᵀ` as (p, q, r) for `[[p, q], [q, r]]`.
fn project_cov<T: Real>(t: &[T; 6], sigma: &Mat3<T>) -> [T; 3] {
    let mut ts = [T::zero(); 6];
    for r in 0..2 {
        for c in 0..3 {
            ts[r * 3 + c] = (0..3).map(|k| t[r * 3 + k] * sigma.m[k][c]).sum();
        }
    }
    let e = |r: usize, c: usize| -> T { (0..3).map(|k| ts[r * 3 + k] * t[c * 3 + k]).sum() };
    [e(0, 0), e(0, 1), e(1, 1)]
}

fn project<T: Real>(
    index: usize,
    s: &Splat<T>,
    cam: &PinholeCamera<T>,
    w: &Mat3<T>,
    origin: Vec3<T>,
) -> Option<Projected<T>> {
    let x = w.mul_vec(s.mean - origin);
    if !(x.z > cam.near) {
        return None;
    }
    let (sigma, _) = covariance3(s);
    let (_, t) = projection_jacobian(cam, x, w);
    let [p, q, r] = project_cov(&t, &sigma);
    let det = p * r - q * q;
    if !(det >= T::c(MIN_COV_DET)) {
        return None;
    }
    let (u, v) = cam.project(x);
    let mid = T::half() * (p + r);
    let lambda = mid + (mid * mid - det).max(T::zero()).sqrt();
    let radius = T::c(3.0) * lambda.sqrt() + T::one();
    let lo_x = (u - radius).floor();
    let hi_x = (u + radius).ceil();
    let lo_y = (v - radius).floor();
    let hi_y = (v + radius).ceil();
    let wmax = T::from_usize_lossy(cam.width - 1);
    let hmax = T::from_usize_lossy(cam.height - 1);
    if hi_x < T::zero() || hi_y < T::zero() || lo_x > wmax || lo_y > hmax || !radius.is_finite() {
        return None;
    }
    let clampi = |v: T, hi: T| v.max(T::zero()).min(hi).to_f64_lossy() as usize;
    Some(Projected {
        index,
        u,
        v,
        depth: x.z,
        conic: [r / det, -q / det, p / det],
        opacity: s.opacity,
        color: s.color,
        bbox: [clampi(lo_x, wmax), clampi(lo_y, hmax), clampi(hi_x, wmax), clampi(hi_y, hmax)],
    })
}

fn project_all<T: Real>(splats: &[Splat<T>], cam: &PinholeCamera<T>, pose: &SE3Pose<T>) -> Vec<Projected<T>> {
    let (w, origin) = world_to_camera(pose);
    let mut out: Vec<Projected<T>> = splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project(i, s, cam, &w, origin))
        .collect();
    out.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    out
}

/// Alpha of splat `g` at pixel `(x, y)`; also returns the raw kernel pieces.
#[inline]
fn splat_alpha<T: Real>(g: &Projected<T>, x: usize, y: usize) -> Option<(T, T, T, [T; 2], bool)> {
    let dx = T::from_usize_lossy(x) - g.u;
    let dy = T::from_usize_lossy(y) - g.v;
    let [a, b, c] = g.conic;
    let m = a * dx * dx + T::two() * b * dx * dy + c * dy * dy;
    let (k, dk) = kernel(m);
    if k <= T::zero() {
        return None;
    }
    let raw = g.opacity * k;
    let cap = T::c(ALPHA_MAX);
    let clamped = raw > cap;
    let alpha = if clamped { cap } else { raw };
    if alpha <= T::zero() {
        return None;
    }
    Some((alpha, k, dk, [dx, dy], clamped))
}

#[derive(Debug, Clone, Copy)]
struct PixelOut<T> {
    color: Vec3<T>,
    depth: T,
    transmittance: T,
}

/// Front-to-back compositing of `list` (indices into `proj`, depth ordered) at one pixel.
#[inline]
fn shade_pixel<T: Real>(
    proj: &[Projected<T>],
    list: impl Iterator<Item = usize>,
    x: usize,
    y: usize,
    background: Vec3<T>,
) -> PixelOut<T> {
    let mut tr = T::one();
    let mut color = Vec3::zeros();
    let mut depth = T::zero();
    let stop = T::c(MIN_TRANSMITTANCE);
    for gi in list {
        let g = &proj[gi];
        let Some((alpha, ..)) = splat_alpha(g, x, y) else { continue };
        let next = tr * (T::one() - alpha);
        if next < stop {
            break;
        }
        let w = alpha * tr;
        color += g.color.scale(w);
        depth += w * g.depth;
        tr = next;
    }
    PixelOut {
        color: color + background.scale(tr),
        depth,
        transmittance: tr,
    }
}

fn write_pixel<T: Real>(out: &mut RenderOutput<T>, x: usize, y: usize, p: &PixelOut<T>) {
    for c in 0..3 {
        out.color.set(x, y, c, p.color[c]);
    }
    out.depth.set(x, y, 0, p.depth);
    out.alpha.set(x, y, 0, T::one() - p.transmittance);
}

fn tile_grid(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(TILE), height.div_ceil(TILE))
}

/// Per-tile lists of projected splat indices, in depth order.
fn bin_tiles<T: Real>(proj: &[Projected<T>], width: usize, height: usize) -> Vec<Vec<usize>> {
    let (tx, ty) = tile_grid(width, height);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (i, g) in proj.iter().enumerate() {
        let [x0, y0, x1, y1] = g.bbox;
        for ty_ in y0 / TILE..=y1 / TILE {
            for tx_ in x0 / TILE..=x1 / TILE {
                tiles[ty_ * tx + tx_].push(i);
            }
        }
    }
    tiles
}

fn tile_pixels(tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, _) = tile_grid(width, height);
    let x0 = (tile % tx) * TILE;
    let y0 = (tile / tx) * TILE;
    (y0..(y0 + TILE).min(height)).flat_map(move |y| (x0..(x0 + TILE).min(width)).map(move |x| (x, y)))
}

struct ForwardCache<T> {
    splats: Vec<Splat<T>>,
    camera: PinholeCamera<T>,
    pose: SE3Pose<T>,
    background: Vec3<T>,
    projected: Vec<Projected<T>>,
    tiles: Vec<Vec<usize>>,
}

/// Renderer holding the state of its last forward pass for [`Renderer::backward`].
#[derive(Default)]
pub struct Renderer<T> {
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> Renderer<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(
        &mut self,
        splats: &[Splat<T>],
        camera: &PinholeCamera<T>,
        pose: &SE3Pose<T>,
        background: Vec3<T>,
    ) -> RenderOutput<T> {
        let projected = project_all(splats, camera, pose);
        let (w, h) = (camera.width, camera.height);
        let tiles = bin_tiles(&projected, w, h);
        let shaded: Vec<Vec<(usize, usize, PixelOut<T>)>> = tiles
            .par_iter()
            .enumerate()
            .map(|(ti, list)| {
                tile_pixels(ti, w, h)
                    .map(|(x, y)| (x, y, shade_pixel(&projected, list.iter().copied(), x, y, background)))
                    .collect()
            })
            .collect();
        let mut out = RenderOutput::new(w, h);
        for tile in &shaded {
            for (x, y, p) in tile {
                write_pixel(&mut out, *x, *y, p);
            }
        }
        self.cache = Some(ForwardCache {
            splats: splats.to_vec(),
            camera: *camera,
            pose: *pose,
            background,
            projected,
            tiles,
        });
        out
    }

    /// Gradients of `Σ grad_color·color + grad_depth·depth` for the cached forward pass.
    pub fn backward(&self, grad_color: &Image<T>, grad_depth: &Image<T>) -> Result<RenderGrad<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        let (w, h) = (cache.camera.width, cache.camera.height);
        if grad_color.width != w || grad_color.height != h || grad_color.channels != 3 {
            return Err(crate::error::shape_err(format!("{w}x{h}x3"), grad_color.shape_str()));
        }
        if grad_depth.width != w || grad_depth.height != h || grad_depth.channels != 1 {
            return Err(crate::error::shape_err(format!("{w}x{h}x1"), grad_depth.shape_str()));
        }
        let proj = &cache.projected;
        let per_tile: Vec<Vec<(usize, ScreenGrad<T>)>> = cache
            .tiles
            .par_iter()
            .enumerate()
            .map(|(ti, list)| {
                let mut acc = vec![ScreenGrad::default(); list.len()];
                let mut contrib: Vec<(usize, T, T, T, [T; 2], bool, T)> = Vec::new();
                for (x, y) in tile_pixels(ti, w, h) {
                    let gc = Vec3::new(grad_color.get(x, y, 0), grad_color.get(x, y, 1), grad_color.get(x, y, 2));
                    let gd = grad_depth.get(x, y, 0);
                    if gc.max_abs() == T::zero() && gd == T::zero() {
                        continue;
                    }
                    pixel_backward(proj, list, x, y, cache.background, gc, gd, &mut contrib, &mut acc);
                }
                list.iter().copied().zip(acc).collect()
            })
            .collect();

        let mut screen = vec![ScreenGrad::default(); proj.len()];
        for tile in per_tile {
            for (i, g) in tile {
                screen[i].add(&g);
            }
        }

        let (wmat, origin) = world_to_camera(&cache.pose);
        let mut splats = vec![SplatGrad::default(); cache.splats.len()];
        let mut mean2d = vec![[T::zero(); 2]; cache.splats.len()];
        for (g, sg) in proj.iter().zip(&screen) {
            let s = &cache.splats[g.index];
            splats[g.index] = splat_backward(s, &cache.camera, &wmat, origin, sg);
            mean2d[g.index] = [sg.u, sg.v];
        }

        // Moving the camera by exp(δ) is moving the world by exp(-δ).
        let mut rot = Vec3::zeros();
        let mut trans = Vec3::zeros();
        for (s, g) in cache.splats.iter().zip(&splats) {
            trans -= g.mean;
            rot -= s.mean.cross(g.mean);
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = T::one();
                let dq = Quat::pure(e) * s.rotation;
                rot[i] -= T::half() * dq.dot(g.rotation);
            }
        }
        Ok(RenderGrad {
            splats,
            mean2d,
            pose: Twist::new(rot, trans),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ScreenGrad<T> {
    u: T,
    v: T,
    conic: [T; 3],
    opacity: T,
    color: Vec3<T>,
    depth: T,
}

impl<T: Real> Default for ScreenGrad<T> {
    fn default() -> Self {
        Self {
            u: T::zero(),
            v: T::zero(),
            conic: [T::zero(); 3],
            opacity: T::zero(),
            color: Vec3::zeros(),
            depth: T::zero(),
        }
    }
}

impl<T: Real> ScreenGrad<T> {
    fn add(&mut self, o: &Self) {
        self.u += o.u;
        self.v += o.v;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn pixel_backward<T: Real>(
    proj: &[Projected<T>],
    list: &[usize],
    x: usize,
    y: usize,
    background: Vec3<T>,
    gc: Vec3<T>,
    gd: T,
    contrib: &mut Vec<(usize, T, T, T, [T; 2], bool, T)>,
    acc: &mut [ScreenGrad<T>],
) {
    // Replay the forward pass to recover the contributing splats.
    contrib.clear();
    let mut tr = T::one();
    let stop = T::c(MIN_TRANSMITTANCE);
    for (slot, &gi) in list.iter().enumerate() {
        let Some((alpha, k, dk, d, clamped)) = splat_alpha(&proj[gi], x, y) else { continue };
        let next = tr * (T::one() - alpha);
        if next < stop {
            break;
        }
        contrib.push((slot, alpha, k, dk, d, clamped, tr));
        tr = next;
    }
    let mut after_c = background.scale(tr);
    let mut after_d = T::zero();
    for &(slot, alpha, k, dk, d, clamped, t_i) in contrib.iter().rev() {
        let g = &proj[list[slot]];
        let w = alpha * t_i;
        let a = &mut acc[slot];
        a.color += gc.scale(w);
        a.depth += gd * w;
        let inv = T::one() / (T::one() - alpha);
        let g_alpha = gc.dot(g.color.scale(t_i) - after_c.scale(inv)) + gd * (g.depth * t_i - after_d * inv);
        after_c += g.color.scale(w);
        after_d += g.depth * w;
        if clamped {
            continue;
        }
        a.opacity += g_alpha * k;
        let g_m = g_alpha * g.opacity * dk;
        let [ca, cb, cc] = g.conic;
        let [dx, dy] = d;
        // m = a dx² + 2 b dx dy + c dy², d = pixel - mean
        a.u -= g_m * T::two() * (ca * dx + cb * dy);
        a.v -= g_m * T::two() * (cb * dx + cc * dy);
        a.conic[0] += g_m * dx * dx;
        a.conic[1] += g_m * T::two() * dx * dy;
        a.conic[2] += g_m * dy * dy;
    }
}

fn splat_backward<T: Real>(
    s: &Splat<T>,
    cam: &PinholeCamera<T>,
    w: &Mat3<T>,
    origin: Vec3<T>,
    sg: &ScreenGrad<T>,
) -> SplatGrad<T> {
    let x = w.mul_vec(s.mean - origin);
    let (sigma, m) = covariance3(s);
    let (j, t) = projection_jacobian(cam, x, w);
    let [p, q, r] = project_cov(&t, &sigma);
    let det = p * r - q * q;
    let conic = [r / det, -q / det, p / det];

    // conic = Σ2⁻¹: G_Σ2 = -A G_A A with G_A symmetric (off-diagonal split in half).
    let ga = [[sg.conic[0], T::half() * sg.conic[1]], [T::half() * sg.conic[1], sg.conic[2]]];
    let am = [[conic[0], conic[1]], [conic[1], conic[2]]];
    let mut tmp = [[T::zero(); 2]; 2];
    let mut gs2 = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            tmp[i][k] = (0..2).map(|l| am[i][l] * ga[l][k]).sum();
        }
    }
    for i in 0..2 {
        for k in 0..2 {
            gs2[i][k] = -(0..2).map(|l| tmp[i][l] * am[l][k]).sum::<T>();
        }
    }

    // Σ2 = T Σ3 Tᵀ
    let mut g_sigma = Mat3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            g_sigma.m[a][b] = (0..2)
                .flat_map(|i| (0..2).map(move |k| (i, k)))
                .map(|(i, k)| t[i * 3 + a] * gs2[i][k] * t[k * 3 + b])
                .sum();
        }
    }
    // G_T = 2 G_Σ2 T Σ3
    let mut ts = [T::zero(); 6];
    for i in 0..2 {
        for c in 0..3 {
            ts[i * 3 + c] = (0..3).map(|k| t[i * 3 + k] * sigma.m[k][c]).sum();
        }
    }
    let mut g_t = [T::zero(); 6];
    for i in 0..2 {
        for c in 0..3 {
            g_t[i * 3 + c] = T::two() * (0..2).map(|k| gs2[i][k] * ts[k * 3 + c]).sum::<T>();
        }
    }
    // T = J W, only J depends on the point
    let mut g_j = [T::zero(); 6];
    for i in 0..2 {
        for k in 0..3 {
            g_j[i * 3 + k] = (0..3).map(|c| g_t[i * 3 + c] * w.m[k][c]).sum();
        }
    }
    let _ = j;
    let iz = T::one() / x.z;
    let iz2 = iz * iz;
    let mut g_x = Vec3::new(
        sg.u * cam.fx * iz - g_j[2] * cam.fx * iz2,
        sg.v * cam.fy * iz - g_j[5] * cam.fy * iz2,
        sg.depth,
    );
    g_x.z += -sg.u * cam.fx * x.x * iz2 - sg.v * cam.fy * x.y * iz2
        - g_j[0] * cam.fx * iz2
        - g_j[4] * cam.fy * iz2
        + g_j[2] * T::two() * cam.fx * x.x * iz2 * iz
        + g_j[5] * T::two() * cam.fy * x.y * iz2 * iz;
    let g_mean = w.transpose().mul_vec(g_x);

    // Σ3 = M Mᵀ, M = R diag(s)
    let g_m = g_sigma.add_mat(&g_sigma.transpose()).mul_mat(&m);
    let scale = s.log_scale.map(|v| v.exp());
    let rmat = s.rotation.normalized().to_matrix();
    let g_r = g_m.mul_mat(&Mat3::from_diagonal(scale));
    let mut g_ls = Vec3::zeros();
    for i in 0..3 {
        g_ls[i] = (0..3).map(|row| g_m.m[row][i] * rmat.m[row][i]).sum::<T>() * scale[i];
    }
    SplatGrad {
        mean: g_mean,
        rotation: quat_to_matrix_backward(s.rotation, &g_r),
        log_scale: g_ls,
        opacity: sg.opacity,
        color: sg.color,
    }
}

/// Tiled forward render without retaining a cache.
pub fn render<T: Real>(
    splats: &[Splat<T>],
    camera: &PinholeCamera<T>,
    pose: &SE3Pose<T>,
    background: Vec3<T>,
) -> RenderOutput<T> {
    Renderer::new().forward(splats, camera, pose, background)
}

/// Untiled per-pixel render over every projected splat; the correctness oracle
/// for [`render`].
pub fn render_reference<T: Real>(
    splats: &[Splat<T>],
    camera: &PinholeCamera<T>,
    pose: &SE3Pose<T>,
    background: Vec3<T>,
) -> RenderOutput<T> {
    let proj = project_all(splats, camera, pose);
    let mut out = RenderOutput::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let p = shade_pixel(&proj, 0..proj.len(), x, y, background);
            write_pixel(&mut out, x, y, &p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::se3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    fn cam(n: usize) -> PinholeCamera<f64> {
        PinholeCamera::new(n as f64, n as f64, (n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0, n, n).unwrap()
    }

    fn random_splats(rng: &mut ChaCha8Rng, n: usize) -> Vec<Splat<f64>> {
        (0..n)
            .map(|_| Splat {
                mean: v(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.5..3.0)),
                rotation: Quat::new(1.0, rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
                log_scale: v(rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6)),
                opacity: rng.random_range(0.2..0.9),
                color: v(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cam(20);
        let bg = v(0.1, 0.2, 0.3);
        let out = render(&[], &c, &SE3Pose::identity(), bg);
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(out.alpha.get(x, y, 0), 0.0);
                assert_eq!(out.color.get(x, y, 2), 0.3);
            }
        }
    }

    #[test]
    fn saturated_splat_on_axis() {
        let c = PinholeCamera::new(20.0, 20.0, 10.0, 10.0, 21, 21).unwrap();
        let s = Splat {
            mean: v(0.0, 0.0, 2.0),
            rotation: Quat::identity(),
            log_scale: v(-2.0, -2.0, -2.0),
            opacity: 1.0,
            color: v(1.0, 0.0, 0.0),
        };
        let bg = v(0.0, 0.0, 1.0);
        let out = render(&[s], &c, &SE3Pose::identity(), bg);
        assert!((out.alpha.get(10, 10, 0) - 0.99).abs() < 1e-12);
        assert!((out.color.get(10, 10, 0) - 0.99).abs() < 1e-12);
        assert!((out.color.get(10, 10, 2) - 0.01).abs() < 1e-12);
        assert!((out.depth.get(10, 10, 0) - 0.99 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn tiled_matches_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut splats = random_splats(&mut rng, 60);
        for s in splats.iter_mut().take(10) {
            s.log_scale = s.log_scale.map(|l| l - 1.5);
        }
        let c = PinholeCamera::new(40.0, 42.0, 23.3, 17.9, 50, 37).unwrap();
        let pose = se3_exp(&Twist::from_array([0.02, -0.05, 0.01, 0.05, 0.02, -0.1]));
        let a = render(&splats, &c, &pose, v(0.3, 0.3, 0.3));
        let b = render_reference(&splats, &c, &pose, v(0.3, 0.3, 0.3));
        assert_eq!(a, b);
    }

    #[test]
    fn two_overlapping_match_manual_compositing() {
        let c = cam(16);
        let near = Splat {
            mean: v(0.0, 0.0, 2.0),
            rotation: Quat::identity(),
            log_scale: v(-1.5, -1.5, -1.5),
            opacity: 0.6,
            color: v(1.0, 0.0, 0.0),
        };
        let far = Splat { mean: v(0.05, 0.0, 3.0), color: v(0.0, 1.0, 0.0), opacity: 0.7, ..near };
        let bg = v(0.0, 0.0, 0.5);
        let out = render(&[far, near], &c, &SE3Pose::identity(), bg);
        // Direct evaluation of the projected covariances for isotropic splats.
        let alpha_of = |s: &Splat<f64>, px: f64, py: f64| {
            // Σ2 = σ² J Jᵀ with the perspective Jacobian at the mean.
            let sig2 = (2.0 * s.log_scale.x).exp();
            let (x, y, z) = (s.mean.x, s.mean.y, s.mean.z);
            let j0 = [c.fx / z, 0.0, -c.fx * x / (z * z)];
            let j1 = [0.0, c.fy / z, -c.fy * y / (z * z)];
            let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let (p, q, r) = (sig2 * dot(j0, j0), sig2 * dot(j0, j1), sig2 * dot(j1, j1));
            let det = p * r - q * q;
            let (u, vv) = c.project(s.mean);
            let (dx, dy) = (px - u, py - vv);
            let m = (r * dx * dx - 2.0 * q * dx * dy + p * dy * dy) / det;
            if m >= 9.0 {
                return 0.0;
            }
            let f = (-4.5f64).exp();
            let k = ((-0.5 * m).exp() - f + 0.5 * f * (m - 9.0)) / (1.0 - 5.5 * f);
            (s.opacity * k).min(0.99)
        };
        for (px, py) in [(7usize, 7usize), (9, 8), (3, 12)] {
            let a1 = alpha_of(&near, px as f64, py as f64);
            let a2 = alpha_of(&far, px as f64, py as f64);
            let r = a1 * 1.0 + (1.0 - a1) * a2 * 0.0 + (1.0 - a1) * (1.0 - a2) * bg.x;
            let g = (1.0 - a1) * a2;
            let b = (1.0 - a1) * (1.0 - a2) * 0.5;
            assert!((out.color.get(px, py, 0) - r).abs() < 1e-10);
            assert!((out.color.get(px, py, 1) - g).abs() < 1e-10);
            assert!((out.color.get(px, py, 2) - b).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let splats = random_splats(&mut rng, 30);
        let mut rev = splats.clone();
        rev.reverse();
        let c = cam(32);
        assert_eq!(
            render(&splats, &c, &SE3Pose::identity(), Vec3::zeros()),
            render(&rev, &c, &SE3Pose::identity(), Vec3::zeros())
        );
    }

    #[test]
    fn alpha_grows_with_more_splats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let splats = random_splats(&mut rng, 25);
        let c = cam(32);
        let mut prev = render(&[], &c, &SE3Pose::identity(), Vec3::zeros()).alpha;
        for n in 1..=splats.len() {
            let a = render(&splats[..n], &c, &SE3Pose::identity(), Vec3::zeros()).alpha;
            for (p, q) in prev.data.iter().zip(&a.data) {
                assert!(*q >= *p - 1e-15);
            }
            prev = a;
        }
    }

    #[test]
    fn behind_camera_and_degenerate_are_skipped() {
        let c = cam(16);
        let behind = Splat {
            mean: v(0.0, 0.0, -2.0),
            rotation: Quat::identity(),
            log_scale: v(-1.0, -1.0, -1.0),
            opacity: 0.9,
            color: v(1.0, 1.0, 1.0),
        };
        let tiny = Splat { mean: v(0.0, 0.0, 2.0), log_scale: v(-30.0, -30.0, -30.0), ..behind };
        let out = render(&[behind, tiny], &c, &SE3Pose::identity(), Vec3::zeros());
        assert!(out.alpha.data.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn backward_without_forward_fails() {
        let r = Renderer::<f64>::new();
        let e = r.backward(&Image::zeros(4, 4, 3), &Image::zeros(4, 4, 1));
        assert_eq!(e.unwrap_err(), Error::MissingForwardCache);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let splats = random_splats(&mut rng, 10);
        let c = cam(32);
        let mut r = Renderer::new();
        r.forward(&splats, &c, &SE3Pose::identity(), Vec3::zeros());
        let g = r.backward(&Image::zeros(32, 32, 3), &Image::zeros(32, 32, 1)).unwrap();
        assert!(g.splats.iter().all(|s| *s == SplatGrad::default()));
        assert_eq!(g.pose.to_array(), [0.0; 6]);
    }

    #[test]
    fn isolated_color_gradient_is_weight_map() {
        let c = cam(24);
        let s = Splat {
            mean: v(0.0, 0.0, 2.0),
            rotation: Quat::identity(),
            log_scale: v(-1.8, -1.8, -1.8),
            opacity: 0.7,
            color: v(0.2, 0.5, 0.9),
        };
        let mut r = Renderer::new();
        let out = r.forward(&[s], &c, &SE3Pose::identity(), Vec3::zeros());
        let mut gc = Image::zeros(24, 24, 3);
        for (i, x) in gc.data.iter_mut().enumerate() {
            *x = ((i * 37) % 11) as f64 / 11.0 - 0.4;
        }
        let g = r.backward(&gc, &Image::zeros(24, 24, 1)).unwrap();
        for ch in 0..3 {
            let expect: f64 = (0..24 * 24).map(|p| out.alpha.data[p] * gc.data[p * 3 + ch]).sum();
            assert!((g.splats[0].color[ch] - expect).abs() < 1e-12);
        }
    }

    /// Central differences of a linear probe of the render against the analytic backward.
    pub(crate) fn fd_sweep(splats: &[Splat<f64>], c: &PinholeCamera<f64>, pose: &SE3Pose<f64>, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (c.width, c.height);
        let mut gc = Image::zeros(w, h, 3);
        let mut gd = Image::zeros(w, h, 1);
        for x in gc.data.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in gd.data.iter_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
        let bg = v(0.2, 0.1, 0.4);
        let loss = |ss: &[Splat<f64>], p: &SE3Pose<f64>| {
            let o = render(ss, c, p, bg);
            o.color.data.iter().zip(&gc.data).map(|(a, b)| a * b).sum::<f64>()
                + o.depth.data.iter().zip(&gd.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut r = Renderer::new();
        r.forward(splats, c, pose, bg);
        let g = r.backward(&gc, &gd).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut cmp = |a: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-2));
            if err > 1e-3 {
                eprintln!("{what}: analytic {a} vs fd {fd}");
            }
            worst = worst.max(err);
        };
        for i in 0..splats.len() {
            let mut params = |edit: &dyn Fn(&mut Splat<f64>, f64), a: f64, what: &str| {
                let mut p = splats.to_vec();
                edit(&mut p[i], h);
                let mut m = splats.to_vec();
                edit(&mut m[i], -h);
                cmp(a, loss(&p, pose), loss(&m, pose), what);
            };
            let gi = g.splats[i];
            for k in 0..3 {
                params(&|s, d| s.mean[k] += d, gi.mean[k], "mean");
                params(&|s, d| s.log_scale[k] += d, gi.log_scale[k], "scale");
                params(&|s, d| s.color[k] += d, gi.color[k], "color");
            }
            for k in 0..4 {
                params(
                    &|s, d| {
                        let mut a = s.rotation.to_array();
                        a[k] += d;
                        s.rotation = Quat::from_array(a);
                    },
                    gi.rotation.to_array()[k],
                    "rotation",
                );
            }
            params(&|s, d| s.opacity += d, gi.opacity, "opacity");
        }
        let ga = g.pose.to_array();
        for k in 0..6 {
            let mut d = [0.0; 6];
            d[k] = h;
            let plus = se3_exp(&Twist::from_array(d)).compose(pose);
            d[k] = -h;
            let minus = se3_exp(&Twist::from_array(d)).compose(pose);
            cmp(ga[k], loss(splats, &plus), loss(splats, &minus), "pose");
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let splats = random_splats(&mut rng, 5);
        let pose = se3_exp(&Twist::from_array([0.03, -0.02, 0.01, 0.05, -0.02, 0.1]));
        let worst = fd_sweep(&splats, &cam(32), &pose, 3);
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn twenty_splat_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let splats = random_splats(&mut rng, 20);
        let pose = se3_exp(&Twist::from_array([-0.02, 0.04, 0.0, -0.03, 0.01, 0.05]));
        let worst = fd_sweep(&splats, &cam(32), &pose, 4);
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn kernel_shape() {
        assert!((kernel(0.0f64).0 - 1.0).abs() < 1e-15);
        assert_eq!(kernel(9.0f64), (0.0, 0.0));
        assert_eq!(kernel(12.0f64), (0.0, 0.0));
        let (k, dk) = kernel(9.0f64 - 1e-6);
        assert!(k.abs() < 1e-12 && dk.abs() < 1e-7);
        let mut prev = 1.0;
        for i in 1..90 {
            let (k, dk) = kernel(i as f64 * 0.1);
            assert!(k < prev && k > 0.0 && dk < 0.0);
            let h = 1e-6;
            let fd = (kernel(i as f64 * 0.1 + h).0 - kernel(i as f64 * 0.1 - h).0) / (2.0 * h);
            assert!((fd - dk).abs() < 1e-8);
            prev = k;
        }
    }

    #[test]
    fn f32_render_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let splats = random_splats(&mut rng, 10);
        let c = cam(32);
        let a = render(&splats, &c, &SE3Pose::identity(), Vec3::zeros());
        let s32: Vec<Splat<f32>> = splats
            .iter()
            .map(|s| Splat {
                mean: s.mean.cast(),
                rotation: s.rotation.cast(),
                log_scale: s.log_scale.cast(),
                opacity: s.opacity as f32,
                color: s.color.cast(),
            })
            .collect();
        let b = render(&s32, &c.cast(), &SE3Pose::identity(), Vec3::zeros());
        for (x, y) in a.color.data.iter().zip(&b.color.data) {
            assert!((*x - *y as f64).abs() < 1e-4);
        }
    }
}
