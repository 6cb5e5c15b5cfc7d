//! Ray-cast synthetic RGB-D sequences with moving boxes, motion blur, exposure
//! changes and full ground truth.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splat4d::camera::PinholeCamera;
use splat4d::image::Image;
use splat4d::linalg::{Quat, Vec3};
use splat4d::se3::SE3Pose;
use splat4d::uncertainty::BinaryMask;

use crate::dataset::{self, timestamp_name};
use crate::error::{read_to_string, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub sequence: SequenceSpec,
    #[serde(default)]
    pub camera: CameraPathSpec,
    #[serde(default)]
    pub exposure: ExposureSpec,
    #[serde(default, rename = "plane")]
    pub planes: Vec<PlaneSpec>,
    #[serde(default, rename = "box")]
    pub boxes: Vec<BoxSpec>,
    #[serde(default, rename = "object")]
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fps() -> f64 {
    30.0
}

/// Camera motion per frame. Positions are camera-to-world translations; the
/// camera looks along +z with y pointing down.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPathSpec {
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    /// Radians per frame about the world y axis.
    pub yaw_rate: f64,
    /// Radians per frame about the camera x axis.
    pub pitch_rate: f64,
    /// Standard deviation of a per-frame positional jitter, meters.
    pub shake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExposureSpec {
    /// Share of the inter-frame interval the shutter stays open.
    pub fraction: f64,
    /// Sharp renders averaged per blurred frame.
    pub samples: usize,
    /// Log gain shared by all frames.
    pub gain: f64,
    /// Amplitude of a sinusoidal per-frame log-gain variation.
    pub gain_swing: f64,
    /// Period of that variation in frames.
    pub gain_period: f64,
    pub bias: f64,
}

impl Default for ExposureSpec {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            samples: 16,
            gain: 0.0,
            gain_swing: 0.0,
            gain_period: 8.0,
            bias: 0.0,
        }
    }
}

/// Smooth procedural color: a base color plus three octaves of oriented
/// sinusoids per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSpec {
    pub base: [f64; 3],
    pub amplitude: f64,
    /// Longest wavelength, meters.
    pub period: f64,
    pub seed: u64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            base: [0.5, 0.5, 0.5],
            amplitude: 0.3,
            period: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default)]
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub texture: TextureSpec,
}

/// A box moving linearly from `start` to `end` over the sequence while
/// spinning about its vertical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub size: [f64; 3],
    pub start: [f64; 3],
    pub end: [f64; 3],
    /// Total rotation over the sequence, radians.
    #[serde(default)]
    pub spin: f64,
    /// First and last frame (inclusive) in which the object exists.
    #[serde(default)]
    pub visible: Option<[usize; 2]>,
    #[serde(default)]
    pub texture: TextureSpec,
}

fn v3(a: [f64; 3]) -> Vec3<f64> {
    Vec3::from_array(a)
}

fn finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| CliError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::InvalidSpec(m.to_string()));
        let s = &self.sequence;
        if s.width == 0 || s.height == 0 {
            return bad("image size must be nonzero");
        }
        if s.frames == 0 {
            return bad("sequence needs at least one frame");
        }
        if !(s.fps > 0.0 && s.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !(s.fx > 0.0 && s.fy.unwrap_or(s.fx) > 0.0) {
            return bad("focal lengths must be positive");
        }
        let c = &self.camera;
        if !finite(&c.start) || !finite(&c.velocity) || !finite(&[c.yaw_rate, c.pitch_rate]) || !(c.shake >= 0.0) {
            return bad("camera path must be finite with non-negative shake");
        }
        let e = &self.exposure;
        if !(0.0..=1.0).contains(&e.fraction) {
            return bad("exposure fraction must lie in [0, 1]");
        }
        if e.samples == 0 {
            return bad("exposure needs at least one sample");
        }
        if !(e.gain_period > 0.0) || !finite(&[e.gain, e.gain_swing, e.bias]) {
            return bad("exposure gain script must be finite with a positive period");
        }
        if self.planes.is_empty() && self.boxes.is_empty() && self.objects.is_empty() {
            return bad("scene has no geometry");
        }
        let textures = self
            .planes
            .iter()
            .map(|p| &p.texture)
            .chain(self.boxes.iter().map(|b| &b.texture))
            .chain(self.objects.iter().map(|o| &o.texture));
        for t in textures {
            if !t.base.iter().all(|c| (0.0..=1.0).contains(c)) || !(t.amplitude >= 0.0) || !(t.period > 0.0) {
                return bad("textures need base colors in [0, 1], non-negative amplitude and positive period");
            }
        }
        for p in &self.planes {
            if !finite(&p.point) || !(v3(p.normal).norm() > 0.0) {
                return bad("planes need a finite point and a nonzero normal");
            }
        }
        for b in &self.boxes {
            if !finite(&b.center) || !b.size.iter().all(|x| *x > 0.0) {
                return bad("boxes need a finite center and positive size");
            }
        }
        for o in &self.objects {
            if !finite(&o.start) || !finite(&o.end) || !o.size.iter().all(|x| *x > 0.0) || !o.spin.is_finite() {
                return bad("objects need finite endpoints and positive size");
            }
            if let Some([a, b]) = o.visible {
                if a > b {
                    return bad("object visibility range is reversed");
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> PinholeCamera<f64> {
        let s = &self.sequence;
        PinholeCamera::new(
            s.fx,
            s.fy.unwrap_or(s.fx),
            s.cx.unwrap_or((s.width as f64 - 1.0) / 2.0),
            s.cy.unwrap_or((s.height as f64 - 1.0) / 2.0),
            s.width,
            s.height,
        )
        .expect("validated intrinsics")
    }
}

struct Texture {
    base: [f64; 3],
    amplitude: f64,
    /// Per channel, per octave: wave vector and phase.
    waves: [[(f64, f64, f64); 3]; 3],
}

const OCTAVE_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
const OCTAVE_SCALES: [f64; 3] = [1.0, 0.55, 0.3];

impl Texture {
    fn new(spec: &TextureSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let waves = std::array::from_fn(|_| {
            std::array::from_fn(|o| {
                let ang = rng.random_range(0.0..TAU);
                let k = TAU / (spec.period * OCTAVE_SCALES[o]);
                (k * ang.cos(), k * ang.sin(), rng.random_range(0.0..TAU))
            })
        });
        Self {
            base: spec.base,
            amplitude: spec.amplitude,
            waves,
        }
    }

    fn color(&self, a: f64, b: f64) -> Vec3<f64> {
        let c: [f64; 3] = std::array::from_fn(|ch| {
            let s: f64 = (0..3)
                .map(|o| {
                    let (ka, kb, ph) = self.waves[ch][o];
                    OCTAVE_WEIGHTS[o] * (ka * a + kb * b + ph).sin()
                })
                .sum();
            (self.base[ch] + self.amplitude * s).clamp(0.0, 1.0)
        });
        Vec3::from_array(c)
    }
}

struct Plane {
    point: Vec3<f64>,
    normal: Vec3<f64>,
    e1: Vec3<f64>,
    e2: Vec3<f64>,
    texture: Texture,
}

impl Plane {
    fn new(spec: &PlaneSpec) -> Self {
        let n = v3(spec.normal).scale(1.0 / v3(spec.normal).norm());
        let helper = if n.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
        let e1 = helper.cross(n);
        let e1 = e1.scale(1.0 / e1.norm());
        Self {
            point: v3(spec.point),
            normal: n,
            e1,
            e2: n.cross(e1),
            texture: Texture::new(&spec.texture),
        }
    }

    fn hit(&self, o: Vec3<f64>, d: Vec3<f64>) -> Option<(f64, Vec3<f64>)> {
        let den = d.dot(self.normal);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = (self.point - o).dot(self.normal) / den;
        if t <= 1e-9 {
            return None;
        }
        let p = o + d.scale(t) - self.point;
        Some((t, self.texture.color(p.dot(self.e1), p.dot(self.e2))))
    }
}

/// Slab test in the box frame; returns the ray parameter and the local hit
/// point on the entry face.
fn box_hit(half: Vec3<f64>, pose: &SE3Pose<f64>, o: Vec3<f64>, d: Vec3<f64>) -> Option<(f64, Vec3<f64>, usize)> {
    let inv = pose.inverse();
    let lo = inv.transform_point(o);
    let ld = inv.rotation.rotate(d);
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if ld[i].abs() < 1e-15 {
            if lo[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let a = (-half[i] - lo[i]) / ld[i];
        let b = (half[i] - lo[i]) / ld[i];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            axis = i;
        }
        t1 = t1.min(far);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    Some((t0, lo + ld.scale(t0), axis))
}

fn face_coords(local: Vec3<f64>, axis: usize) -> (f64, f64) {
    let sign = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    (local[a] + 7.0 * axis as f64 + 3.0 * sign, local[b] - 5.0 * axis as f64)
}

struct SolidBox {
    half: Vec3<f64>,
    pose: SE3Pose<f64>,
    texture: Texture,
}

struct MovingBox {
    half: Vec3<f64>,
    start: Vec3<f64>,
    end: Vec3<f64>,
    spin: f64,
    visible: Option<[usize; 2]>,
    texture: Texture,
}

fn yaw(angle: f64) -> Quat<f64> {
    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), angle)
}

/// Surface hit along a camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Camera-frame depth.
    pub depth: f64,
    pub color: Vec3<f64>,
    pub world: Vec3<f64>,
    /// Index of the moving object hit, if any.
    pub object: Option<usize>,
}

/// The scene with its scripted motion, queryable at continuous frame time.
pub struct Scene {
    pub spec: SceneSpec,
    pub camera: PinholeCamera<f64>,
    planes: Vec<Plane>,
    boxes: Vec<SolidBox>,
    objects: Vec<MovingBox>,
    jitter: Vec<Vec3<f64>>,
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.sequence.seed);
        let jitter = (0..=spec.sequence.frames)
            .map(|_| {
                let mut g = || {
                    // Sum of uniforms, close enough to Gaussian for jitter.
                    (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * (3.0f64 / 4.0).sqrt()
                };
                Vec3::new(g(), g(), g()).scale(spec.camera.shake)
            })
            .collect();
        Ok(Self {
            camera: spec.camera(),
            planes: spec.planes.iter().map(Plane::new).collect(),
            boxes: spec
                .boxes
                .iter()
                .map(|b| SolidBox {
                    half: v3(b.size).scale(0.5),
                    pose: SE3Pose::new(yaw(b.yaw), v3(b.center)),
                    texture: Texture::new(&b.texture),
                })
                .collect(),
            objects: spec
                .objects
                .iter()
                .map(|o| MovingBox {
                    half: v3(o.size).scale(0.5),
                    start: v3(o.start),
                    end: v3(o.end),
                    spin: o.spin,
                    visible: o.visible,
                    texture: Texture::new(&o.texture),
                })
                .collect(),
            jitter,
            spec: spec.clone(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.spec.sequence.frames
    }

    fn progress(&self, tau: f64) -> f64 {
        let n = self.frame_count();
        if n < 2 {
            0.0
        } else {
            tau / (n - 1) as f64
        }
    }

    /// Camera-to-world pose at continuous frame time `tau`.
    pub fn camera_pose(&self, tau: f64) -> SE3Pose<f64> {
        let c = &self.spec.camera;
        let k = (tau.floor().max(0.0) as usize).min(self.jitter.len() - 1);
        let k1 = (k + 1).min(self.jitter.len() - 1);
        let f = tau - k as f64;
        let jitter = self.jitter[k].scale(1.0 - f) + self.jitter[k1].scale(f);
        let rot = yaw(c.yaw_rate * tau) * Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), c.pitch_rate * tau);
        SE3Pose::new(rot, v3(c.start) + v3(c.velocity).scale(tau) + jitter)
    }

    /// World pose of moving object `i` at time `tau`.
    pub fn object_pose(&self, i: usize, tau: f64) -> SE3Pose<f64> {
        let o = &self.objects[i];
        let s = self.progress(tau);
        SE3Pose::new(yaw(o.spin * s), o.start + (o.end - o.start).scale(s))
    }

    pub fn object_visible(&self, i: usize, tau: f64) -> bool {
        match self.objects[i].visible {
            None => true,
            Some([a, b]) => tau >= a as f64 && tau < (b + 1) as f64,
        }
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    /// Casts the ray through continuous pixel `(u, v)` at time `tau`.
    pub fn cast(&self, u: f64, v: f64, tau: f64) -> Option<Hit> {
        let pose = self.camera_pose(tau);
        let cam = &self.camera;
        let dc = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
        let o = pose.translation;
        let d = pose.rotation.rotate(dc);
        let mut best: Option<(f64, Vec3<f64>, Option<usize>)> = None;
        let mut consider = |t: f64, c: Vec3<f64>, obj: Option<usize>| {
            if best.is_none_or(|b| t < b.0) {
                best = Some((t, c, obj));
            }
        };
        for p in &self.planes {
            if let Some((t, c)) = p.hit(o, d) {
                consider(t, c, None);
            }
        }
        for b in &self.boxes {
            if let Some((t, l, axis)) = box_hit(b.half, &b.pose, o, d) {
                let (a, bb) = face_coords(l, axis);
                consider(t, b.texture.color(a, bb), None);
            }
        }
        for (i, ob) in self.objects.iter().enumerate() {
            if !self.object_visible(i, tau) {
                continue;
            }
            if let Some((t, l, axis)) = box_hit(ob.half, &self.object_pose(i, tau), o, d) {
                let (a, bb) = face_coords(l, axis);
                consider(t, ob.texture.color(a, bb), Some(i));
            }
        }
        best.map(|(t, color, object)| Hit {
            depth: t,
            color,
            world: o + d.scale(t),
            object,
        })
    }

    /// Sharp color, depth (0 where nothing is hit) and per-object masks.
    pub fn render_sharp(&self, tau: f64) -> (Image<f64>, Image<f64>, Vec<BinaryMask>) {
        let cam = &self.camera;
        let (w, h) = (cam.width, cam.height);
        let mut color = Image::zeros(w, h, 3);
        let mut depth = Image::zeros(w, h, 1);
        let mut masks = vec![BinaryMask::empty(w, h); self.objects.len()];
        for y in 0..h {
            for x in 0..w {
                if let Some(hit) = self.cast(x as f64, y as f64, tau) {
                    for c in 0..3 {
                        color.set(x, y, c, hit.color[c]);
                    }
                    depth.set(x, y, 0, hit.depth);
                    if let Some(i) = hit.object {
                        masks[i].set(x, y, true);
                    }
                }
            }
        }
        (color, depth, masks)
    }

    pub fn gain_log(&self, k: usize) -> f64 {
        let e = &self.spec.exposure;
        e.gain + e.gain_swing * (TAU * k as f64 / e.gain_period).sin()
    }

    /// Mean of the sharp renders over frame `k`'s open shutter.
    pub fn integrated(&self, k: usize) -> Image<f64> {
        let e = &self.spec.exposure;
        let n = if e.fraction > 0.0 { e.samples } else { 1 };
        let mut acc = Image::zeros(self.camera.width, self.camera.height, 3);
        for m in 0..n {
            let f = if n > 1 { m as f64 / (n - 1) as f64 } else { 0.0 };
            let (c, _, _) = self.render_sharp(k as f64 + e.fraction * f);
            for (a, b) in acc.data.iter_mut().zip(&c.data) {
                *a += b;
            }
        }
        acc.map(|v| v / n as f64)
    }

    /// Flow from frame `k` to `k + 1` at every pixel (NaN where nothing is hit).
    pub fn flow(&self, k: usize) -> Image<f64> {
        let cam = &self.camera;
        let (w, h) = (cam.width, cam.height);
        let mut flow = Image::filled(w, h, 2, f64::NAN);
        let (t0, t1) = (k as f64, k as f64 + 1.0);
        let next = self.camera_pose(t1).inverse();
        for y in 0..h {
            for x in 0..w {
                let Some(hit) = self.cast(x as f64, y as f64, t0) else { continue };
                let moved = match hit.object {
                    None => hit.world,
                    Some(i) => {
                        let local = self.object_pose(i, t0).inverse().transform_point(hit.world);
                        self.object_pose(i, t1).transform_point(local)
                    }
                };
                let pc = next.transform_point(moved);
                if pc.z <= cam.near {
                    continue;
                }
                let (u, v) = cam.project(pc);
                flow.set(x, y, 0, u - x as f64);
                flow.set(x, y, 1, v - y as f64);
            }
        }
        flow
    }

    /// Points on each face of object `i`, in the object frame.
    fn surface_points(&self, i: usize) -> Vec<Vec3<f64>> {
        let h = self.objects[i].half;
        let mut pts = Vec::new();
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                for a in [-0.5, 0.0, 0.5] {
                    for b in [-0.5, 0.0, 0.5] {
                        let mut p = Vec3::zeros();
                        p[axis] = sign * h[axis];
                        p[(axis + 1) % 3] = a * h[(axis + 1) % 3];
                        p[(axis + 2) % 3] = b * h[(axis + 2) % 3];
                        pts.push(p);
                    }
                }
            }
        }
        pts
    }

    /// Pixel location of an object point at frame `k` when it is visible.
    pub fn observe(&self, i: usize, local: Vec3<f64>, k: usize) -> Option<[f64; 2]> {
        let tau = k as f64;
        if !self.object_visible(i, tau) {
            return None;
        }
        let cam = &self.camera;
        let world = self.object_pose(i, tau).transform_point(local);
        let pc = self.camera_pose(tau).inverse().transform_point(world);
        if pc.z <= cam.near {
            return None;
        }
        let (u, v) = cam.project(pc);
        if !cam.in_bounds(u, v) {
            return None;
        }
        let hit = self.cast(u, v, tau)?;
        (hit.object == Some(i) && (hit.depth - pc.z).abs() <= 1e-6 * pc.z.max(1.0)).then_some([u, v])
    }

    pub fn tracks(&self) -> Vec<TrackRecord> {
        let mut out = Vec::new();
        for i in 0..self.objects.len() {
            for p in self.surface_points(i) {
                let pixels: Vec<Option<[f64; 2]>> = (0..self.frame_count()).map(|k| self.observe(i, p, k)).collect();
                if pixels.iter().any(Option::is_some) {
                    out.push(TrackRecord { object: i, pixels });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub object: usize,
    pub pixels: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub timestamp: f64,
    /// Camera-to-world pose when the shutter opens.
    pub pose: SE3Pose<f64>,
    /// Pose when the shutter closes.
    pub exposure_end: SE3Pose<f64>,
    pub sharp: Image<f64>,
    /// Shutter-averaged color before gain and bias.
    pub integrated: Image<f64>,
    /// Observed color: `clamp(exp(gain)·integrated + bias)`.
    pub observed: Image<f64>,
    pub depth: Image<f64>,
    pub masks: Vec<BinaryMask>,
    pub gain_log: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub camera: PinholeCamera<f64>,
    pub frames: Vec<SyntheticFrame>,
    pub tracks: Vec<TrackRecord>,
    /// Flow from each frame to the next.
    pub flow: Vec<Image<f64>>,
}

/// Timestamp of frame `k`, rounded to what the file names carry.
pub fn frame_timestamp(k: usize, fps: f64) -> f64 {
    timestamp_name(k as f64 / fps).parse().expect("formatted timestamp parses")
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticDataset> {
    let scene = Scene::new(spec)?;
    let n = scene.frame_count();
    let bias = spec.exposure.bias;
    let frames = (0..n)
        .map(|k| {
            let (sharp, depth, masks) = scene.render_sharp(k as f64);
            let integrated = scene.integrated(k);
            let g = scene.gain_log(k).exp();
            SyntheticFrame {
                timestamp: frame_timestamp(k, spec.sequence.fps),
                pose: scene.camera_pose(k as f64),
                exposure_end: scene.camera_pose(k as f64 + spec.exposure.fraction),
                observed: integrated.map(|v| (g * v + bias).clamp(0.0, 1.0)),
                integrated,
                sharp,
                depth,
                masks,
                gain_log: scene.gain_log(k),
                bias,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        camera: scene.camera,
        frames,
        tracks: scene.tracks(),
        flow: (0..n.saturating_sub(1)).map(|k| scene.flow(k)).collect(),
        spec: spec.clone(),
    })
}

impl SyntheticDataset {
    /// Writes the TUM layout plus ground-truth sidecars into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut rgb_list = String::from("# timestamp filename\n");
        let mut depth_list = String::from("# timestamp filename\n");
        let mut assoc = String::new();
        let mut gt = String::from("# timestamp tx ty tz qx qy qz qw\n");
        let mut exposure = String::from("# timestamp gain_log bias end_tx end_ty end_tz end_qx end_qy end_qz end_qw\n");
        for (k, f) in self.frames.iter().enumerate() {
            let name = format!("{}.png", timestamp_name(f.timestamp));
            let ts = timestamp_name(f.timestamp);
            dataset::write_rgb(&dir.join("rgb").join(&name), &f.observed)?;
            dataset::write_rgb(&dir.join("sharp").join(&name), &f.sharp)?;
            dataset::write_depth(&dir.join("depth").join(&name), &f.depth)?;
            for (i, m) in f.masks.iter().enumerate() {
                dataset::write_mask(&dir.join("gt_masks").join(dataset::mask_name(k, i)), m)?;
            }
            rgb_list.push_str(&format!("{ts} rgb/{name}\n"));
            depth_list.push_str(&format!("{ts} depth/{name}\n"));
            assoc.push_str(&format!("{ts} rgb/{name} {ts} depth/{name}\n"));
            gt.push_str(&format!("{ts} {}\n", dataset::exact_pose_fields(&f.pose)));
            exposure.push_str(&format!("{ts} {} {} {}\n", f.gain_log, f.bias, dataset::exact_pose_fields(&f.exposure_end)));
        }
        let w = |name: &str, s: &str| crate::error::write_file(&dir.join(name), s);
        w("rgb.txt", &rgb_list)?;
        w("depth.txt", &depth_list)?;
        w("associations.txt", &assoc)?;
        w("groundtruth.txt", &gt)?;
        w("exposure.txt", &exposure)?;
        w("camera.txt", &dataset::camera_line(&self.camera))?;
        w("gt_tracks.txt", &dataset::format_tracks(&self.tracks, self.spec.objects.len()))?;
        w("scene.toml", &self.spec.to_toml())?;
        for (k, f) in self.flow.iter().enumerate() {
            dataset::write_flow(&dir.join("gt_flow").join(format!("{k:06}.flo")), f)?;
        }
        Ok(())
    }
}

/// Reads a scene spec and writes the generated dataset.
pub fn generate_synthetic(spec_path: &Path, out: &Path) -> Result<SyntheticDataset> {
    let spec = SceneSpec::load(spec_path)?;
    let ds = generate(&spec)?;
    ds.write(out)?;
    Ok(ds)
}

/// The bundled blurred scene: textured walls and floor, a static crate, a box
/// sliding across the view and a second box that disappears halfway.
pub const BOX_SCENE: &str = include_str!("../scenes/box.toml");

/// The bundled static scene used for held-out rendering checks.
pub const STATIC_SCENE: &str = include_str!("../scenes/static.toml");
