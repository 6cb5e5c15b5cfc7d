//! Integrate-and-render: motion-blurred, exposure-adjusted synthesis by averaging
//! renders along an interpolated camera motion.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::PinholeCamera;
use crate::error::{shape_err, Result};
use crate::gaussian::{GaussianScene, Splat};
use crate::image::Image;
use crate::linalg::Vec3;
use crate::raster::{RenderOutput, Renderer, SplatGrad};
use crate::real::Real;
use crate::scaffold::{deform_scene, OpacityWeighting, ScaffoldGraph};
use crate::se3::{adjoint_transpose_apply, se3_exp, se3_left_jacobian, se3_log, SE3Pose, Twist};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureParams<T> {
    pub gain_log: T,
    pub bias: T,
    pub start: SE3Pose<T>,
    pub end: SE3Pose<T>,
    pub rot_step: T,
    pub trans_step: T,
    pub max_samples: usize,
}

impl<T: Real> Default for ExposureParams<T> {
    fn default() -> Self {
        Self {
            gain_log: T::zero(),
            bias: T::zero(),
            start: SE3Pose::identity(),
            end: SE3Pose::identity(),
            rot_step: T::c(0.005),
            trans_step: T::c(0.005),
            max_samples: 12,
        }
    }
}

impl<T: Real> ExposureParams<T> {
    /// Control poses set to `base` perturbed by independent Gaussian twists.
    pub fn perturbed<R: Rng>(base: &SE3Pose<T>, sigma_rot: f64, sigma_trans: f64, rng: &mut R) -> Self {
        let draw = |rng: &mut R| {
            let r = Normal::new(0.0, sigma_rot).expect("finite sigma");
            let t = Normal::new(0.0, sigma_trans).expect("finite sigma");
            let mut a = [T::zero(); 6];
            for (i, x) in a.iter_mut().enumerate() {
                *x = T::c(if i < 3 { r.sample(rng) } else { t.sample(rng) });
            }
            se3_exp(&Twist::from_array(a)).compose(base)
        };
        let start = draw(rng);
        let end = draw(rng);
        Self {
            start,
            end,
            ..Default::default()
        }
    }

    /// Relative motion `log(T_s⁻¹ T_e)`.
    pub fn motion(&self) -> Result<Twist<T>> {
        se3_log(&self.start.inverse().compose(&self.end))
    }

    /// Sets the end pose so that the relative motion equals `xi`.
    pub fn set_motion(&mut self, xi: &Twist<T>) {
        self.end = self.start.compose(&se3_exp(xi));
    }

    pub fn sample_count(&self) -> Result<usize> {
        sample_count(&self.start, &self.end, self.rot_step, self.trans_step, self.max_samples)
    }
}

/// Number of exposure sub-intervals for the motion between two control poses.
pub fn sample_count<T: Real>(
    start: &SE3Pose<T>,
    end: &SE3Pose<T>,
    rot_step: T,
    trans_step: T,
    max_samples: usize,
) -> Result<usize> {
    let rel = start.inverse().compose(end);
    let xi = se3_log(&rel)?;
    let angle = xi.rotational.norm();
    let dist = rel.translation.norm();
    let by_rot = (angle / rot_step).ceil().to_f64_lossy();
    let by_trans = (dist / trans_step).ceil().to_f64_lossy();
    let n = by_rot.max(by_trans);
    Ok((n.max(1.0) as usize).clamp(1, max_samples.max(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureGrad<T> {
    pub gain_log: T,
    pub bias: T,
    /// Gradient with respect to the relative motion twist `log(T_s⁻¹ T_e)`.
    pub motion: Twist<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrGrad<T> {
    pub splats: Vec<SplatGrad<T>>,
    pub mean2d: Vec<[T; 2]>,
    pub exposure: ExposureGrad<T>,
    /// Gradient with respect to a left twist `exp(δ)·T` of the base pose.
    pub pose: Twist<T>,
}

/// Multi-sample renderer that keeps what [`IrRenderer::backward`] needs.
#[derive(Default)]
pub struct IrRenderer<T> {
    samples: Vec<(Renderer<T>, T, Twist<T>)>,
    average: Option<Image<T>>,
    gain_log: T,
    bias: T,
}

impl<T: Real> IrRenderer<T> {
    pub fn new() -> Self {
        Self {
            samples: Vec::new(),
            average: None,
            gain_log: T::zero(),
            bias: T::zero(),
        }
    }

    pub fn forward(
        &mut self,
        splats: &[Splat<T>],
        camera: &PinholeCamera<T>,
        pose: &SE3Pose<T>,
        exposure: &ExposureParams<T>,
        background: Vec3<T>,
    ) -> Result<RenderOutput<T>> {
        let n = exposure.sample_count()?;
        let xi = exposure.motion()?;
        self.samples.clear();
        let (w, h) = (camera.width, camera.height);
        let mut color = Image::zeros(w, h, 3);
        let mut depth = Image::zeros(w, h, 1);
        let mut alpha = Image::zeros(w, h, 1);
        for k in 0..=n {
            let f = T::from_usize_lossy(k) / T::from_usize_lossy(n);
            let step = xi.scale(f);
            let sample_pose = if step.to_array().iter().all(|v| *v == T::zero()) {
                *pose
            } else {
                se3_exp(&step).compose(pose)
            };
            let mut r = Renderer::new();
            let out = r.forward(splats, camera, &sample_pose, background);
            add_into(&mut color, &out.color);
            add_into(&mut depth, &out.depth);
            add_into(&mut alpha, &out.alpha);
            self.samples.push((r, f, step));
        }
        let inv = T::one() / T::from_usize_lossy(n + 1);
        let avg = color.map(|v| v * inv);
        let gain = exposure.gain_log.exp();
        let color = avg.map(|v| (gain * v + exposure.bias).max(T::zero()).min(T::one()));
        self.average = Some(avg);
        self.gain_log = exposure.gain_log;
        self.bias = exposure.bias;
        Ok(RenderOutput {
            color,
            depth: depth.map(|v| v * inv),
            alpha: alpha.map(|v| v * inv),
        })
    }

    pub fn backward(&self, grad_color: &Image<T>, grad_depth: &Image<T>) -> Result<IrGrad<T>> {
        let avg = self.average.as_ref().ok_or(crate::error::Error::MissingForwardCache)?;
        avg.check_shape(grad_color).map_err(|_| shape_err(avg.shape_str(), grad_color.shape_str()))?;
        let gain = self.gain_log.exp();
        let inv = T::one() / T::from_usize_lossy(self.samples.len());
        let mut g_avg = Image::zeros(avg.width, avg.height, 3);
        let mut g_gain = T::zero();
        let mut g_bias = T::zero();
        for i in 0..avg.data.len() {
            let pre = gain * avg.data[i] + self.bias;
            if pre < T::zero() || pre > T::one() {
                continue;
            }
            let g = grad_color.data[i];
            g_gain += g * gain * avg.data[i];
            g_bias += g;
            g_avg.data[i] = g * gain * inv;
        }
        let g_depth = grad_depth.map(|v| v * inv);
        let mut splats: Vec<SplatGrad<T>> = Vec::new();
        let mut mean2d: Vec<[T; 2]> = Vec::new();
        let mut motion = [T::zero(); 6];
        let mut base = Twist::zeros();
        for (r, f, step) in &self.samples {
            let g = r.backward(&g_avg, &g_depth)?;
            if splats.is_empty() {
                splats = g.splats;
                mean2d = g.mean2d;
            } else {
                for (a, b) in splats.iter_mut().zip(&g.splats) {
                    a.accumulate(b);
                }
                for (a, b) in mean2d.iter_mut().zip(&g.mean2d) {
                    a[0] += b[0];
                    a[1] += b[1];
                }
            }
            let back = adjoint_transpose_apply(&se3_exp(step), &g.pose);
            base = Twist::new(base.rotational + back.rotational, base.translational + back.translational);
            // exp(f(ξ + dξ)) ≈ exp(f J(fξ) dξ) exp(fξ)
            let j = se3_left_jacobian(step);
            let gp = g.pose.to_array();
            for c in 0..6 {
                motion[c] += *f * (0..6).map(|r| j[r][c] * gp[r]).sum::<T>();
            }
        }
        Ok(IrGrad {
            splats,
            mean2d,
            exposure: ExposureGrad {
                gain_log: g_gain,
                bias: g_bias,
                motion: Twist::from_array(motion),
            },
            pose: base,
        })
    }
}

fn add_into<T: Real>(acc: &mut Image<T>, x: &Image<T>) {
    for (a, b) in acc.data.iter_mut().zip(&x.data) {
        *a += *b;
    }
}

/// Blurred, exposure-adjusted render of the scene deformed to keyframe `t`.
pub fn integrate_and_render<T: Real>(
    scene: &GaussianScene<T>,
    graph: &ScaffoldGraph<T>,
    t: usize,
    pose: &SE3Pose<T>,
    exposure: &ExposureParams<T>,
    camera: &PinholeCamera<T>,
    weighting: OpacityWeighting,
) -> Result<RenderOutput<T>> {
    let splats = if scene.dynamic_set.is_empty() {
        scene.static_splats()
    } else {
        deform_scene(scene, graph, t, weighting)?
    };
    IrRenderer::new().forward(&splats, camera, pose, exposure, scene.background)
}
