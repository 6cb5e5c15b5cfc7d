//! Image and trajectory error metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::linalg::{Mat3, Quat, Vec3};
use crate::se3::SE3Pose;
use crate::ssim::ssim_map;
use crate::uncertainty::BinaryMask;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_mask(img: &Image<f64>, mask: Option<&BinaryMask>) -> Result<()> {
    if let Some(m) = mask {
        if m.width != img.width || m.height != img.height {
            return Err(shape_err(
                format!("{}x{} mask", img.width, img.height),
                format!("{}x{} mask", m.width, m.height),
            ));
        }
        if m.is_empty() {
            return Err(Error::EmptyMask);
        }
    }
    Ok(())
}

/// PSNR for images in `[0, 1]`, optionally restricted to the pixels of `mask`.
pub fn psnr(rendered: &Image<f64>, reference: &Image<f64>, mask: Option<&BinaryMask>) -> Result<f64> {
    rendered.check_shape(reference)?;
    check_mask(rendered, mask)?;
    let ch = rendered.channels;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            if mask.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            for c in 0..ch {
                let d = rendered.get(x, y, c) - reference.get(x, y, c);
                sum += d * d;
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM, optionally pooled over the pixels of `mask` only.
pub fn ssim_metric(rendered: &Image<f64>, reference: &Image<f64>, mask: Option<&BinaryMask>) -> Result<f64> {
    check_mask(rendered, mask)?;
    let map = ssim_map(rendered, reference)?;
    let Some(m) = mask else {
        return Ok(map.mean());
    };
    let mut sum = 0.0;
    for y in 0..map.height {
        for x in 0..map.width {
            if m.get(x, y) {
                sum += map.get(x, y, 0);
            }
        }
    }
    Ok(sum / m.count() as f64)
}

/// Least-squares alignment `gt ≈ s R est + t` of two point sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Camera pose in the estimate's frame that this alignment maps onto `gt`.
    pub fn pull_back(&self, gt: &SE3Pose<f64>) -> SE3Pose<f64> {
        let rt = self.rotation.transpose();
        let p = rt * (position(gt) - self.translation) / self.scale;
        let r = rt * rotation(gt);
        let m = Mat3::from_rows(std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])));
        SE3Pose::new(Quat::from_matrix(&m).normalized(), Vec3::new(p.x, p.y, p.z))
    }
}

/// Alignment of estimated onto ground-truth camera positions.
pub fn align_trajectories(est: &[SE3Pose<f64>], gt: &[SE3Pose<f64>], with_scale: bool) -> Result<Alignment> {
    let e: Vec<_> = est.iter().map(position).collect();
    let g: Vec<_> = gt.iter().map(position).collect();
    align_points(&e, &g, with_scale)
}

pub fn align_points(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Alignment> {
    if est.len() != gt.len() {
        return Err(shape_err(format!("{} points", est.len()), format!("{} points", gt.len())));
    }
    if est.len() < 3 {
        return Err(Error::InsufficientPoses {
            needed: 3,
            got: est.len(),
        });
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale && var_e > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_e
    } else {
        1.0
    };
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Alignment {
        rotation,
        translation,
        scale,
    })
}

/// Alignment using orientations as well as positions: the rotation is the chordal
/// mean of `R_gt R_estᵀ`, scale and translation then follow from the positions.
/// Stays well posed for straight-line trajectories.
pub fn align_poses(est: &[SE3Pose<f64>], gt: &[SE3Pose<f64>], with_scale: bool) -> Result<Alignment> {
    if est.len() != gt.len() {
        return Err(shape_err(format!("{} poses", est.len()), format!("{} poses", gt.len())));
    }
    if est.is_empty() {
        return Err(Error::InsufficientPoses { needed: 1, got: 0 });
    }
    let sum: Matrix3<f64> = est.iter().zip(gt).map(|(e, g)| rotation(g) * rotation(e).transpose()).sum();
    let svd = sum.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let n = est.len() as f64;
    let mu_e = est.iter().map(position).sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().map(position).sum::<Vector3<f64>>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let re = rotation * (position(e) - mu_e);
        num += re.dot(&(position(g) - mu_g));
        den += re.norm_squared();
    }
    let scale = if with_scale && den > 0.0 && num > 0.0 { num / den } else { 1.0 };
    Ok(Alignment {
        rotation,
        translation: mu_g - rotation * mu_e * scale,
        scale,
    })
}

fn position(p: &SE3Pose<f64>) -> Vector3<f64> {
    Vector3::new(p.translation.x, p.translation.y, p.translation.z)
}

fn rotation(p: &SE3Pose<f64>) -> Matrix3<f64> {
    let m = p.rotation_matrix();
    Matrix3::from_fn(|i, j| m.m[i][j])
}

/// Absolute trajectory error in meters: RMSE of camera positions after
/// rigid (or similarity, with `with_scale`) alignment.
pub fn ate_rmse(est: &[SE3Pose<f64>], gt: &[SE3Pose<f64>], with_scale: bool) -> Result<f64> {
    let e: Vec<_> = est.iter().map(position).collect();
    let g: Vec<_> = gt.iter().map(position).collect();
    let a = align_points(&e, &g, with_scale)?;
    let sum: f64 = e.iter().zip(&g).map(|(p, q)| (a.apply(*p) - q).norm_squared()).sum();
    Ok((sum / e.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gray(w: usize, h: usize, v: f64) -> Image<f64> {
        Image::filled(w, h, 3, v)
    }

    fn traj(n: usize) -> Vec<SE3Pose<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                SE3Pose::new(
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.05 * t),
                    Vec3::new(t.sin(), 0.3 * t, (2.0 * t).cos()),
                )
            })
            .collect()
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = gray(8, 8, 0.3);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);
        assert!((ssim_metric(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_20db() {
        let p = psnr(&gray(8, 8, 0.3), &gray(8, 8, 0.4), None).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn masked_psnr_matches_cropped_image() {
        let (w, h) = (10, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let b = Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mask = BinaryMask::from_fn(w, h, |x, _| x < w / 2);
        let crop = |img: &Image<f64>| {
            let mut out = Image::zeros(w / 2, h, 3);
            for y in 0..h {
                for x in 0..w / 2 {
                    for c in 0..3 {
                        out.set(x, y, c, img.get(x, y, c));
                    }
                }
            }
            out
        };
        let masked = psnr(&a, &b, Some(&mask)).unwrap();
        let cropped = psnr(&crop(&a), &crop(&b), None).unwrap();
        assert!((masked - cropped).abs() < 1e-12);

        let map = ssim_map(&a, &b).unwrap();
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w / 2 {
                s += map.get(x, y, 0);
            }
        }
        let expected = s / (w / 2 * h) as f64;
        assert!((ssim_metric(&a, &b, Some(&mask)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_and_mask_errors() {
        assert!(matches!(
            psnr(&gray(4, 4, 0.0), &gray(4, 5, 0.0), None),
            Err(Error::ShapeMismatch { .. })
        ));
        let empty = BinaryMask::empty(4, 4);
        assert_eq!(psnr(&gray(4, 4, 0.0), &gray(4, 4, 0.0), Some(&empty)), Err(Error::EmptyMask));
    }

    #[test]
    fn ate_of_identical_trajectories_is_zero() {
        let t = traj(10);
        assert!(ate_rmse(&t, &t, false).unwrap() < 1e-12);
    }

    #[test]
    fn ate_ignores_a_global_rigid_transform() {
        let t = traj(12);
        let g = SE3Pose::new(
            Quat::from_axis_angle(Vec3::new(1.0, 2.0, -0.5).scale(1.0 / 2.29128784747792), 0.9),
            Vec3::new(3.0, -1.0, 0.25),
        );
        let moved: Vec<_> = t.iter().map(|p| g.compose(p)).collect();
        assert!(ate_rmse(&moved, &t, false).unwrap() < 1e-9);
    }

    #[test]
    fn pull_back_inverts_the_alignment() {
        let t = traj(12);
        let g = SE3Pose::new(Quat::from_axis_angle(Vec3::new(0.0, 0.6, 0.8), 0.7), Vec3::new(1.0, -2.0, 0.5));
        let est: Vec<_> = t.iter().map(|p| g.compose(p)).collect();
        let a = align_trajectories(&est, &t, false).unwrap();
        for (e, p) in est.iter().zip(&t) {
            assert!(a.pull_back(p).max_abs_diff(e) < 1e-9);
        }
    }

    #[test]
    fn pose_alignment_resolves_roll_on_a_straight_line() {
        let line: Vec<_> = (0..8)
            .map(|i| {
                SE3Pose::new(
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.02 * i as f64),
                    Vec3::new(0.1 * i as f64, 0.0, 0.0),
                )
            })
            .collect();
        let g = SE3Pose::new(Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.8), Vec3::new(0.5, 1.0, -2.0));
        let est: Vec<_> = line.iter().map(|p| g.compose(p)).collect();
        let a = align_poses(&est, &line, true).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-9);
        for (e, p) in est.iter().zip(&line) {
            assert!(a.pull_back(p).max_abs_diff(e) < 1e-9);
        }
    }

    #[test]
    fn pose_alignment_recovers_scale() {
        let t = traj(10);
        let scaled: Vec<_> = t.iter().map(|p| SE3Pose::new(p.rotation, p.translation.scale(2.0))).collect();
        let a = align_poses(&scaled, &t, true).unwrap();
        assert!((a.scale - 0.5).abs() < 1e-9);
        assert!(align_poses(&scaled, &t, false).unwrap().scale == 1.0);
    }

    #[test]
    fn sim3_alignment_recovers_scale() {
        let t = traj(12);
        let scaled: Vec<_> = t
            .iter()
            .map(|p| SE3Pose::new(p.rotation, p.translation.scale(0.5)))
            .collect();
        assert!(ate_rmse(&scaled, &t, false).unwrap() > 1e-2);
        assert!(ate_rmse(&scaled, &t, true).unwrap() < 1e-9);
    }

    #[test]
    fn ate_matches_noise_rmse() {
        let t = traj(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 0.01).unwrap();
        let noisy: Vec<_> = t
            .iter()
            .map(|p| {
                let d = Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                SE3Pose::new(p.rotation, p.translation + d)
            })
            .collect();
        let expected = 0.01 * 3f64.sqrt();
        let ate = ate_rmse(&noisy, &t, false).unwrap();
        assert!((ate - expected).abs() / expected < 0.1, "{ate}");
    }

    #[test]
    fn too_few_poses() {
        let t = traj(2);
        assert_eq!(
            ate_rmse(&t, &t, false),
            Err(Error::InsufficientPoses { needed: 3, got: 2 })
        );
    }
}
