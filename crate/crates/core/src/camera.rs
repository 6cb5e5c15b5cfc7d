use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::real::Real;

/// Pinhole intrinsics. Pixel `(x, y)` has its center at continuous coordinate `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    pub near: T,
    pub far: T,
}

impl<T: Real> PinholeCamera<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: T::c(0.01),
            far: T::c(100.0),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if !(self.near > T::zero() && self.near < self.far) {
            return Err(Error::Invalid("clip planes must satisfy 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image size must be nonzero".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, p: Vec3<T>) -> (T, T) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    #[inline]
    pub fn back_project(&self, u: T, v: T, depth: T) -> Vec3<T> {
        Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    #[inline]
    pub fn in_bounds(&self, u: T, v: T) -> bool {
        let half = T::half();
        u >= -half
            && v >= -half
            && u < T::from_usize_lossy(self.width) - half
            && v < T::from_usize_lossy(self.height) - half
    }

    pub fn cast<U: Real>(&self) -> PinholeCamera<U> {
        PinholeCamera {
            fx: U::c(self.fx.to_f64_lossy()),
            fy: U::c(self.fy.to_f64_lossy()),
            cx: U::c(self.cx.to_f64_lossy()),
            cy: U::c(self.cy.to_f64_lossy()),
            width: self.width,
            height: self.height,
            near: U::c(self.near.to_f64_lossy()),
            far: U::c(self.far.to_f64_lossy()),
        }
    }
}
