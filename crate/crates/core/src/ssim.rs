//! Windowed structural similarity with an analytic gradient.
//!
//! Statistics use an 11×11 Gaussian window (σ = 1.5) that is renormalized over
//! the in-bounds part of the image near borders.

use crate::error::Result;
use crate::image::Image;
use crate::real::Real;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn taps<T: Real>() -> Vec<T> {
    let half = (WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::c(v / s)).collect()
}

/// Separable correlation of a single-channel plane with the window, without
/// normalization. Returns the filtered plane.
fn blur<T: Real>(src: &[T], w: usize, h: usize, k: &[T]) -> Vec<T> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += *kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += *kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct Moments<T> {
    mx: Vec<T>,
    my: Vec<T>,
    mxx: Vec<T>,
    myy: Vec<T>,
    mxy: Vec<T>,
    /// Window mass inside the image, per pixel.
    z: Vec<T>,
}

fn moments<T: Real>(x: &[T], y: &[T], w: usize, h: usize, k: &[T]) -> Moments<T> {
    let z = blur(&vec![T::one(); w * h], w, h, k);
    let norm = |v: Vec<T>| -> Vec<T> { v.iter().zip(&z).map(|(a, b)| *a / *b).collect() };
    let xx: Vec<T> = x.iter().map(|v| *v * *v).collect();
    let yy: Vec<T> = y.iter().map(|v| *v * *v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(a, b)| *a * *b).collect();
    Moments {
        mx: norm(blur(x, w, h, k)),
        my: norm(blur(y, w, h, k)),
        mxx: norm(blur(&xx, w, h, k)),
        myy: norm(blur(&yy, w, h, k)),
        mxy: norm(blur(&xy, w, h, k)),
        z,
    }
}

#[inline]
fn ssim_terms<T: Real>(mx: T, my: T, mxx: T, myy: T, mxy: T) -> (T, T, T, T) {
    let two = T::two();
    let a1 = two * mx * my + T::c(C1);
    let a2 = two * (mxy - mx * my) + T::c(C2);
    let b1 = mx * mx + my * my + T::c(C1);
    let b2 = (mxx - mx * mx) + (myy - my * my) + T::c(C2);
    (a1, a2, b1, b2)
}

/// Per-pixel SSIM averaged over channels.
pub fn ssim_map<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<Image<T>> {
    x.check_shape(y)?;
    let (w, h, ch) = (x.width, x.height, x.channels);
    let k = taps::<T>();
    let mut out = Image::zeros(w, h, 1);
    let inv = T::one() / T::from_usize_lossy(ch);
    for c in 0..ch {
        let m = moments(&x.channel(c).data, &y.channel(c).data, w, h, &k);
        for p in 0..w * h {
            let (a1, a2, b1, b2) = ssim_terms(m.mx[p], m.my[p], m.mxx[p], m.myy[p], m.mxy[p]);
            out.data[p] += a1 * a2 / (b1 * b2) * inv;
        }
    }
    Ok(out)
}

/// Per-pixel dissimilarity `(1 − SSIM) / 2` clamped to `[0, 1]`.
pub fn ssim_prime<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<Image<T>> {
    Ok(ssim_map(x, y)?.map(|s| ((T::one() - s) * T::half()).max(T::zero()).min(T::one())))
}

/// Mean SSIM over pixels and channels.
pub fn ssim<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<T> {
    Ok(ssim_map(x, y)?.mean())
}

/// Gradient with respect to `x` of `Σ_p grad[p] · ssim_map(x, y)[p]`.
pub fn ssim_map_backward<T: Real>(x: &Image<T>, y: &Image<T>, grad: &Image<T>) -> Result<Image<T>> {
    x.check_shape(y)?;
    let (w, h, ch) = (x.width, x.height, x.channels);
    if grad.width != w || grad.height != h || grad.channels != 1 {
        return Err(crate::error::shape_err(format!("{w}x{h}x1"), grad.shape_str()));
    }
    let k = taps::<T>();
    let inv = T::one() / T::from_usize_lossy(ch);
    let two = T::two();
    let mut out = Image::zeros(w, h, ch);
    for c in 0..ch {
        let xc = x.channel(c).data;
        let yc = y.channel(c).data;
        let m = moments(&xc, &yc, w, h, &k);
        let mut ga = vec![T::zero(); w * h];
        let mut gb = vec![T::zero(); w * h];
        let mut gc = vec![T::zero(); w * h];
        for p in 0..w * h {
            let (a1, a2, b1, b2) = ssim_terms(m.mx[p], m.my[p], m.mxx[p], m.myy[p], m.mxy[p]);
            let den = b1 * b2;
            let s = a1 * a2 / den;
            let g = grad.data[p] * inv / m.z[p];
            let d_mx = (two * m.my[p] * a2 - two * m.my[p] * a1) / den
                - s * (two * m.mx[p] / b1 - two * m.mx[p] / b2);
            let d_mxx = -s / b2;
            let d_mxy = two * a1 / den;
            ga[p] = g * d_mx;
            gb[p] = g * d_mxx;
            gc[p] = g * d_mxy;
        }
        let fa = blur(&ga, w, h, &k);
        let fb = blur(&gb, w, h, &k);
        let fc = blur(&gc, w, h, &k);
        for p in 0..w * h {
            out.data[p * ch + c] = fa[p] + two * xc[p] * fb[p] + yc[p] * fc[p];
        }
    }
    Ok(out)
}
