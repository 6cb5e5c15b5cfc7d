//! Per-pixel uncertainty field and the reweighted uncertainty mask.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::image::Image;

pub const FEATURE_DIM: usize = 15;
pub const HIDDEN: usize = 32;
pub const BETA2_FLOOR: f64 = 0.1;
pub const DEFAULT_DELTA_U: f64 = 3.5;
pub const DEFAULT_DELTA_RU: f64 = 0.2;
pub const DEFAULT_LAMBDA_REG: f64 = 0.5;
pub const DEFAULT_PROMPTS: usize = 8;

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-hidden-layer ReLU perceptron mapping a feature vector to β².
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    /// `[W1 (H×F), b1, W2 (H×H), b2, w3 (H), b3]`, row-major.
    pub params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Mlp {
    fn offsets(input: usize) -> Offsets {
        let w1 = 0;
        let b1 = w1 + HIDDEN * input;
        let w2 = b1 + HIDDEN;
        let b2 = w2 + HIDDEN * HIDDEN;
        let w3 = b2 + HIDDEN;
        let b3 = w3 + HIDDEN;
        Offsets { w1, b1, w2, b2, w3, b3, len: b3 + 1 }
    }

    pub fn param_count(input: usize) -> usize {
        Self::offsets(input).len
    }

    /// He-initialized weights; the output bias starts at β² = 1.
    pub fn new(input: usize, seed: u64) -> Self {
        let o = Self::offsets(input);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; o.len];
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid");
        let n2 = Normal::new(0.0, (2.0 / HIDDEN as f64).sqrt()).expect("valid");
        let n3 = Normal::new(0.0, 0.1 / (HIDDEN as f64).sqrt()).expect("valid");
        for p in &mut params[o.w1..o.b1] {
            *p = n1.sample(&mut rng);
        }
        for p in &mut params[o.w2..o.b2] {
            *p = n2.sample(&mut rng);
        }
        for p in &mut params[o.w3..o.b3] {
            *p = n3.sample(&mut rng);
        }
        params[o.b3] = (1.0 - BETA2_FLOOR).exp_m1().ln();
        Self { input, params }
    }

    fn hidden(&self, f: &[f64]) -> ([f64; HIDDEN], [f64; HIDDEN], f64) {
        let o = Self::offsets(self.input);
        let p = &self.params;
        let mut h1 = [0.0; HIDDEN];
        for (j, h) in h1.iter_mut().enumerate() {
            let row = &p[o.w1 + j * self.input..o.w1 + (j + 1) * self.input];
            let z = p[o.b1 + j] + row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            *h = z.max(0.0);
        }
        let mut h2 = [0.0; HIDDEN];
        for (j, h) in h2.iter_mut().enumerate() {
            let row = &p[o.w2 + j * HIDDEN..o.w2 + (j + 1) * HIDDEN];
            let z = p[o.b2 + j] + row.iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>();
            *h = z.max(0.0);
        }
        let out = p[o.b3] + p[o.w3..o.b3].iter().zip(&h2).map(|(a, b)| a * b).sum::<f64>();
        (h1, h2, out)
    }

    pub fn predict(&self, f: &[f64]) -> f64 {
        softplus(self.hidden(f).2) + BETA2_FLOOR
    }

    /// β² for every row of a row-major `n × input` feature matrix.
    pub fn predict_batch(&self, features: &[f64]) -> Vec<f64> {
        features.par_chunks(self.input).map(|f| self.predict(f)).collect()
    }

    /// Parameter gradient of `Σ_i grad[i] · β²_i`.
    pub fn backward_batch(&self, features: &[f64], grad: &[f64]) -> Vec<f64> {
        let o = Self::offsets(self.input);
        const CHUNK: usize = 256;
        let partial: Vec<Vec<f64>> = features
            .par_chunks(self.input * CHUNK)
            .zip(grad.par_chunks(CHUNK))
            .map(|(fs, gs)| {
                let mut g = vec![0.0; o.len];
                for (f, gb) in fs.chunks(self.input).zip(gs) {
                    if *gb == 0.0 {
                        continue;
                    }
                    self.backward_one(f, *gb, &o, &mut g);
                }
                g
            })
            .collect();
        let mut out = vec![0.0; o.len];
        for g in partial {
            for (a, b) in out.iter_mut().zip(g) {
                *a += b;
            }
        }
        out
    }

    fn backward_one(&self, f: &[f64], g_beta: f64, o: &Offsets, g: &mut [f64]) {
        let p = &self.params;
        let (h1, h2, z) = self.hidden(f);
        let gz = g_beta * sigmoid(z);
        g[o.b3] += gz;
        let mut gh2 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            g[o.w3 + j] += gz * h2[j];
            gh2[j] = if h2[j] > 0.0 { gz * p[o.w3 + j] } else { 0.0 };
        }
        let mut gh1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            if gh2[j] == 0.0 {
                continue;
            }
            g[o.b2 + j] += gh2[j];
            for k in 0..HIDDEN {
                g[o.w2 + j * HIDDEN + k] += gh2[j] * h1[k];
                gh1[k] += gh2[j] * p[o.w2 + j * HIDDEN + k];
            }
        }
        for j in 0..HIDDEN {
            if h1[j] <= 0.0 || gh1[j] == 0.0 {
                continue;
            }
            g[o.b1 + j] += gh1[j];
            for k in 0..self.input {
                g[o.w1 + j * self.input + k] += gh1[j] * f[k];
            }
        }
    }
}

/// Per-pixel feature source for the uncertainty predictor.
pub trait FeatureProvider {
    fn dim(&self) -> usize;
    /// Row-major `H·W × dim` features for `image`. `residual` is the previous
    /// iteration's per-pixel residual (3 color channels then depth), if any.
    fn features(&self, image: &Image<f64>, residual: Option<&Image<f64>>) -> Vec<f64>;
}

/// Hand-crafted 15-dimensional descriptor: color, 5×5 local mean and standard
/// deviation, normalized coordinates and the previous residual magnitudes.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalStatsFeatures;

impl FeatureProvider for LocalStatsFeatures {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn features(&self, image: &Image<f64>, residual: Option<&Image<f64>>) -> Vec<f64> {
        let (w, h) = (image.width, image.height);
        let mut out = vec![0.0; w * h * FEATURE_DIM];
        out.par_chunks_mut(w * FEATURE_DIM).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let f = &mut row[x * FEATURE_DIM..(x + 1) * FEATURE_DIM];
                for c in 0..3 {
                    f[c] = image.get(x, y, c.min(image.channels - 1));
                }
                let mut sum = [0.0; 3];
                let mut sq = [0.0; 3];
                let mut n = 0.0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                        if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                            continue;
                        }
                        n += 1.0;
                        for c in 0..3 {
                            let v = image.get(qx as usize, qy as usize, c.min(image.channels - 1));
                            sum[c] += v;
                            sq[c] += v * v;
                        }
                    }
                }
                for c in 0..3 {
                    let m = sum[c] / n;
                    f[3 + c] = m;
                    f[6 + c] = (sq[c] / n - m * m).max(0.0).sqrt();
                }
                f[9] = 2.0 * x as f64 / (w.max(2) - 1) as f64 - 1.0;
                f[10] = 2.0 * y as f64 / (h.max(2) - 1) as f64 - 1.0;
                if let Some(r) = residual {
                    for c in 0..4 {
                        f[11 + c] = r.get(x, y, c).abs();
                    }
                }
            }
        });
        out
    }
}

/// Residual driving the uncertainty loss: `SSIM'` plus weighted absolute depth
/// error where observed depth is valid.
pub fn uncertainty_residual(
    ssim_prime: &Image<f64>,
    rendered_depth: &Image<f64>,
    observed_depth: &Image<f64>,
    lambda_depth: f64,
) -> Result<Image<f64>> {
    ssim_prime.check_shape(rendered_depth)?;
    rendered_depth.check_shape(observed_depth)?;
    let mut r = ssim_prime.clone();
    for i in 0..r.data.len() {
        let d = observed_depth.data[i];
        if d > 0.0 {
            r.data[i] += lambda_depth * (rendered_depth.data[i] - d).abs();
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyLoss {
    pub value: f64,
    /// ∂loss/∂residual per pixel.
    pub grad_residual: Vec<f64>,
    /// ∂loss/∂β² per pixel.
    pub grad_beta2: Vec<f64>,
}

/// `mean(r / β²) + λ_reg · mean(ln β²)`.
pub fn uncertainty_loss(residual: &[f64], beta2: &[f64], lambda_reg: f64) -> Result<UncertaintyLoss> {
    if residual.len() != beta2.len() {
        return Err(shape_err(residual.len(), beta2.len()));
    }
    let n = residual.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad_residual = Vec::with_capacity(residual.len());
    let mut grad_beta2 = Vec::with_capacity(residual.len());
    for (r, b) in residual.iter().zip(beta2) {
        value += r / b + lambda_reg * b.ln();
        grad_residual.push(1.0 / (b * n));
        grad_beta2.push((lambda_reg / b - r / (b * b)) / n);
    }
    Ok(UncertaintyLoss {
        value: value / n,
        grad_residual,
        grad_beta2,
    })
}

/// Predictor plus its most recent β² map.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyField {
    pub mlp: Mlp,
    pub beta2: Option<Image<f64>>,
}

impl UncertaintyField {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        Self {
            mlp: Mlp::new(feature_dim, seed),
            beta2: None,
        }
    }

    /// Evaluates and caches the β² map for the given features.
    pub fn evaluate(&mut self, features: &[f64], width: usize, height: usize) -> Result<&Image<f64>> {
        let b = Image::from_vec(width, height, 1, self.mlp.predict_batch(features))?;
        self.beta2 = Some(b);
        Ok(self.beta2.as_ref().expect("just set"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    fn check(&self, o: &Self) -> Result<()> {
        if self.width != o.width || self.height != o.height {
            return Err(shape_err(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", o.width, o.height),
            ));
        }
        Ok(())
    }

    pub fn union(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&o.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn intersection_count(&self, o: &Self) -> Result<usize> {
        self.check(o)?;
        Ok(self.data.iter().zip(&o.data).filter(|(a, b)| **a && **b).count())
    }

    pub fn is_subset_of(&self, o: &Self) -> bool {
        self.width == o.width && self.height == o.height && self.data.iter().zip(&o.data).all(|(a, b)| !*a || *b)
    }

    /// Morphological dilation (`grow > 0`) or erosion with a square element.
    pub fn morph(&self, radius: usize, grow: bool) -> Self {
        let r = radius as i64;
        Self::from_fn(self.width, self.height, |x, y| {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                    let v = qx >= 0
                        && qy >= 0
                        && qx < self.width as i64
                        && qy < self.height as i64
                        && self.get(qx as usize, qy as usize);
                    any |= v;
                    all &= v;
                }
            }
            if grow {
                any
            } else {
                all
            }
        })
    }
}

/// `β² > δ_u` per pixel.
pub fn threshold_mask(beta2: &Image<f64>, delta_u: f64) -> BinaryMask {
    BinaryMask {
        width: beta2.width,
        height: beta2.height,
        data: beta2.data.iter().map(|b| *b > delta_u).collect(),
    }
}

/// Fraction of `candidate` covered by `uncertainty_mask`.
pub fn overlap_ratio(candidate: &BinaryMask, uncertainty_mask: &BinaryMask) -> Result<f64> {
    let n = candidate.count();
    if n == 0 {
        return Err(Error::EmptyCandidate);
    }
    Ok(candidate.intersection_count(uncertainty_mask)? as f64 / n as f64)
}

/// `M_u` merged with every candidate whose overlap ratio exceeds `δ_ru`.
/// Empty candidates are discarded.
pub fn reweighted_mask(m_u: &BinaryMask, candidates: &[BinaryMask], delta_ru: f64) -> Result<BinaryMask> {
    let mut out = m_u.clone();
    for c in candidates {
        match overlap_ratio(c, m_u) {
            Ok(rho) if rho > delta_ru => out = out.union(c)?,
            Ok(_) | Err(Error::EmptyCandidate) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Farthest-point sampling over the masked pixels. The first point is drawn with
/// a seeded generator.
pub fn sample_prompts(mask: &BinaryMask, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let pts: Vec<(usize, usize)> = (0..mask.data.len())
        .filter(|&i| mask.data[i])
        .map(|i| (i % mask.width, i / mask.width))
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    let count = count.min(pts.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..pts.len());
    let d2 = |a: (usize, usize), b: (usize, usize)| {
        let dx = a.0 as f64 - b.0 as f64;
        let dy = a.1 as f64 - b.1 as f64;
        dx * dx + dy * dy
    };
    let mut chosen = vec![pts[first]];
    let mut best: Vec<f64> = pts.iter().map(|p| d2(*p, pts[first])).collect();
    while chosen.len() < count {
        let next = (0..pts.len()).fold(0, |b, i| if best[i] > best[b] { i } else { b });
        chosen.push(pts[next]);
        for (i, p) in pts.iter().enumerate() {
            best[i] = best[i].min(d2(*p, pts[next]));
        }
    }
    Ok(chosen)
}

/// Source of segmentation candidates for prompt points.
pub trait SegmentationProvider {
    fn segment(&self, frame: usize, image: &Image<f64>, prompts: &[(usize, usize)]) -> Vec<BinaryMask>;
}

/// Returns the ground-truth instance masks hit by at least one prompt.
#[derive(Debug, Clone, Default)]
pub struct OracleSegmenter {
    /// `instances[frame]` lists that frame's instance masks.
    pub instances: Vec<Vec<BinaryMask>>,
}

impl SegmentationProvider for OracleSegmenter {
    fn segment(&self, frame: usize, _image: &Image<f64>, prompts: &[(usize, usize)]) -> Vec<BinaryMask> {
        let Some(masks) = self.instances.get(frame) else { return Vec::new() };
        masks
            .iter()
            .filter(|m| prompts.iter().any(|&(x, y)| m.get(x, y)))
            .cloned()
            .collect()
    }
}

/// Oracle candidates degraded into dilated, eroded and half-split variants, plus
/// a box around every prompt that misses all instances.
#[derive(Debug, Clone)]
pub struct NoisySegmenter {
    pub oracle: OracleSegmenter,
    pub box_half: usize,
}

impl SegmentationProvider for NoisySegmenter {
    fn segment(&self, frame: usize, image: &Image<f64>, prompts: &[(usize, usize)]) -> Vec<BinaryMask> {
        let mut out = Vec::new();
        for m in self.oracle.segment(frame, image, prompts) {
            out.push(m.morph(1, true));
            out.push(m.morph(1, false));
            let (w, h) = (m.width, m.height);
            let xs: Vec<usize> = (0..m.data.len()).filter(|&i| m.data[i]).map(|i| i % w).collect();
            if let (Some(lo), Some(hi)) = (xs.iter().min(), xs.iter().max()) {
                let mid = (lo + hi) / 2;
                out.push(BinaryMask::from_fn(w, h, |x, y| m.get(x, y) && x <= mid));
                out.push(BinaryMask::from_fn(w, h, |x, y| m.get(x, y) && x > mid));
            }
        }
        let inst = self.oracle.instances.get(frame);
        for &(px, py) in prompts {
            let hit = inst.is_some_and(|ms| ms.iter().any(|m| m.get(px, py)));
            if !hit {
                let b = self.box_half;
                out.push(BinaryMask::from_fn(image.width, image.height, |x, y| {
                    x + b >= px && x <= px + b && y + b >= py && y <= py + b
                }));
            }
        }
        out
    }
}

const BETA_MAGIC: &[u8; 8] = b"S4DBETA\0";

/// β² grid as little-endian f32 after a 16-byte header (magic, width, height).
pub fn write_beta2<W: Write>(mut w: W, beta2: &Image<f64>) -> Result<()> {
    w.write_all(BETA_MAGIC)?;
    w.write_all(&(beta2.width as u32).to_le_bytes())?;
    w.write_all(&(beta2.height as u32).to_le_bytes())?;
    for v in &beta2.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_beta2<R: Read>(mut r: R) -> Result<Image<f64>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..8] != BETA_MAGIC {
        return Err(Error::Format("not a β² grid".into()));
    }
    let w = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; w * h * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Image::from_vec(w, h, 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;
    use proptest::prelude::*;
    use rand::Rng;

    fn block(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn default_thresholds() {
        assert_eq!(DEFAULT_DELTA_U, 3.5);
        assert_eq!(DEFAULT_DELTA_RU, 0.2);
    }

    #[test]
    fn threshold_examples() {
        let uniform = Image::filled(20, 20, 1, 0.1);
        assert!(threshold_mask(&uniform, DEFAULT_DELTA_U).is_empty());
        let mut b = uniform.clone();
        for y in 5..15 {
            for x in 3..13 {
                b.set(x, y, 0, 4.0);
            }
        }
        assert_eq!(threshold_mask(&b, 3.5), block(20, 20, 3, 5, 13, 15));
    }

    #[test]
    fn overlap_examples() {
        let mu = block(10, 10, 0, 0, 5, 10);
        assert_eq!(overlap_ratio(&block(10, 10, 1, 1, 3, 3), &mu).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&block(10, 10, 4, 0, 6, 2), &mu).unwrap(), 0.5);
        assert_eq!(overlap_ratio(&BinaryMask::empty(10, 10), &mu).unwrap_err(), Error::EmptyCandidate);
    }

    #[test]
    fn reweighted_examples() {
        let mu = block(10, 10, 0, 0, 5, 5);
        assert_eq!(reweighted_mask(&mu, &[], 0.2).unwrap(), mu);
        // 10 pixels, 1 inside: ρ = 0.1
        let weak = block(10, 10, 4, 4, 9, 6);
        assert_eq!(overlap_ratio(&weak, &mu).unwrap(), 0.1);
        assert_eq!(reweighted_mask(&mu, &[weak.clone()], 0.2).unwrap(), mu);
        let strong = block(10, 10, 3, 3, 6, 6);
        let merged = reweighted_mask(&mu, &[weak, strong.clone(), BinaryMask::empty(10, 10)], 0.2).unwrap();
        assert_eq!(merged, mu.union(&strong).unwrap());
    }

    fn arb_mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), w * h).prop_map(move |data| BinaryMask { width: w, height: h, data })
    }

    proptest! {
        #[test]
        fn mu_is_subset_of_rum(mu in arb_mask(8, 6), cands in prop::collection::vec(arb_mask(8, 6), 0..5), d in 0.0f64..1.0) {
            let r = reweighted_mask(&mu, &cands, d).unwrap();
            prop_assert!(mu.is_subset_of(&r));
        }

        #[test]
        fn rum_is_monotone(mu in arb_mask(8, 6), extra in arb_mask(8, 6), cands in prop::collection::vec(arb_mask(8, 6), 0..5)) {
            let bigger = mu.union(&extra).unwrap();
            let a = reweighted_mask(&mu, &cands, 0.2).unwrap();
            let b = reweighted_mask(&bigger, &cands, 0.2).unwrap();
            prop_assert!(a.is_subset_of(&b));
        }

        #[test]
        fn overlap_matches_pixel_count(c in arb_mask(7, 7), m in arb_mask(7, 7)) {
            let mut inside = 0usize;
            let mut total = 0usize;
            for y in 0..7 {
                for x in 0..7 {
                    if c.get(x, y) {
                        total += 1;
                        if m.get(x, y) {
                            inside += 1;
                        }
                    }
                }
            }
            match overlap_ratio(&c, &m) {
                Ok(r) => prop_assert_eq!(r, inside as f64 / total as f64),
                Err(e) => { prop_assert_eq!(total, 0); prop_assert_eq!(e, Error::EmptyCandidate); }
            }
        }
    }

    #[test]
    fn prompts_examples() {
        let mut single = BinaryMask::empty(9, 9);
        single.set(4, 6, true);
        assert_eq!(sample_prompts(&single, 3, 0).unwrap(), vec![(4, 6)]);
        let blobs = block(30, 10, 1, 1, 4, 4).union(&block(30, 10, 25, 5, 28, 8)).unwrap();
        for seed in 0..10 {
            let p = sample_prompts(&blobs, 2, seed).unwrap();
            let left = p.iter().filter(|(x, _)| *x < 10).count();
            assert_eq!(left, 1);
        }
        let small = block(10, 10, 0, 0, 2, 2);
        let mut all = sample_prompts(&small, 50, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(sample_prompts(&BinaryMask::empty(3, 3), 2, 0).unwrap_err(), Error::EmptyMask);
    }

    #[test]
    fn loss_examples() {
        let b = vec![2.0; 10];
        let l = uncertainty_loss(&vec![0.0; 10], &b, 0.5).unwrap();
        assert!((l.value - 0.5 * 2f64.ln()).abs() < 1e-15);
        // doubling β² halves the residual weight
        let a = uncertainty_loss(&[1.0], &[1.0], 0.0).unwrap();
        let d = uncertainty_loss(&[1.0], &[2.0], 0.0).unwrap();
        assert_eq!(d.grad_residual[0], 0.5 * a.grad_residual[0]);
        assert!(uncertainty_loss(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let r = [0.3, 1.7, 0.05, 2.2];
        let b = [0.4, 3.0, 0.15, 1.1];
        let l = uncertainty_loss(&r, &b, 0.5).unwrap();
        for i in 0..4 {
            let h = 1e-6 * b[i];
            let mut p = b;
            p[i] += h;
            let mut m = b;
            m[i] -= h;
            let fd = (uncertainty_loss(&r, &p, 0.5).unwrap().value - uncertainty_loss(&r, &m, 0.5).unwrap().value) / (2.0 * h);
            assert!((fd - l.grad_beta2[i]).abs() <= 1e-4 * fd.abs().max(l.grad_beta2[i].abs()));
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mlp = Mlp::new(FEATURE_DIM, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<f64> = (0..6 * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let an = mlp.backward_batch(&feats, &g);
        let f = |m: &Mlp| m.predict_batch(&feats).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-6;
        for i in (0..an.len()).step_by(37) {
            let mut p = mlp.clone();
            p.params[i] += h;
            let mut m = mlp.clone();
            m.params[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn floor_and_initial_value() {
        let mlp = Mlp::new(FEATURE_DIM, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let f: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(mlp.predict(&f) >= BETA2_FLOOR);
        }
        assert!((Mlp::new(FEATURE_DIM, 0).predict(&[0.0; FEATURE_DIM]) - 1.0).abs() < 0.3);
    }

    #[test]
    fn training_reaches_closed_form_optimum() {
        // Two pixel populations with frozen residuals; β² should approach r / λ_reg.
        let n = 64;
        let mut feats = vec![0.0; n * FEATURE_DIM];
        let mut res = vec![0.0; n];
        for i in 0..n {
            let dynamic = i % 2 == 0;
            feats[i * FEATURE_DIM + 11] = if dynamic { 1.0 } else { 0.0 };
            res[i] = if dynamic { 2.0 } else { 0.1 };
        }
        let mut mlp = Mlp::new(FEATURE_DIM, 1);
        let mut adam = Adam::new(5e-3, mlp.params.len());
        for _ in 0..3000 {
            let b = mlp.predict_batch(&feats);
            let l = uncertainty_loss(&res, &b, DEFAULT_LAMBDA_REG).unwrap();
            let g = mlp.backward_batch(&feats, &l.grad_beta2);
            adam.update(&mut mlp.params, &g);
        }
        let b = mlp.predict_batch(&feats);
        assert!((b[0] - 4.0).abs() < 0.05, "{}", b[0]);
        assert!((b[1] - 0.2).abs() < 0.02, "{}", b[1]);
    }

    #[test]
    fn features_shape_and_content() {
        let mut img = Image::zeros(6, 5, 3);
        img.set(2, 2, 0, 1.0);
        let mut r = Image::zeros(6, 5, 4);
        r.set(1, 1, 3, -0.7);
        let f = LocalStatsFeatures.features(&img, Some(&r));
        assert_eq!(f.len(), 6 * 5 * FEATURE_DIM);
        let at = |x: usize, y: usize| &f[(y * 6 + x) * FEATURE_DIM..(y * 6 + x + 1) * FEATURE_DIM];
        assert_eq!(at(2, 2)[0], 1.0);
        assert!((at(2, 2)[3] - 1.0 / 25.0).abs() < 1e-15);
        assert_eq!(at(0, 0)[9], -1.0);
        assert_eq!(at(5, 4)[10], 1.0);
        assert_eq!(at(1, 1)[14], 0.7);
    }

    #[test]
    fn segmenters() {
        let inst = block(20, 20, 5, 5, 11, 11);
        let oracle = OracleSegmenter { instances: vec![vec![inst.clone()]] };
        let img = Image::zeros(20, 20, 3);
        assert_eq!(oracle.segment(0, &img, &[(6, 6)]), vec![inst.clone()]);
        assert!(oracle.segment(0, &img, &[(0, 0)]).is_empty());
        let noisy = NoisySegmenter { oracle, box_half: 2 };
        let c = noisy.segment(0, &img, &[(6, 6), (15, 15)]);
        assert_eq!(c.len(), 5);
        assert!(inst.is_subset_of(&c[0]));
        assert!(c[1].is_subset_of(&inst));
        assert_eq!(c[2].union(&c[3]).unwrap(), inst);
        assert_eq!(c[4].count(), 25);
    }

    #[test]
    fn beta2_file_round_trip() {
        let img = Image::from_vec(3, 2, 1, vec![0.1, 0.5, 4.0, 3.25, 1e3, 0.125]).unwrap();
        let mut buf = Vec::new();
        write_beta2(&mut buf, &img).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        let back = read_beta2(&buf[..]).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(read_beta2(&b"garbage........................"[..]).is_err());
    }
}
