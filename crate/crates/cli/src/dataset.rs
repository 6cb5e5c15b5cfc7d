//! TUM RGB-D layout: image and depth files, association lists, trajectories,
//! and the ground-truth sidecars written by the generator.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{ImageBuffer, Luma, Rgb};
use splat4d::camera::PinholeCamera;
use splat4d::image::Image;
use splat4d::linalg::{Quat, Vec3};
use splat4d::se3::SE3Pose;
use splat4d::uncertainty::BinaryMask;

use crate::error::{read_to_string, CliError, Result};
use crate::synth::TrackRecord;

/// Largest rgb/depth timestamp gap accepted as one frame, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
/// Depth PNG units per meter.
pub const DEPTH_SCALE: f64 = 5000.0;
const FLO_MAGIC: f32 = 202021.25;
const FLO_UNKNOWN: f32 = 1e10;

pub fn timestamp_name(ts: f64) -> String {
    format!("{ts:.6}")
}

pub fn mask_name(frame: usize, object: usize) -> String {
    format!("{frame:06}_{object}.png")
}

/// `tx ty tz qx qy qz qw` with round-trip precision.
pub fn exact_pose_fields(p: &SE3Pose<f64>) -> String {
    let (t, q) = (p.translation, p.rotation);
    format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.x, q.y, q.z, q.w)
}

pub fn camera_line(c: &PinholeCamera<f64>) -> String {
    format!("# fx fy cx cy width height\n{} {} {} {} {} {}\n", c.fx, c.fy, c.cx, c.cy, c.width, c.height)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    Ok(())
}

fn save<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    path: &Path,
    buf: ImageBuffer<P, Vec<S>>,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    ensure_parent(path)?;
    buf.save(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB, values clamped to [0, 1].
pub fn write_rgb(path: &Path, img: &Image<f64>) -> Result<()> {
    let buf = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img.get(x, y, 0)), to_u8(img.get(x, y, 1)), to_u8(img.get(x, y, 2))])
    });
    save(path, buf)
}

/// 16-bit depth in units of 1/5000 m; 0 marks missing or out-of-range depth.
pub fn write_depth(path: &Path, depth: &Image<f64>) -> Result<()> {
    let buf = ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let d = depth.get(x as usize, y as usize, 0) * DEPTH_SCALE;
        Luma([if d.is_finite() && d > 0.0 && d.round() <= u16::MAX as f64 { d.round() as u16 } else { 0 }])
    });
    save(path, buf)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let buf = ImageBuffer::from_fn(m.width as u32, m.height as u32, |x, y| {
        Luma([if m.get(x as usize, y as usize) { 255u8 } else { 0 }])
    });
    save(path, buf)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_rgb(path: &Path) -> Result<Image<f64>> {
    let img = open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Image::from_vec(w, h, 3, data)?)
}

pub fn read_depth(path: &Path) -> Result<Image<f64>> {
    let img = open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f64 / DEPTH_SCALE).collect();
    Ok(Image::from_vec(w, h, 1, data)?)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.into_luma8();
    Ok(BinaryMask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw().into_iter().map(|v| v >= 128).collect(),
    })
}

/// Middlebury `.flo`: magic, width, height, then interleaved f32 flow.
pub fn write_flow(path: &Path, flow: &Image<f64>) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| CliError::io(path, e);
    w.write_f32::<LittleEndian>(FLO_MAGIC).map_err(io)?;
    w.write_i32::<LittleEndian>(flow.width as i32).map_err(io)?;
    w.write_i32::<LittleEndian>(flow.height as i32).map_err(io)?;
    for v in &flow.data {
        w.write_f32::<LittleEndian>(if v.is_finite() { *v as f32 } else { FLO_UNKNOWN }).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_flow(path: &Path) -> Result<Image<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    let mut r = bytes.as_slice();
    let bad = || CliError::malformed(path, "not a .flo file");
    if r.read_f32::<LittleEndian>().map_err(|_| bad())? != FLO_MAGIC {
        return Err(bad());
    }
    let w = r.read_i32::<LittleEndian>().map_err(|_| bad())?;
    let h = r.read_i32::<LittleEndian>().map_err(|_| bad())?;
    if w <= 0 || h <= 0 || r.len() != (w * h * 2) as usize * 4 {
        return Err(bad());
    }
    let data = (0..w * h * 2)
        .map(|_| {
            let v = r.read_f32::<LittleEndian>().expect("length checked");
            if v.abs() >= 1e9 {
                f64::NAN
            } else {
                v as f64
            }
        })
        .collect();
    Ok(Image::from_vec(w as usize, h as usize, 2, data)?)
}

pub fn format_tracks(tracks: &[TrackRecord], objects: usize) -> String {
    let mut s = format!("# {objects} objects; per line: object then u v per frame, '- -' where hidden\n");
    for t in tracks {
        s.push_str(&t.object.to_string());
        for p in &t.pixels {
            match p {
                Some([u, v]) => s.push_str(&format!(" {u} {v}")),
                None => s.push_str(" - -"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_tracks(text: &str, path: &Path) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for line in content_lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() % 2 != 1 {
            return Err(CliError::malformed(path, "track line needs an object and coordinate pairs"));
        }
        let object = f[0]
            .parse()
            .map_err(|_| CliError::malformed(path, format!("bad object index `{}`", f[0])))?;
        let pixels = f[1..]
            .chunks(2)
            .map(|c| match (c[0], c[1]) {
                ("-", "-") => Ok(None),
                (a, b) => match (a.parse::<f64>(), b.parse::<f64>()) {
                    (Ok(u), Ok(v)) => Ok(Some([u, v])),
                    _ => Err(CliError::malformed(path, format!("bad track coordinate `{a} {b}`"))),
                },
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(TrackRecord { object, pixels });
    }
    Ok(out)
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// `timestamp tx ty tz qx qy qz qw` lines.
pub fn parse_trajectory(text: &str) -> Result<Vec<(f64, SE3Pose<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in content_lines(text).enumerate() {
        let bad = |m: &str| CliError::MalformedTrajectory(format!("entry {}: {m}", n + 1));
        let f: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number"))))
            .collect::<Result<_>>()?;
        if f.len() != 8 {
            return Err(bad(&format!("expected 8 fields, got {}", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        let q = Quat::new(f[7], f[4], f[5], f[6]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(bad("quaternion is not unit length"));
        }
        if out.last().is_some_and(|(t, _): &(f64, _)| f[0] <= *t) {
            return Err(bad("timestamps must increase"));
        }
        out.push((f[0], SE3Pose::new(q, Vec3::new(f[1], f[2], f[3]))));
    }
    Ok(out)
}

fn parse_list(text: &str, path: &Path) -> Result<Vec<(f64, String)>> {
    content_lines(text)
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match (f.first().map(|s| s.parse::<f64>()), f.get(1)) {
                (Some(Ok(t)), Some(name)) => Ok((t, name.to_string())),
                _ => Err(CliError::malformed(path, format!("bad list entry `{l}`"))),
            }
        })
        .collect()
}

/// Greedy one-to-one matching of rgb and depth stamps by smallest gap, keeping
/// gaps within `tolerance`. Returned in rgb order.
pub fn associate(rgb: &[(f64, String)], depth: &[(f64, String)], tolerance: f64) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (ta, _)) in rgb.iter().enumerate() {
        for (j, (tb, _)) in depth.iter().enumerate() {
            let d = (ta - tb).abs();
            if d <= tolerance {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_a = vec![false; rgb.len()];
    let mut used_b = vec![false; depth.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumFrame {
    pub timestamp: f64,
    pub depth_timestamp: f64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumDataset {
    pub root: PathBuf,
    pub camera: PinholeCamera<f64>,
    pub frames: Vec<TumFrame>,
    /// Evaluation only.
    pub groundtruth: Vec<(f64, SE3Pose<f64>)>,
}

fn default_camera() -> PinholeCamera<f64> {
    PinholeCamera::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid intrinsics")
}

fn parse_camera(text: &str, path: &Path) -> Result<PinholeCamera<f64>> {
    let line = content_lines(text)
        .next()
        .ok_or_else(|| CliError::malformed(path, "no intrinsics line"))?;
    let f: Vec<&str> = line.split_whitespace().collect();
    let bad = || CliError::malformed(path, "expected `fx fy cx cy width height`");
    if f.len() != 6 {
        return Err(bad());
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
    let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
    Ok(PinholeCamera::new(num(0)?, num(1)?, num(2)?, num(3)?, int(4)?, int(5)?)?)
}

/// Parses a TUM-layout directory. Frames come from `associations.txt` when
/// present, otherwise from matching `rgb.txt` against `depth.txt`.
pub fn ingest_tum(dir: &Path) -> Result<TumDataset> {
    let assoc_path = dir.join("associations.txt");
    let mut frames = Vec::new();
    if assoc_path.is_file() {
        for l in content_lines(&read_to_string(&assoc_path)?) {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = || CliError::malformed(&assoc_path, format!("bad association `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            let ta: f64 = f[0].parse().map_err(|_| bad())?;
            let tb: f64 = f[2].parse().map_err(|_| bad())?;
            if (ta - tb).abs() > ASSOCIATION_TOLERANCE {
                continue;
            }
            frames.push(TumFrame {
                timestamp: ta,
                depth_timestamp: tb,
                rgb: dir.join(f[1]),
                depth: dir.join(f[3]),
            });
        }
    } else {
        let (rp, dp) = (dir.join("rgb.txt"), dir.join("depth.txt"));
        if !rp.is_file() || !dp.is_file() {
            return Err(CliError::MissingAssociation(format!(
                "{} has neither associations.txt nor rgb.txt and depth.txt",
                dir.display()
            )));
        }
        let rgb = parse_list(&read_to_string(&rp)?, &rp)?;
        let depth = parse_list(&read_to_string(&dp)?, &dp)?;
        for (i, j) in associate(&rgb, &depth, ASSOCIATION_TOLERANCE) {
            frames.push(TumFrame {
                timestamp: rgb[i].0,
                depth_timestamp: depth[j].0,
                rgb: dir.join(&rgb[i].1),
                depth: dir.join(&depth[j].1),
            });
        }
    }
    if frames.is_empty() {
        return Err(CliError::MissingAssociation(format!(
            "no rgb/depth pairs within {ASSOCIATION_TOLERANCE} s in {}",
            dir.display()
        )));
    }
    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.is_file() {
        parse_trajectory(&read_to_string(&gt_path)?)?
    } else {
        Vec::new()
    };
    let cam_path = dir.join("camera.txt");
    let camera = if cam_path.is_file() {
        parse_camera(&read_to_string(&cam_path)?, &cam_path)?
    } else {
        default_camera()
    };
    Ok(TumDataset {
        root: dir.to_path_buf(),
        camera,
        frames,
        groundtruth,
    })
}

impl TumDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rgb(&self, i: usize) -> Result<Image<f64>> {
        read_rgb(&self.frames[i].rgb)
    }

    pub fn depth(&self, i: usize) -> Result<Image<f64>> {
        read_depth(&self.frames[i].depth)
    }

    /// Shutter-open sharp frame written by the generator, if present.
    pub fn sharp(&self, i: usize) -> Result<Option<Image<f64>>> {
        let name = self.frames[i].rgb.file_name().map(PathBuf::from).unwrap_or_default();
        let p = self.root.join("sharp").join(name);
        if p.is_file() {
            read_rgb(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Ground-truth pose closest to `ts` within the association tolerance.
    pub fn groundtruth_pose(&self, ts: f64) -> Option<SE3Pose<f64>> {
        self.groundtruth
            .iter()
            .map(|(t, p)| ((t - ts).abs(), p))
            .filter(|(d, _)| *d <= ASSOCIATION_TOLERANCE)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| *p)
    }

    /// Instance masks of frame `i`, one per scripted object.
    pub fn instance_masks(&self, i: usize) -> Result<Vec<BinaryMask>> {
        let dir = self.root.join("gt_masks");
        let mut out = Vec::new();
        loop {
            let p = dir.join(mask_name(i, out.len()));
            if !p.is_file() {
                break;
            }
            out.push(read_mask(&p)?);
        }
        Ok(out)
    }

    /// Union of the instance masks of frame `i`, empty when none exist.
    pub fn dynamic_mask(&self, i: usize) -> Result<BinaryMask> {
        let cam = &self.camera;
        let mut m = BinaryMask::empty(cam.width, cam.height);
        for inst in self.instance_masks(i)? {
            m = m.union(&inst)?;
        }
        Ok(m)
    }

    pub fn tracks(&self) -> Result<Vec<TrackRecord>> {
        let p = self.root.join("gt_tracks.txt");
        if !p.is_file() {
            return Ok(Vec::new());
        }
        let tracks = parse_tracks(&read_to_string(&p)?, &p)?;
        if tracks.iter().any(|t| t.pixels.len() != self.frames.len()) {
            return Err(CliError::malformed(&p, "track length differs from the frame count"));
        }
        Ok(tracks)
    }

    pub fn flow(&self, i: usize) -> Result<Image<f64>> {
        read_flow(&self.root.join("gt_flow").join(format!("{i:06}.flo")))
    }
}
