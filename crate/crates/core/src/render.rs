//! Perspective point splatting with normal-based culling and a z-buffer that keeps
//! exact pixel ownership, so pixel labels can be carried back to 3D points.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Scene, Vec3};

pub const DEFAULT_RESOLUTION: u32 = 768;
pub const FOV_RANGE_DEG: (f64, f64) = (30.0, 50.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

/// Orthonormal camera frame: `right`, image-up, `forward`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Frame {
    pub eye: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub focal: f64,
}

impl Camera {
    pub fn new(eye: Vec3, look_at: Vec3, up: Vec3, fov_deg: f64, width: u32, height: u32) -> Result<Self> {
        let dir = look_at - eye;
        if dir.norm() < 1e-12 {
            return Err(Error::Geometry("camera eye coincides with look-at point".into()));
        }
        if up.norm() < 1e-12 || dir.normalize().cross(&up.normalize()).norm() < 1e-9 {
            return Err(Error::Geometry("camera up vector is parallel to the view direction".into()));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Geometry(format!("field of view {fov_deg} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Geometry("image has zero size".into()));
        }
        let up = up.normalize();
        Ok(Self {
            eye: eye.into(),
            look_at: look_at.into(),
            up: up.into(),
            fov_deg,
            width,
            height,
        })
    }

    pub(crate) fn frame(&self) -> Frame {
        let eye = Vec3::from(self.eye);
        let forward = (Vec3::from(self.look_at) - eye).normalize();
        let right = forward.cross(&Vec3::from(self.up)).normalize();
        let up = right.cross(&forward);
        let focal = (self.height as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        Frame {
            eye,
            right,
            up,
            forward,
            focal,
        }
    }

    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }
}

/// The four top corners of the bounding box, in the order
/// `(min x, min y)`, `(max x, min y)`, `(min x, max y)`, `(max x, max y)`.
pub fn top_corners(min: Vec3, max: Vec3) -> [Vec3; 4] {
    [
        Vec3::new(min.x, min.y, max.z),
        Vec3::new(max.x, min.y, max.z),
        Vec3::new(min.x, max.y, max.z),
        Vec3::new(max.x, max.y, max.z),
    ]
}

/// Camera at top corner `corner` of the scene's bounding box, aimed at its center.
pub fn camera_at_corner(scene: &Scene, corner: usize, fov_deg: f64, width: u32, height: u32) -> Result<Camera> {
    let (min, max) = scene
        .bounds()
        .ok_or_else(|| Error::Geometry("cannot place a camera for an empty scene".into()))?;
    let extent = max - min;
    if extent.x * extent.y * extent.z <= 0.0 {
        return Err(Error::Geometry(format!(
            "degenerate bounding box with extent ({}, {}, {})",
            extent.x, extent.y, extent.z
        )));
    }
    let eye = top_corners(min, max)[corner % 4];
    let center = (min + max) / 2.0;
    let dir = (center - eye).normalize();
    let up = if dir.z.abs() >= 1f64.to_radians().cos() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    Camera::new(eye, center, up, fov_deg, width, height)
}

/// Random camera: uniformly chosen top corner, field of view uniform in [30, 50] degrees.
pub fn make_camera<R: Rng + ?Sized>(scene: &Scene, rng: &mut R, width: u32, height: u32) -> Result<Camera> {
    let corner = rng.random_range(0..4);
    let fov = rng.random_range(FOV_RANGE_DEG.0..=FOV_RANGE_DEG.1);
    camera_at_corner(scene, corner, fov, width, height)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f32; 3],
    pub near: f64,
    pub splat_near: u32,
    pub splat_far: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.5, 0.5, 0.5],
            near: 1e-3,
            splat_near: 6,
            splat_far: 2,
        }
    }
}

/// Side length of a splat at camera distance `d` given the survivors' distance range.
pub fn splat_side(d: f64, d_min: f64, d_max: f64, cfg: &RenderConfig) -> u32 {
    let (near, far) = (cfg.splat_near as f64, cfg.splat_far as f64);
    let t = if d_max > d_min { (d - d_min) / (d_max - d_min) } else { 0.0 };
    let s = (near - (near - far) * t).round();
    s.clamp(far.min(near), near.max(far)) as u32
}

/// Inclusive pixel span `[c - floor(s/2), c + ceil(s/2) - 1]` covered by a splat.
pub fn splat_span(center: i64, side: u32) -> (i64, i64) {
    let s = side as i64;
    (center - s / 2, center + (s + 1) / 2 - 1)
}

/// An RGB image with channels in [0, 1], row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![color; width as usize * height as usize],
        }
    }

    /// Interleaved 8-bit RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width as usize * height as usize * 3 {
            return Err(Error::arg(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        Ok(Self { width, height, data })
    }

    /// Binary PPM (`P6`).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_rgb8())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub width: u32,
    pub height: u32,
    pub image: Image,
    /// Owning point per pixel.
    pub owner: Vec<Option<u32>>,
    /// Euclidean camera distance of the owner, `+inf` when unowned.
    pub depth: Vec<f64>,
    /// Pixel under each point's projected center, when that pixel is owned by the point.
    pub center_pixel: Vec<Option<(u32, u32)>>,
    /// Continuous image coordinates of every point that survived culling and clipping.
    pub projected: Vec<Option<[f64; 2]>>,
    /// Splat side of each surviving point (0 otherwise).
    pub splat: Vec<u8>,
    pub survivors: usize,
}

impl RenderResult {
    /// True when no point survived culling and clipping.
    pub fn is_empty(&self) -> bool {
        self.survivors == 0
    }

    pub fn pixel_index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    /// Owner map as little-endian `i32`, `-1` for unowned pixels.
    pub fn owner_map_bytes(&self) -> Vec<u8> {
        self.owner
            .iter()
            .flat_map(|o| o.map_or(-1i32, |i| i as i32).to_le_bytes())
            .collect()
    }
}

struct Projected {
    index: usize,
    px: i64,
    py: i64,
    depth: f64,
}

/// Continuous image coordinates of `p`, or `None` behind the near plane.
pub(crate) fn project(frame: &Frame, p: &Vec3, width: u32, height: u32, near: f64) -> Option<[f64; 2]> {
    let v = p - frame.eye;
    let z = v.dot(&frame.forward);
    if z <= near {
        return None;
    }
    let x = frame.focal * v.dot(&frame.right) / z;
    let y = frame.focal * v.dot(&frame.up) / z;
    Some([width as f64 / 2.0 + x, height as f64 / 2.0 - y])
}

/// True when the normal makes an angle of at most 90 degrees with the
/// eye-to-point direction.
pub fn is_culled(eye: &Vec3, position: &Vec3, normal: &Vec3) -> bool {
    normal.dot(&(position - eye)) >= 0.0
}

pub fn render(scene: &Scene, camera: &Camera, cfg: &RenderConfig) -> RenderResult {
    let (w, h) = (camera.width, camera.height);
    let n = scene.len();
    let frame = camera.frame();
    let mut projected = vec![None; n];
    let mut survivors = Vec::new();

    for (i, p) in scene.points().iter().enumerate() {
        if is_culled(&frame.eye, &p.position, &p.normal) {
            continue;
        }
        let Some(uv) = project(&frame, &p.position, w, h, cfg.near) else {
            continue;
        };
        let (px, py) = (uv[0].floor(), uv[1].floor());
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        projected[i] = Some(uv);
        survivors.push(Projected {
            index: i,
            px: px as i64,
            py: py as i64,
            depth: (p.position - frame.eye).norm(),
        });
    }

    let d_min = survivors.iter().map(|s| s.depth).fold(f64::INFINITY, f64::min);
    let d_max = survivors.iter().map(|s| s.depth).fold(f64::NEG_INFINITY, f64::max);
    let npix = w as usize * h as usize;
    let mut owner: Vec<Option<u32>> = vec![None; npix];
    let mut depth = vec![f64::INFINITY; npix];
    let mut splat = vec![0u8; n];

    for s in &survivors {
        let side = splat_side(s.depth, d_min, d_max, cfg);
        splat[s.index] = side as u8;
        let (x0, x1) = splat_span(s.px, side);
        let (y0, y1) = splat_span(s.py, side);
        for y in y0.max(0)..=y1.min(h as i64 - 1) {
            let row = y as usize * w as usize;
            for x in x0.max(0)..=x1.min(w as i64 - 1) {
                let k = row + x as usize;
                // Strict comparison: survivors are visited in index order, so equal
                // depths resolve to the smaller point index.
                if s.depth < depth[k] {
                    depth[k] = s.depth;
                    owner[k] = Some(s.index as u32);
                }
            }
        }
    }

    let points = scene.points();
    let mut image = Image::filled(w, h, cfg.background);
    for (k, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            let c = points[*i as usize].color;
            image.data[k] = [c.x as f32, c.y as f32, c.z as f32];
        }
    }
    let mut center_pixel = vec![None; n];
    for s in &survivors {
        let k = s.py as usize * w as usize + s.px as usize;
        if owner[k] == Some(s.index as u32) {
            center_pixel[s.index] = Some((s.px as u32, s.py as u32));
        }
    }

    RenderResult {
        width: w,
        height: h,
        image,
        owner,
        depth,
        center_pixel,
        projected,
        splat,
        survivors: survivors.len(),
    }
}

/// One `(point, representative pixel)` entry per point owning at least one pixel,
/// in ascending point order. The representative is the point's center pixel when
/// owned, otherwise the owned pixel nearest the projected center (ties: smaller
/// row, then column).
pub fn visible_points(result: &RenderResult) -> Vec<(usize, (u32, u32))> {
    let n = result.center_pixel.len();
    let mut best: Vec<Option<((u32, u32), f64)>> = vec![None; n];
    for v in 0..result.height {
        for u in 0..result.width {
            let Some(i) = result.owner[result.pixel_index(u, v)] else {
                continue;
            };
            let i = i as usize;
            if result.center_pixel[i].is_some() {
                best[i] = Some((result.center_pixel[i].unwrap(), -1.0));
                continue;
            }
            let c = result.projected[i].expect("owner survived projection");
            let d = (u as f64 + 0.5 - c[0]).powi(2) + (v as f64 + 0.5 - c[1]).powi(2);
            if best[i].is_none_or(|(_, bd)| d < bd) {
                best[i] = Some(((u, v), d));
            }
        }
    }
    best.into_iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|(px, _)| (i, px)))
        .collect()
}
