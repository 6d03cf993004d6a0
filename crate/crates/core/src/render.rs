//! Gaussian splat rasterizer.
//!
//! Primitives are projected with the usual EWA linearization, sorted front
//! to back and alpha composited. The fast path bins splats into 16x16 pixel
//! tiles and renders tile rows in parallel; [`render_reference`] composites
//! every pixel against every primitive and is kept as a test oracle.

use crate::config::CameraConfig;
use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::human::HumanActor;
use crate::splat::{GaussianPrimitive, SplatScene};
use image::ImageEncoder;
use nalgebra::{Matrix2x3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::path::Path;

pub const NEAR_PLANE: f64 = 0.05;
/// Isotropic screen-space dilation added to every projected covariance (px^2).
pub const DILATION: f64 = 0.3;
pub const TILE: usize = 16;
const T_MIN: f32 = 1e-6;

/// Pinhole camera in the OpenCV convention: x right, y down, z forward.
/// Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Pose3,
}

impl CameraModel {
    /// Square pixels with the principal point at the image center.
    pub fn new(width: usize, height: usize, hfov: f64, world_to_camera: Pose3) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("camera size must be positive".into()));
        }
        if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(Error::InvalidParameter(format!("hfov {hfov} rad outside (0, pi)")));
        }
        let f = width as f64 / (2.0 * (hfov / 2.0).tan());
        Ok(Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera,
        })
    }

    /// Camera at `position` looking horizontally along `yaw` (z up world).
    pub fn looking(width: usize, height: usize, hfov: f64, position: Vector3<f64>, yaw: f64) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        let rot = Matrix3::from_columns(&[
            Vector3::new(s, -c, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(c, s, 0.0),
        ]);
        let r = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
        let cam_to_world = Pose3::from_parts(Translation3::from(position), r);
        Self::new(width, height, hfov, cam_to_world.inverse())
    }

    /// Robot-mounted camera for a planar robot pose.
    pub fn robot_mounted(cfg: &CameraConfig, x: f64, y: f64, yaw: f64, ground_z: f64) -> Result<Self> {
        Self::looking(
            cfg.width,
            cfg.height,
            cfg.hfov_deg.to_radians(),
            Vector3::new(x, y, ground_z + cfg.mount_height),
            yaw,
        )
    }

    pub fn hfov(&self) -> f64 {
        2.0 * (self.width as f64 / (2.0 * self.fx)).atan()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.world_to_camera.inverse().translation.vector
    }

    /// Pixel coordinates and depth of a world point in front of the near plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let q = self.world_to_camera * nalgebra::Point3::from(*p);
        (q.z > NEAR_PLANE).then(|| (self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy, q.z))
    }

    /// True if `p` is in front of the near plane and projects onto the image.
    pub fn in_frustum(&self, p: &Vector3<f64>) -> bool {
        self.project(p).is_some_and(|(u, v, _)| {
            u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in [0, 1].
    pub rgb: Vec<[f32; 3]>,
    /// Alpha-weighted depth, sum of T * alpha * z per pixel.
    pub depth: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        self.rgb[y * self.width + x]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.rgb
            .iter()
            .zip(&other.rgb)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f32::max)
    }
}

/// A primitive after projection into one camera.
#[derive(Debug, Clone, Copy)]
struct Splat {
    mx: f32,
    my: f32,
    /// Inverse 2D covariance (a, b, c) of [[a, b], [b, c]].
    conic: [f32; 3],
    opacity: f32,
    color: [f32; 3],
    depth: f32,
    /// Pixel radius beyond which the 3 sigma cutoff always applies.
    radius: f32,
}

impl Splat {
    #[inline]
    fn alpha(&self, px: f32, py: f32) -> f32 {
        let (dx, dy) = (px - self.mx, py - self.my);
        let [a, b, c] = self.conic;
        let power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if power > 9.0 {
            0.0
        } else {
            self.opacity * (-0.5 * power).exp()
        }
    }

    fn key(&self) -> [f32; 10] {
        let [a, b, c] = self.conic;
        let [r, g, bl] = self.color;
        [self.depth, self.mx, self.my, a, b, c, self.opacity, r, g, bl]
    }
}

/// Depth first, then content, so equal-depth splats order the same way
/// regardless of input order.
fn splat_order(a: &Splat, b: &Splat) -> Ordering {
    a.key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn project_one(cam: &CameraModel, p: &GaussianPrimitive) -> Option<Splat> {
    let w = cam.world_to_camera.rotation.to_rotation_matrix().into_inner();
    let t = cam.world_to_camera * nalgebra::Point3::from(p.mean);
    if t.z <= NEAR_PLANE {
        return None;
    }
    // clamp the linearization point like the reference rasterizer does
    let limx = 1.3 * (cam.width as f64 / 2.0) / cam.fx;
    let limy = 1.3 * (cam.height as f64 / 2.0) / cam.fy;
    let txc = (t.x / t.z).clamp(-limx, limx) * t.z;
    let tyc = (t.y / t.z).clamp(-limy, limy) * t.z;
    let j = Matrix2x3::new(
        cam.fx / t.z,
        0.0,
        -cam.fx * txc / (t.z * t.z),
        0.0,
        cam.fy / t.z,
        -cam.fy * tyc / (t.z * t.z),
    );
    let jw = j * w;
    let cov = jw * p.covariance() * jw.transpose();
    let (a, b, c) = (cov[(0, 0)] + DILATION, cov[(0, 1)], cov[(1, 1)] + DILATION);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda.sqrt()).ceil() + 1.0;
    let splat = Splat {
        mx: (cam.fx * t.x / t.z + cam.cx) as f32,
        my: (cam.fy * t.y / t.z + cam.cy) as f32,
        conic: [(c / det) as f32, (-b / det) as f32, (a / det) as f32],
        opacity: p.opacity as f32,
        color: [p.color.x as f32, p.color.y as f32, p.color.z as f32],
        depth: t.z as f32,
        radius: radius as f32,
    };
    splat.mx.is_finite().then_some(splat)
}

fn project_all<'a>(cam: &CameraModel, prims: impl Iterator<Item = &'a GaussianPrimitive>) -> Vec<Splat> {
    prims.filter_map(|p| project_one(cam, p)).collect()
}

fn to_bg(bg: [f64; 3]) -> [f32; 3] {
    bg.map(|v| v as f32)
}

/// Tile rasterizer. Splats are sorted once, binned into 16x16 tiles by
/// their 3 sigma bounding box, and each tile row is composited on its own
/// worker. A pixel stops once its transmittance drops below 1e-6.
pub fn render(prims: &[GaussianPrimitive], camera: &CameraModel, background: [f64; 3]) -> Image {
    render_splats(project_all(camera, prims.iter()), camera, to_bg(background))
}

fn render_splats(mut splats: Vec<Splat>, cam: &CameraModel, bg: [f32; 3]) -> Image {
    let (w, h) = (cam.width, cam.height);
    splats.sort_unstable_by(splat_order);
    let (tw, th) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tw * th];
    for (k, s) in splats.iter().enumerate() {
        let x0 = (s.mx - s.radius).floor().max(0.0);
        let y0 = (s.my - s.radius).floor().max(0.0);
        let x1 = (s.mx + s.radius).ceil().min(w as f32 - 1.0);
        let y1 = (s.my + s.radius).ceil().min(h as f32 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in y0 as usize / TILE..=y1 as usize / TILE {
            for tx in x0 as usize / TILE..=x1 as usize / TILE {
                bins[ty * tw + tx].push(k as u32);
            }
        }
    }

    let rows: Vec<(Vec<[f32; 3]>, Vec<f32>)> = (0..th)
        .into_par_iter()
        .map(|ty| {
            let y_lo = ty * TILE;
            let rows_here = TILE.min(h - y_lo);
            let mut rgb = vec![[0f32; 3]; rows_here * w];
            let mut depth = vec![0f32; rows_here * w];
            for tx in 0..tw {
                let x_lo = tx * TILE;
                let cols = TILE.min(w - x_lo);
                let mut trans = [1f32; TILE * TILE];
                let mut acc = [[0f32; 3]; TILE * TILE];
                let mut dacc = [0f32; TILE * TILE];
                let mut remaining = cols * rows_here;
                for &k in &bins[ty * tw + tx] {
                    let s = &splats[k as usize];
                    let xa = ((s.mx - s.radius).floor().max(x_lo as f32) as usize).min(x_lo + cols);
                    let xb = ((s.mx + s.radius).ceil() as isize + 1).clamp(x_lo as isize, (x_lo + cols) as isize) as usize;
                    let ya = ((s.my - s.radius).floor().max(y_lo as f32) as usize).min(y_lo + rows_here);
                    let yb = ((s.my + s.radius).ceil() as isize + 1).clamp(y_lo as isize, (y_lo + rows_here) as isize) as usize;
                    for y in ya..yb {
                        for x in xa..xb {
                            let p = (y - y_lo) * TILE + (x - x_lo);
                            let t = trans[p];
                            if t < T_MIN {
                                continue;
                            }
                            let alpha = s.alpha(x as f32, y as f32);
                            if alpha == 0.0 {
                                continue;
                            }
                            let wgt = t * alpha;
                            for (a, c) in acc[p].iter_mut().zip(s.color) {
                                *a += wgt * c;
                            }
                            dacc[p] += wgt * s.depth;
                            trans[p] = t * (1.0 - alpha);
                            if trans[p] < T_MIN {
                                remaining -= 1;
                            }
                        }
                    }
                    if remaining == 0 {
                        break;
                    }
                }
                for y in 0..rows_here {
                    for x in 0..cols {
                        let p = y * TILE + x;
                        let o = y * w + x_lo + x;
                        for ch in 0..3 {
                            rgb[o][ch] = acc[p][ch] + trans[p] * bg[ch];
                        }
                        depth[o] = dacc[p];
                    }
                }
            }
            (rgb, depth)
        })
        .collect();
    let mut img = Image {
        width: w,
        height: h,
        rgb: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
    };
    for (rgb, depth) in rows {
        img.rgb.extend(rgb);
        img.depth.extend(depth);
    }
    img
}

/// Reference renderer: for every pixel, sort all projected primitives by
/// depth and composite them without tiling, culling or early exit.
pub fn render_reference(prims: &[GaussianPrimitive], camera: &CameraModel, background: [f64; 3]) -> Image {
    let splats = project_all(camera, prims.iter());
    let bg = to_bg(background);
    let (w, h) = (camera.width, camera.height);
    let mut img = Image {
        width: w,
        height: h,
        rgb: vec![[0.0; 3]; w * h],
        depth: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let mut order = splats.clone();
            order.sort_by(splat_order);
            let (mut t, mut c, mut d) = (1f32, [0f32; 3], 0f32);
            for s in &order {
                let alpha = s.alpha(x as f32, y as f32);
                if alpha == 0.0 {
                    continue;
                }
                let wgt = t * alpha;
                for (a, col) in c.iter_mut().zip(s.color) {
                    *a += wgt * col;
                }
                d += wgt * s.depth;
                t *= 1.0 - alpha;
            }
            let o = y * w + x;
            img.rgb[o] = [0, 1, 2].map(|ch| c[ch] + t * bg[ch]);
            img.depth[o] = d;
        }
    }
    img
}

/// Renders the scene plus every human posed at time `t`.
pub fn render_observation(
    scene: &SplatScene,
    humans: &[HumanActor],
    t: f64,
    camera: &CameraModel,
    background: [f64; 3],
) -> Image {
    let human_prims: Vec<GaussianPrimitive> = humans.iter().flat_map(|h| h.prims_at(t)).collect();
    let splats = project_all(camera, scene.primitives.iter().chain(human_prims.iter()));
    render_splats(splats, camera, to_bg(background))
}
