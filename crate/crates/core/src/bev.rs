//! Ground-plane projection of fisheye label maps and top-view stitching.
//!
//! World frame: x forward, y left, z up, ground at z = 0. Camera frame: z along
//! the optical axis, x right, y down. Pixel centres sit at integer coordinates.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const DEFAULT_THETA_MAX_DEG: f64 = 95.0;

fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotation about the world z axis by `yaw` radians.
pub fn yaw_rotation(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// A pixel hit plus the ray's angle from the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub theta: f64,
}

/// Equidistant fisheye camera, `r = f·θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeCamera {
    pub name: String,
    /// Pixels per radian.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation, metres.
    pub translation: Vec3,
}

impl FisheyeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        f: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = FisheyeCamera {
            name: name.into(),
            f,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// A camera at world position `position` looking along heading `yaw`,
    /// tilted down by `pitch` radians, principal point at the image centre.
    pub fn mounted(name: impl Into<String>, f: f64, width: usize, height: usize, position: Vec3, yaw: f64, pitch: f64) -> Result<Self> {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(&forward, &right);
        let rotation = [right, down, forward];
        let rc = mat_vec(&rotation, &position);
        Self::new(
            name,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            [-rc[0], -rc[1], -rc[2]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::config(format!("{}: focal length must be positive", self.name)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config(format!("{}: empty image size", self.name)));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::config(format!("{}: rotation is not orthonormal", self.name)));
                }
            }
        }
        if self.center()[2] <= 0.0 {
            return Err(Error::config(format!("{}: camera must sit above the ground plane", self.name)));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        let c = mat_t_vec(&self.rotation, &self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// Projects a world point; `None` when the ray is `theta_max` or more off-axis.
    pub fn project_point(&self, p: Vec3, theta_max: f64) -> Option<Projection> {
        let rp = mat_vec(&self.rotation, &p);
        let pc = [rp[0] + self.translation[0], rp[1] + self.translation[1], rp[2] + self.translation[2]];
        let rho = pc[0].hypot(pc[1]);
        let theta = rho.atan2(pc[2]);
        if theta >= theta_max || (rho == 0.0 && pc[2] <= 0.0) {
            return None;
        }
        let (u, v) = if rho == 0.0 {
            (self.cx, self.cy)
        } else {
            let r = self.f * theta;
            (self.cx + r * pc[0] / rho, self.cy + r * pc[1] / rho)
        };
        Some(Projection { u, v, theta })
    }

    /// Projects the ground point `(x, y, 0)`.
    pub fn project_ground_to_pixel(&self, x: f64, y: f64, theta_max: f64) -> Option<Projection> {
        self.project_point([x, y, 0.0], theta_max)
    }

    /// Viewing ray of a pixel in world coordinates (unit length).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let (du, dv) = (u - self.cx, v - self.cy);
        let r = du.hypot(dv);
        let theta = r / self.f;
        let d = if r == 0.0 {
            [0.0, 0.0, 1.0]
        } else {
            let s = theta.sin() / r;
            [s * du, s * dv, theta.cos()]
        };
        mat_t_vec(&self.rotation, &d)
    }

    /// Intersects a pixel's ray with the ground; `None` if the ray never reaches it.
    pub fn pixel_to_ground(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let d = self.pixel_ray(u, v);
        let c = self.center();
        if d[2] >= 0.0 {
            return None;
        }
        let s = -c[2] / d[2];
        Some((c[0] + s * d[0], c[1] + s * d[1]))
    }

    /// Label of the pixel nearest to `(u, v)`, if it lies inside the image.
    fn nearest(&self, labels: &LabelMap, u: f64, v: f64) -> Option<u32> {
        let (col, row) = (u.round(), v.round());
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some(labels.at(0, row as usize, col as usize))
    }

    /// Same camera after rotating the world by `yaw` about z.
    pub fn yawed(&self, yaw: f64) -> Result<Self> {
        let rz = yaw_rotation(yaw);
        let rz_t = [0, 1, 2].map(|i| [0, 1, 2].map(|j| rz[j][i]));
        Self::new(
            self.name.clone(),
            self.f,
            self.cx,
            self.cy,
            self.width,
            self.height,
            mat_mul(&self.rotation, &rz_t),
            self.translation,
        )
    }
}

/// Metric top-view raster centred on the vehicle origin.
///
/// Row 0 is the far front edge (largest x), column 0 the far left edge (largest y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopViewGrid {
    pub extent_x: f64,
    pub extent_y: f64,
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl TopViewGrid {
    pub fn new(extent_x: f64, extent_y: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && extent_x > 0.0 && extent_y > 0.0) {
            return Err(Error::config("grid extent and resolution must be positive"));
        }
        let cells = |e: f64| -> Result<usize> {
            let n = (e / resolution).round();
            if n < 1.0 || ((n * resolution) - e).abs() > 1e-6 * e.max(1.0) {
                return Err(Error::config(format!(
                    "extent {e} m is not a whole number of {resolution} m cells"
                )));
            }
            Ok(n as usize)
        };
        Ok(TopViewGrid {
            extent_x,
            extent_y,
            resolution,
            rows: cells(extent_x)?,
            cols: cells(extent_y)?,
        })
    }

    /// Parses `<x>x<y>m@<resolution>`, e.g. `20x20m@0.05`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::config(format!("grid {spec:?} is not of the form 20x20m@0.05"));
        let (extent, res) = spec.split_once('@').ok_or_else(bad)?;
        let extent = extent.strip_suffix('m').ok_or_else(bad)?;
        let (x, y) = extent.split_once('x').ok_or_else(bad)?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        Self::new(num(x)?, num(y)?, num(res)?)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.extent_x / 2.0 - (row as f64 + 0.5) * self.resolution,
            self.extent_y / 2.0 - (col as f64 + 0.5) * self.resolution,
        )
    }
}

/// Stitches per-camera label maps into one top view.
///
/// Each grid cell centre is projected into every camera; the camera seeing it at
/// the smallest incidence angle wins (earlier cameras win exact ties) and the
/// nearest pixel's label is copied. Cells no camera sees get [`IGNORE_LABEL`].
pub fn stitch_topview(
    cams: &[FisheyeCamera],
    labels: &[LabelMap],
    grid: &TopViewGrid,
    theta_max: f64,
    workers: usize,
) -> Result<LabelMap> {
    if cams.len() != labels.len() {
        return Err(Error::config(format!(
            "{} cameras but {} label maps",
            cams.len(),
            labels.len()
        )));
    }
    for (cam, lab) in cams.iter().zip(labels) {
        cam.validate()?;
        if lab.dims() != (1, cam.height, cam.width) {
            return Err(Error::shape(format!(
                "{}: label map {:?} does not match image size {}x{}",
                cam.name,
                lab.dims(),
                cam.height,
                cam.width
            )));
        }
    }
    let mut out = vec![IGNORE_LABEL; grid.rows * grid.cols];
    let workers = workers.max(1).min(grid.rows);
    let rows_per = grid.rows.div_ceil(workers);
    std::thread::scope(|s| {
        for (chunk_idx, chunk) in out.chunks_mut(rows_per * grid.cols).enumerate() {
            s.spawn(move || {
                for (i, cell) in chunk.iter_mut().enumerate() {
                    let row = chunk_idx * rows_per + i / grid.cols;
                    let col = i % grid.cols;
                    let (x, y) = grid.cell_center(row, col);
                    let mut best: Option<(f64, u32)> = None;
                    for (cam, lab) in cams.iter().zip(labels) {
                        let Some(p) = cam.project_ground_to_pixel(x, y, theta_max) else {
                            continue;
                        };
                        let Some(label) = cam.nearest(lab, p.u, p.v) else {
                            continue;
                        };
                        if best.is_none_or(|(t, _)| p.theta < t) {
                            best = Some((p.theta, label));
                        }
                    }
                    if let Some((_, label)) = best {
                        *cell = label;
                    }
                }
            });
        }
    });
    LabelMap::from_vec(1, grid.rows, grid.cols, out)
}

/// Renders a ground-plane labelling into a camera: every pixel whose ray meets
/// the ground takes `ground(x, y)`, the rest take `sky`.
pub fn render_ground_labels(cam: &FisheyeCamera, ground: impl Fn(f64, f64) -> u32, sky: u32) -> LabelMap {
    let mut out = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            out.push(match cam.pixel_to_ground(u as f64, v as f64) {
                Some((x, y)) => ground(x, y),
                None => sky,
            });
        }
    }
    LabelMap::from_vec(1, cam.height, cam.width, out).expect("camera size is valid")
}

#[derive(Debug, Deserialize)]
struct CameraSection {
    name: String,
    f: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct RigFile {
    theta_max_deg: Option<f64>,
    camera: Vec<CameraSection>,
}

/// Cameras plus the incidence cutoff read from a calibration file.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub cameras: Vec<FisheyeCamera>,
    /// Radians.
    pub theta_max: f64,
}

impl CameraRig {
    /// Parses a TOML calibration: optional `theta_max_deg`, then one `[[camera]]`
    /// section per camera with `name`, `f`, `cx`, `cy`, `width`, `height`,
    /// `rotation` (9 values, row-major) and `translation` (3 values).
    pub fn parse(text: &str) -> Result<Self> {
        let rig: RigFile = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start),
            msg: e.message().to_string(),
        })?;
        let cameras = rig
            .camera
            .into_iter()
            .map(|c| {
                let r = c.rotation;
                FisheyeCamera::new(
                    c.name,
                    c.f,
                    c.cx,
                    c.cy,
                    c.width,
                    c.height,
                    [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                    c.translation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CameraRig {
            cameras,
            theta_max: rig.theta_max_deg.unwrap_or(DEFAULT_THETA_MAX_DEG).to_radians(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut s = format!("theta_max_deg = {}\n", self.theta_max.to_degrees());
        for c in &self.cameras {
            let r: Vec<String> = c.rotation.iter().flatten().map(|v| format!("{v:?}")).collect();
            let t: Vec<String> = c.translation.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&format!(
                "\n[[camera]]\nname = {:?}\nf = {:?}\ncx = {:?}\ncy = {:?}\nwidth = {}\nheight = {}\nrotation = [{}]\ntranslation = [{}]\n",
                c.name, c.f, c.cx, c.cy, c.width, c.height, r.join(", "), t.join(", ")
            ));
        }
        s
    }
}

/// Fixed colour per class for quick inspection; ignore cells are black.
pub fn write_ppm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let (_, h, w) = labels.dims();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &l in &labels.data()[..h * w] {
        let rgb = if l == IGNORE_LABEL {
            [0, 0, 0]
        } else {
            let x = l.wrapping_mul(2_654_435_761);
            [(x >> 24) as u8 | 0x40, (x >> 16) as u8 | 0x40, (x >> 8) as u8 | 0x40]
        };
        buf.extend_from_slice(&rgb);
    }
    std::fs::write(path, buf)?;
    Ok(())
}
