//! Pinhole camera model and pixel-to-table backprojection.
//!
//! The camera pose maps camera coordinates to the robot base frame
//! (`p_world = rotation * p_cam + translation`). Camera axes follow the
//! usual image convention: +x right, +y down, +z along the optical axis.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Pixel, Point3};

const ORTHONORMAL_TOL: f64 = 1e-9;
const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// world <- camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in the world frame (meters).
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let r = &c.rotation;
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let rows = r.rotation;
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0], rows[2][1], rows[2][2],
        );
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, rotation, Vector3::from(r.translation))
    }
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Schema("camera focal lengths must be positive".into()));
        }
        let all_finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Schema("camera parameters must be finite".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Matrix3::identity()).amax();
        if ortho_err > ORTHONORMAL_TOL || (self.rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Schema(format!(
                "camera rotation is not a proper rotation (orthonormality error {ortho_err:e})"
            )));
        }
        Ok(())
    }

    /// Camera placed at `position`, optical axis pitched `pitch_rad` below
    /// the horizontal toward +x, image right pointing toward -y.
    pub fn pitched(fx: f64, fy: f64, cx: f64, cy: f64, position: Point3, pitch_rad: f64) -> Result<Self> {
        let z_axis = Vector3::new(pitch_rad.cos(), 0.0, -pitch_rad.sin());
        let x_axis = Vector3::new(0.0, -1.0, 0.0);
        let y_axis = z_axis.cross(&x_axis);
        let rotation = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
        CameraModel::new(fx, fy, cx, cy, rotation, position.coords)
    }

    /// Camera looking straight down at the table from `position`
    /// (+z camera = -z world, +x camera = +x world).
    pub fn nadir(fx: f64, fy: f64, cx: f64, cy: f64, position: Point3) -> Result<Self> {
        let rotation = Matrix3::from_columns(&[
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
        ]);
        CameraModel::new(fx, fy, cx, cy, rotation, position.coords)
    }

    /// Desk default: 640x640 virtual image, 0.45 m above the table at the
    /// robot head position, pitched 60 degrees downward toward +x.
    pub fn desk_default(table_height: f64) -> Self {
        CameraModel::pitched(
            500.0,
            500.0,
            320.0,
            320.0,
            Point3::new(0.0, 0.0, table_height + 0.45),
            60f64.to_radians(),
        )
        .expect("default camera is valid")
    }

    pub fn center(&self) -> Point3 {
        Point3::from(self.translation)
    }

    /// Small rotation of the pose about an arbitrary axis, used to perturb
    /// poses in tests and generators.
    pub fn rotated(&self, axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let mut cam = *self;
        cam.rotation = rot.matrix() * self.rotation;
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TablePlane {
    pub height_m: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for TablePlane {
    fn default() -> Self {
        TablePlane::desk_default()
    }
}

impl TablePlane {
    pub fn new(height_m: f64, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let table = TablePlane {
            height_m,
            x_min,
            x_max,
            y_min,
            y_max,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) || !self.height_m.is_finite() {
            return Err(Error::Schema("table bounds must satisfy min < max".into()));
        }
        Ok(())
    }

    pub fn desk_default() -> Self {
        TablePlane {
            height_m: 0.80,
            x_min: 0.2,
            x_max: 0.9,
            y_min: -0.5,
            y_max: 0.5,
        }
    }

    pub fn center(&self) -> Point3 {
        Point3::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.height_m,
        )
    }
}

pub fn project(p: &Point3, cam: &CameraModel) -> Result<Pixel> {
    let pc = cam.rotation.transpose() * (p.coords - cam.translation);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(Pixel::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy))
}

/// Intersects the viewing ray through `px` with the plane `z = table.height_m`.
pub fn backproject(px: &Pixel, cam: &CameraModel, table: &TablePlane) -> Result<Point3> {
    let ray_cam = Vector3::new((px.u - cam.cx) / cam.fx, (px.v - cam.cy) / cam.fy, 1.0);
    let d = cam.rotation * ray_cam;
    if d.z.abs() < PARALLEL_EPS {
        return Err(Error::NoIntersection);
    }
    let o = cam.translation;
    let lambda = (table.height_m - o.z) / d.z;
    if lambda <= 0.0 {
        return Err(Error::IntersectionBehindCamera);
    }
    // z is assigned rather than computed so it equals the plane height exactly.
    Ok(Point3::new(o.x + lambda * d.x, o.y + lambda * d.y, table.height_m))
}

/// Closed-bounds containment test with tolerance `tol` on every axis.
pub fn in_bounds(p: &Point3, table: &TablePlane, tol: f64) -> bool {
    p.x >= table.x_min - tol
        && p.x <= table.x_max + tol
        && p.y >= table.y_min - tol
        && p.y <= table.y_max + tol
        && (p.z - table.height_m).abs() <= tol
}
