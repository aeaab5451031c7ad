//! Calibration, boxes, point clouds and the BEV grid.
//!
//! World frame: x forward, y left, z up (meters). Camera frame: x right,
//! y down, z along the optical axis. Pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)` in continuous image coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    /// Camera at `position` looking along heading `yaw` (about world z),
    /// tilted down by `pitch`, principal point at the image center.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64, focal: f64, height: usize, width: usize) -> Self {
        let fwd = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin()];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = cross(&fwd, &right);
        let rotation = [right, down, fwd];
        let rp = mat_vec(&rotation, &position);
        Self {
            intrinsics: [
                [focal, 0.0, width as f64 / 2.0],
                [0.0, focal, height as f64 / 2.0],
                [0.0, 0.0, 1.0],
            ],
            rotation,
            translation: [-rp[0], -rp[1], -rp[2]],
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&r[i], &r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-6 {
            return Err(Error::Config("camera rotation determinant is not +1".into()));
        }
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if k[2] != [0.0, 0.0, 1.0] || k[1][0] != 0.0 {
            return Err(Error::Config("intrinsics must be upper-triangular pinhole".into()));
        }
        let (cx, cy) = (k[0][2], k[1][2]);
        if !(cx >= 0.0 && cx <= self.width as f64 && cy >= 0.0 && cy <= self.height as f64) {
            return Err(Error::Config("principal point outside the image".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty image size".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        let q = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        mat_t_vec(&self.rotation, &q)
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.camera_to_world(&[0.0, 0.0, 0.0])
    }

    /// Continuous pixel coordinates of a camera-frame point with `z > 0`.
    pub fn pixel_of(&self, pc: &Vec3) -> (f64, f64) {
        let k = &self.intrinsics;
        let (x, y) = (pc[0] / pc[2], pc[1] / pc[2]);
        (k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2])
    }

    /// Camera-frame point at depth `z` (along the optical axis) through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let k = &self.intrinsics;
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        [x * z, y * z, z]
    }

    /// World-frame unit direction of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let pc = self.unproject(u, v, 1.0);
        let d = mat_t_vec(&self.rotation, &pc);
        let n = dot(&d, &d).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn extrinsic_rows(&self) -> [f64; 12] {
        let mut e = [0.0; 12];
        for i in 0..3 {
            e[i * 4..i * 4 + 3].copy_from_slice(&self.rotation[i]);
            e[i * 4 + 3] = self.translation[i];
        }
        e
    }

    pub fn intrinsic_rows(&self) -> [f64; 9] {
        let mut k = [0.0; 9];
        for i in 0..3 {
            k[i * 3..i * 3 + 3].copy_from_slice(&self.intrinsics[i]);
        }
        k
    }

    pub fn from_rows(intrinsics: &[f64], extrinsic: &[f64], height: usize, width: usize) -> Result<Self> {
        if intrinsics.len() != 9 || extrinsic.len() != 12 {
            return Err(Error::Config("camera needs 9 intrinsic and 12 extrinsic values".into()));
        }
        let mut cam = CameraModel {
            intrinsics: [[0.0; 3]; 3],
            rotation: [[0.0; 3]; 3],
            translation: [0.0; 3],
            height,
            width,
        };
        for i in 0..3 {
            cam.intrinsics[i].copy_from_slice(&intrinsics[i * 3..i * 3 + 3]);
            cam.rotation[i].copy_from_slice(&extrinsic[i * 4..i * 4 + 3]);
            cam.translation[i] = extrinsic[i * 4 + 3];
        }
        cam.validate()?;
        Ok(cam)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Minimal absolute angular difference in `[0, pi]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    normalize_yaw(a - b).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// length (along heading), width, height
    pub size: Vec3,
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64, class_id: usize) -> Self {
        Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id,
            score: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|&s| s > 0.0) {
            return Err(Error::Config(format!("box size must be positive: {:?}", self.size)));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::Config(format!("box yaw {} outside (-pi, pi]", self.yaw)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!("box score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Whether a world point lies inside the box, with an outward `margin`.
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p[2] - self.center[2];
        lx.abs() <= self.size[0] / 2.0 + margin
            && ly.abs() <= self.size[1] / 2.0 + margin
            && lz.abs() <= self.size[2] / 2.0 + margin
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }
}

/// Euclidean distance between BEV centers; z is ignored.
pub fn bev_center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// Points as `(x, y, z, intensity)` in the world frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Degenerate("point cloud contains non-finite values".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub index: usize,
}

/// Projects every point with positive camera depth that lands inside the
/// image. Coordinates are continuous, before any rasterization.
pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let pc = cam.world_to_camera(&[p[0] as f64, p[1] as f64, p[2] as f64]);
            if pc[2] <= 0.0 {
                return None;
            }
            let (u, v) = cam.pixel_of(&pc);
            cam.in_image(u, v).then_some(Projection {
                u,
                v,
                depth: pc[2],
                index,
            })
        })
        .collect()
}

/// World-to-grid mapping over half-open ranges `[min, max)`. Rows index y,
/// columns index x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cell_size: f64,
    pub channels: usize,
}

impl BevGridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), cell_size: f64, channels: usize) -> Result<Self> {
        let g = Self {
            x_range,
            y_range,
            cell_size,
            channels,
        };
        g.validate()?;
        Ok(g)
    }

    fn cells_along(&self, (lo, hi): (f64, f64)) -> Result<usize> {
        if !(self.cell_size > 0.0) || !(hi > lo) {
            return Err(Error::Config(format!(
                "grid range ({lo}, {hi}) with cell {}",
                self.cell_size
            )));
        }
        let n = (hi - lo) / self.cell_size;
        let r = n.round();
        if (n - r).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Config(format!(
                "range ({lo}, {hi}) not divisible by cell size {}",
                self.cell_size
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.cells_along(self.x_range)?, self.cells_along(self.y_range)?);
        if w < 8 || h < 8 {
            return Err(Error::Config(format!("grid {h}x{w} smaller than 8x8")));
        }
        Ok(())
    }

    /// Columns (x cells).
    pub fn width(&self) -> usize {
        self.cells_along(self.x_range).expect("validated grid")
    }

    /// Rows (y cells).
    pub fn height(&self) -> usize {
        self.cells_along(self.y_range).expect("validated grid")
    }

    pub fn cells(&self) -> usize {
        self.width() * self.height()
    }

    /// `(row, col)` of the cell containing `(x, y)`, or `None` off-grid.
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        let col = ((x - self.x_range.0) / self.cell_size).floor() as usize;
        let row = ((y - self.y_range.0) / self.cell_size).floor() as usize;
        (col < self.width() && row < self.height()).then_some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.cell_size,
            self.y_range.0 + (row as f64 + 0.5) * self.cell_size,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::looking([0.0, 0.0, 1.6], 0.2, 0.15, 40.0, 48, 64)
    }

    fn grid() -> BevGridSpec {
        BevGridSpec::new((0.0, 16.0), (-8.0, 8.0), 0.5, 16).unwrap()
    }

    #[test]
    fn camera_is_valid() {
        cam().validate().unwrap();
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let c = cam();
        let w = c.camera_to_world(&[0.0, 0.0, 5.0]);
        let cloud = PointCloud {
            points: vec![[w[0] as f32, w[1] as f32, w[2] as f32, 0.5]],
        };
        let p = project_points(&cloud, &c);
        assert_eq!(p.len(), 1);
        assert!((p[0].u - 32.0).abs() < 1e-4 && (p[0].v - 24.0).abs() < 1e-4);
        assert!((p[0].depth - 5.0).abs() < 1e-5);
    }

    #[test]
    fn point_behind_camera_is_dropped() {
        let c = cam();
        let w = c.camera_to_world(&[0.0, 0.0, -1.0]);
        let cloud = PointCloud {
            points: vec![[w[0] as f32, w[1] as f32, w[2] as f32, 0.5]],
        };
        assert!(project_points(&cloud, &c).is_empty());
        assert!(project_points(&PointCloud::default(), &c).is_empty());
    }

    #[test]
    fn projection_round_trip() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f32; 4]> = (0..2000)
            .map(|_| {
                [
                    rng.random_range(-5.0..20.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-1.0..3.0),
                    0.5,
                ]
            })
            .collect();
        let cloud = PointCloud { points: pts };
        let proj = project_points(&cloud, &c);
        assert!(proj.len() > 100);
        for p in proj {
            let back = c.camera_to_world(&c.unproject(p.u, p.v, p.depth));
            let orig = cloud.points[p.index];
            for k in 0..3 {
                assert!((back[k] - orig[k] as f64).abs() < 1e-6, "{back:?} vs {orig:?}");
            }
        }
    }

    #[test]
    fn bev_distance_examples() {
        let a = Box3D::new([0.0, 0.0, 1.0], [1.0, 1.0, 1.0], 0.0, 0);
        let b = Box3D::new([3.0, 4.0, -2.0], [1.0, 1.0, 1.0], 0.0, 0);
        assert_eq!(bev_center_distance(&a, &a), 0.0);
        assert_eq!(bev_center_distance(&a, &b), 5.0);
    }

    #[test]
    fn grid_boundaries() {
        let g = grid();
        assert_eq!(g.world_to_cell(0.0, -8.0), Some((0, 0)));
        assert_eq!(g.world_to_cell(16.0, 8.0), None);
        assert_eq!(g.world_to_cell(15.999, 7.999), Some((31, 31)));
        assert!(BevGridSpec::new((0.0, 16.0), (-8.0, 8.0), 0.3, 4).is_err());
        assert!(BevGridSpec::new((0.0, 2.0), (0.0, 2.0), 0.5, 4).is_err());
    }

    #[test]
    fn grid_cell_centers_hit_own_cell() {
        let g = grid();
        for r in 0..g.height() {
            for c in 0..g.width() {
                let (x, y) = g.cell_center(r, c);
                assert_eq!(g.world_to_cell(x, y), Some((r, c)));
            }
        }
    }

    #[test]
    fn grid_reconstruction_error_is_bounded() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let (x, y) = (rng.random_range(0.0..16.0), rng.random_range(-8.0..8.0));
            let (r, c) = g.world_to_cell(x, y).expect("in range");
            let (cx, cy) = g.cell_center(r, c);
            assert!((cx - x).abs() < g.cell_size / 2.0 + 1e-9);
            assert!((cy - y).abs() < g.cell_size / 2.0 + 1e-9);
        }
    }

    #[test]
    fn yaw_wrapping() {
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-12);
        assert!((yaw_difference(PI - 0.1, -PI + 0.1) - 0.2).abs() < 1e-12);
        assert!((yaw_difference(0.0, PI / 2.0) - PI / 2.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64)
            .prop_map(|(x, y, z)| Box3D::new([x, y, z], [1.0, 1.0, 1.0], 0.0, 0))
    }

    proptest! {
        #[test]
        fn bev_distance_symmetric_and_triangle(a in arb_box(), b in arb_box(), c in arb_box()) {
            let ab = bev_center_distance(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, bev_center_distance(&b, &a));
            prop_assert!(bev_center_distance(&a, &c) <= ab + bev_center_distance(&b, &c) + 1e-9);
        }

        #[test]
        fn normalized_yaw_in_range(y in -100.0..100.0f64) {
            let n = normalize_yaw(y);
            prop_assert!(n > -PI && n <= PI);
            prop_assert!(((y - n) / (2.0 * PI) - ((y - n) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }
}
