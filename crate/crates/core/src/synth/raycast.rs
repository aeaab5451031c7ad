use serde::{Deserialize, Serialize};

use crate::geom::{Box3D, Vec3};

use super::TERRAIN_ALBEDO;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Cosine-profile depression: `-depth * (1 + cos(pi r / radius)) / 2` inside `radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crater {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub waves: Vec<Wave>,
    pub craters: Vec<Crater>,
}

impl Terrain {
    pub fn flat() -> Self {
        Self {
            waves: Vec::new(),
            craters: Vec::new(),
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut h: f64 = self
            .waves
            .iter()
            .map(|w| w.amplitude * (w.kx * x + w.ky * y + w.phase).sin())
            .sum();
        for c in &self.craters {
            let r = (x - c.x).hypot(y - c.y);
            if r < c.radius {
                h -= c.depth * 0.5 * (1.0 + (std::f64::consts::PI * r / c.radius).cos());
            }
        }
        h
    }

    /// `(dh/dx, dh/dy)`.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        for w in &self.waves {
            let c = w.amplitude * (w.kx * x + w.ky * y + w.phase).cos();
            gx += c * w.kx;
            gy += c * w.ky;
        }
        for c in &self.craters {
            let (dx, dy) = (x - c.x, y - c.y);
            let r = dx.hypot(dy);
            if r < c.radius && r > 0.0 {
                let k = std::f64::consts::PI / c.radius;
                let dr = c.depth * 0.5 * k * (k * r).sin();
                gx += dr * dx / r;
                gy += dr * dy / r;
            }
        }
        (gx, gy)
    }

    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (gx, gy) = self.gradient(x, y);
        let n = (gx * gx + gy * gy + 1.0).sqrt();
        [-gx / n, -gy / n, 1.0 / n]
    }

    fn max_height(&self) -> f64 {
        self.waves.iter().map(|w| w.amplitude.abs()).sum()
    }

    /// Upper bound on |grad h|.
    fn max_slope(&self) -> f64 {
        let waves: f64 = self.waves.iter().map(|w| w.amplitude.abs() * w.kx.hypot(w.ky)).sum();
        let craters: f64 = self
            .craters
            .iter()
            .map(|c| c.depth * 0.5 * std::f64::consts::PI / c.radius)
            .sum();
        waves + craters
    }

    /// First intersection parameter along a unit ray, if within `max_t`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3, max_t: f64) -> Option<f64> {
        let top = self.max_height();
        let gap = |t: f64| o[2] + t * d[2] - self.height(o[0] + t * d[0], o[1] + t * d[1]);
        let mut t = 0.0;
        if o[2] > top {
            if d[2] >= 0.0 {
                return None;
            }
            t = (o[2] - top) / -d[2];
        }
        let rate = d[2].abs() + self.max_slope() * d[0].hypot(d[1]);
        let mut f = gap(t);
        if f <= 0.0 {
            return (f == 0.0).then_some(t);
        }
        while t < max_t {
            // The gap shrinks no faster than `rate`, so this step cannot
            // jump over the first root unless the floor step is taken.
            let step = if rate > 0.0 { (f / rate).max(0.02) } else { 0.5 };
            let t1 = (t + step).min(max_t);
            let f1 = gap(t1);
            if f1 <= 0.0 {
                let (mut lo, mut hi) = (t, t1);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if gap(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(hi);
            }
            if t1 >= max_t {
                break;
            }
            t = t1;
            f = f1;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipsoid { semi_axes: Vec3 },
    Cuboid { half: Vec3 },
}

/// An annotated object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub yaw: f64,
    pub albedo: [f64; 3],
    pub class_id: usize,
}

impl Primitive {
    fn to_local(&self, v: &Vec3) -> Vec3 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
    }

    fn to_world(&self, v: &Vec3) -> Vec3 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }

    pub fn bounding_box(&self) -> Box3D {
        let half = match &self.shape {
            Shape::Ellipsoid { semi_axes } => *semi_axes,
            Shape::Cuboid { half } => *half,
        };
        Box3D::new(self.center, half.map(|v| 2.0 * v), self.yaw, self.class_id)
    }

    /// `(t, world normal)` of the first hit with `t > 1e-9`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        let rel = [o[0] - self.center[0], o[1] - self.center[1], o[2] - self.center[2]];
        let (p, q) = (self.to_local(&rel), self.to_local(d));
        let eps = 1e-9;
        match &self.shape {
            Shape::Ellipsoid { semi_axes: s } => {
                let ps = [p[0] / s[0], p[1] / s[1], p[2] / s[2]];
                let qs = [q[0] / s[0], q[1] / s[1], q[2] / s[2]];
                let a = crate::geom::dot(&qs, &qs);
                let b = 2.0 * crate::geom::dot(&ps, &qs);
                let c = crate::geom::dot(&ps, &ps) - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .find(|&t| t > eps)?;
                let hit = [p[0] + t * q[0], p[1] + t * q[1], p[2] + t * q[2]];
                let n = [hit[0] / (s[0] * s[0]), hit[1] / (s[1] * s[1]), hit[2] / (s[2] * s[2])];
                let nl = crate::geom::dot(&n, &n).sqrt();
                Some((t, self.to_world(&n.map(|v| v / nl))))
            }
            Shape::Cuboid { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for k in 0..3 {
                    if q[k].abs() < 1e-15 {
                        if p[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (-half[k] - p[k]) / q[k];
                    let tb = (half[k] - p[k]) / q[k];
                    let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                        sign = if q[k] > 0.0 { -1.0 } else { 1.0 };
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t1 <= eps {
                    return None;
                }
                let t = if t0 > eps { t0 } else { t1 };
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((t, self.to_world(&n)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub albedo: [f64; 3],
    pub intensity: f64,
    pub object: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub terrain: Terrain,
    pub objects: Vec<Primitive>,
    /// Unit direction towards the light source.
    pub sun: Vec3,
}

impl SceneGeometry {
    /// First surface hit along a unit ray within `max_t`.
    pub fn cast(&self, o: &Vec3, d: &Vec3, max_t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, normal)) = obj.intersect(o, d) {
                if t <= max_t && best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]],
                        normal,
                        albedo: obj.albedo,
                        intensity: obj.albedo.iter().sum::<f64>() / 3.0,
                        object: Some(i),
                    });
                }
            }
        }
        let limit = best.as_ref().map_or(max_t, |b| b.t);
        if let Some(t) = self.terrain.intersect(o, d, limit) {
            if t < limit {
                let point = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                best = Some(Hit {
                    t,
                    point,
                    normal: self.terrain.normal(point[0], point[1]),
                    albedo: [TERRAIN_ALBEDO; 3],
                    intensity: TERRAIN_ALBEDO,
                    object: None,
                });
            }
        }
        best
    }
}
