//! Procedural lunar-like scenes: sinusoidal terrain with cosine craters,
//! ellipsoid meteors and box platforms, observed by a ray-cast LiDAR and
//! pinhole cameras sharing one analytic ray caster.

mod io;
mod raycast;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Box3D, CameraModel, PointCloud, Vec3};

pub use io::{decode_ppm, encode_ppm, read_scene, write_scene, FORMAT_VERSION};
pub use raycast::{Crater, Hit, Primitive, SceneGeometry, Shape, Terrain, Wave};

pub const METEOR: usize = 0;
pub const PLATFORM: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["meteor", "platform"];

pub const TERRAIN_ALBEDO: f64 = 0.5;
pub const PLATFORM_ALBEDO: [f64; 3] = [0.85, 0.7, 0.35];
/// Radiance of pixels whose ray escapes the scene.
pub const SKY: f64 = 0.0;
pub const PIXEL_NOISE: f64 = 0.01;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Bright,
    Dim,
}

impl Lighting {
    pub fn gain(self) -> f64 {
        match self {
            Lighting::Bright => 1.0,
            Lighting::Dim => 0.4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lighting::Bright => "bright",
            Lighting::Dim => "dim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bright" => Some(Lighting::Bright),
            "dim" => Some(Lighting::Dim),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub channels: usize,
    pub elevation_deg: (f64, f64),
    pub azimuth_fov_deg: f64,
    pub azimuth_res_deg: f64,
    pub max_range: f64,
    pub origin: Vec3,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            elevation_deg: (-30.0, 1.0),
            azimuth_fov_deg: 120.0,
            azimuth_res_deg: 0.5,
            max_range: 25.0,
            origin: [0.0, 0.0, 1.8],
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !(self.max_range > 0.0) || !(self.azimuth_res_deg > 0.0) {
            return Err(Error::Config(format!("invalid lidar spec {:?}", self)));
        }
        Ok(())
    }

    /// Unit ray directions on the azimuth x elevation lattice, row-major by channel.
    pub fn directions(&self) -> Vec<Vec3> {
        let n_az = (self.azimuth_fov_deg / self.azimuth_res_deg).round() as usize + 1;
        let mut dirs = Vec::with_capacity(n_az * self.channels);
        for ch in 0..self.channels {
            let t = if self.channels == 1 {
                0.0
            } else {
                ch as f64 / (self.channels - 1) as f64
            };
            let el = (self.elevation_deg.0 + t * (self.elevation_deg.1 - self.elevation_deg.0)).to_radians();
            for a in 0..n_az {
                let az = (-self.azimuth_fov_deg / 2.0 + a as f64 * self.azimuth_res_deg).to_radians();
                dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        dirs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_meteors: usize,
    pub n_platforms: usize,
    /// Objects are placed with x in `[placement_near, extent - 1]`.
    pub extent: f64,
    pub placement_near: f64,
    pub meteor_size: (f64, f64),
    pub platform_size: (f64, f64),
    pub n_cameras: usize,
    pub lidar: LidarSpec,
    pub lighting: Lighting,
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub camera_height: f64,
    pub camera_pitch: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_meteors: 3,
            n_platforms: 1,
            extent: 16.0,
            placement_near: 3.0,
            meteor_size: (0.6, 1.2),
            platform_size: (1.2, 2.4),
            n_cameras: 1,
            lidar: LidarSpec::default(),
            lighting: Lighting::Bright,
            image_height: 48,
            image_width: 64,
            focal: 32.0,
            camera_height: 1.6,
            camera_pitch: 0.35,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !ok_range(self.meteor_size) || !ok_range(self.platform_size) {
            return Err(Error::Config("size ranges must be positive with min <= max".into()));
        }
        if !(1..=2).contains(&self.n_cameras) {
            return Err(Error::Config(format!(
                "n_cameras must be 1 or 2, got {}",
                self.n_cameras
            )));
        }
        if !(self.extent - 1.0 > self.placement_near) {
            return Err(Error::Config("terrain extent leaves no placement area".into()));
        }
        self.lidar.validate()
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        let yaws: &[f64] = if self.n_cameras == 1 { &[0.0] } else { &[0.45, -0.45] };
        yaws.iter()
            .map(|&yaw| {
                CameraModel::looking(
                    [0.0, 0.0, self.camera_height],
                    yaw,
                    self.camera_pitch,
                    self.focal,
                    self.image_height,
                    self.image_width,
                )
            })
            .collect()
    }
}

/// 8-bit interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub camera: CameraModel,
    pub rgb: RgbImage,
    /// Camera-frame depth per pixel in meters, 0 where the ray missed.
    pub depth: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub cloud: PointCloud,
    pub cameras: Vec<CameraFrame>,
    pub boxes: Vec<Box3D>,
    pub lighting: Lighting,
}

/// Raw sensor output of one camera before quantization.
#[derive(Clone, Debug)]
pub struct CameraRender {
    /// HxWx3 linear radiance.
    pub rgb: Vec<f64>,
    pub depth: Vec<f32>,
    /// Index of the object each pixel hit, if any.
    pub hit_object: Vec<Option<usize>>,
}

/// Casts the LiDAR lattice; returns the cloud and the object each point hit.
pub fn sample_lidar(geometry: &SceneGeometry, lidar: &LidarSpec) -> (PointCloud, Vec<Option<usize>>) {
    let mut points = Vec::new();
    let mut hits = Vec::new();
    for d in lidar.directions() {
        if let Some(h) = geometry.cast(&lidar.origin, &d, lidar.max_range) {
            points.push([
                h.point[0] as f32,
                h.point[1] as f32,
                h.point[2] as f32,
                h.intensity as f32,
            ]);
            hits.push(h.object);
        }
    }
    (PointCloud { points }, hits)
}

/// Renders one camera. Pixel radiance is albedo x Lambert shading x lighting
/// gain; `noise` adds per-channel Gaussian noise of std [`PIXEL_NOISE`].
pub fn render_camera(
    geometry: &SceneGeometry,
    cam: &CameraModel,
    lighting: Lighting,
    max_depth: f64,
    mut noise: Option<&mut ChaCha8Rng>,
) -> CameraRender {
    let (h, w) = (cam.height, cam.width);
    let origin = cam.center();
    let mut rgb = vec![SKY; h * w * 3];
    let mut depth = vec![0.0f32; h * w];
    let mut hit_object = vec![None; h * w];
    let gauss = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    // Rays are capped generously; the depth limit is applied on camera z.
    let reach = max_depth * 3.0;
    for row in 0..h {
        for col in 0..w {
            let dir = cam.ray_direction(col as f64 + 0.5, row as f64 + 0.5);
            let i = row * w + col;
            let hit = geometry.cast(&origin, &dir, reach).filter(|hit| {
                let z = cam.world_to_camera(&hit.point)[2];
                z > 0.0 && z <= max_depth
            });
            let Some(hit) = hit else { continue };
            depth[i] = cam.world_to_camera(&hit.point)[2] as f32;
            hit_object[i] = hit.object;
            let shade = 0.2 + 0.8 * crate::geom::dot(&hit.normal, &geometry.sun).max(0.0);
            for c in 0..3 {
                let mut v = hit.albedo[c] * shade * lighting.gain();
                if let Some(rng) = noise.as_deref_mut() {
                    v += gauss.sample(rng);
                }
                rgb[i * 3 + c] = v;
            }
        }
    }
    CameraRender { rgb, depth, hit_object }
}

fn quantize(rgb: &[f64]) -> Vec<u8> {
    rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn random_terrain(rng: &mut ChaCha8Rng, extent: f64) -> Terrain {
    let waves = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.25..0.8);
            let dir = rng.random_range(0.0..2.0 * PI);
            Wave {
                kx: freq * dir.cos(),
                ky: freq * dir.sin(),
                amplitude: rng.random_range(0.02..0.07),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let n_craters = rng.random_range(1..=3);
    let craters = (0..n_craters)
        .map(|_| Crater {
            x: rng.random_range(1.0..extent),
            y: rng.random_range(-extent / 2.0..extent / 2.0),
            radius: rng.random_range(1.0..2.5),
            depth: rng.random_range(0.15..0.4),
        })
        .collect();
    Terrain { waves, craters }
}

fn sample_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, terrain: &Terrain, class_id: usize) -> Primitive {
    let far = cfg.extent - 1.0;
    let x = rng.random_range(cfg.placement_near..far);
    let half_fov = if cfg.n_cameras == 1 { 0.75 } else { 1.2 };
    let ylim = (x * half_fov).min(cfg.extent / 2.0 - 1.0);
    let y = rng.random_range(-ylim..ylim);
    // Both shapes are symmetric under a half turn, so yaw is canonical in (-pi/2, pi/2].
    let yaw = -rng.random_range(-PI / 2.0..PI / 2.0);
    let ground = terrain.height(x, y);
    if class_id == METEOR {
        let (lo, hi) = cfg.meteor_size;
        let l = rng.random_range(lo..=hi);
        let w = rng.random_range(0.6 * l..=l);
        let h = rng.random_range(0.5 * w..=w);
        let gray = rng.random_range(0.45..=0.55);
        Primitive {
            shape: Shape::Ellipsoid {
                semi_axes: [l / 2.0, w / 2.0, h / 2.0],
            },
            center: [x, y, ground + 0.35 * h],
            yaw,
            albedo: [gray; 3],
            class_id,
        }
    } else {
        let (lo, hi) = cfg.platform_size;
        let l = rng.random_range(lo..=hi);
        let w = rng.random_range(0.6 * l..=l);
        let h = rng.random_range(0.3..0.6);
        Primitive {
            shape: Shape::Cuboid {
                half: [l / 2.0, w / 2.0, h / 2.0],
            },
            center: [x, y, ground + h / 2.0 - 0.05],
            yaw,
            albedo: PLATFORM_ALBEDO,
            class_id,
        }
    }
}

fn footprint_radius(p: &Primitive) -> f64 {
    let b = p.bounding_box();
    (b.size[0] / 2.0).hypot(b.size[1] / 2.0)
}

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    terrain: &Terrain,
    class_id: usize,
    others: &[Primitive],
) -> Result<Primitive> {
    for _ in 0..MAX_ATTEMPTS {
        let cand = sample_object(rng, cfg, terrain, class_id);
        let r = footprint_radius(&cand);
        let clear = others.iter().all(|o| {
            let d = (o.center[0] - cand.center[0]).hypot(o.center[1] - cand.center[1]);
            d > r + footprint_radius(o) + 0.1
        });
        if clear {
            return Ok(cand);
        }
    }
    Err(Error::Generation(format!(
        "could not place a {} without overlap after {MAX_ATTEMPTS} attempts",
        CLASS_NAMES[class_id]
    )))
}

fn random_sun(rng: &mut ChaCha8Rng) -> Vec3 {
    let el = rng.random_range(0.6..1.1f64);
    let az = rng.random_range(-PI..PI);
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Minimum image support for an annotated object without LiDAR returns.
pub const MIN_PIXEL_SUPPORT: usize = 16;

/// Generates a scene. Deterministic in `cfg`; objects lacking both LiDAR
/// and image support are re-sampled.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let terrain = random_terrain(&mut rng, cfg.extent);
    let sun = random_sun(&mut rng);
    let classes: Vec<usize> = std::iter::repeat_n(METEOR, cfg.n_meteors)
        .chain(std::iter::repeat_n(PLATFORM, cfg.n_platforms))
        .collect();
    let mut objects: Vec<Primitive> = Vec::with_capacity(classes.len());
    for &c in &classes {
        let p = place(&mut rng, cfg, &terrain, c, &objects)?;
        objects.push(p);
    }
    let cams = cfg.cameras();
    for attempt in 0..MAX_ATTEMPTS {
        let geometry = SceneGeometry {
            terrain: terrain.clone(),
            objects: objects.clone(),
            sun,
        };
        let (cloud, lidar_hits) = sample_lidar(&geometry, &cfg.lidar);
        let renders: Vec<CameraRender> = cams
            .iter()
            .map(|c| render_camera(&geometry, c, cfg.lighting, cfg.lidar.max_range, None))
            .collect();
        let unsupported: Vec<usize> = (0..objects.len())
            .filter(|&i| {
                let pts = lidar_hits.iter().filter(|h| **h == Some(i)).count();
                let px: usize = renders
                    .iter()
                    .map(|r| r.hit_object.iter().filter(|h| **h == Some(i)).count())
                    .sum();
                pts == 0 && px < MIN_PIXEL_SUPPORT
            })
            .collect();
        if unsupported.is_empty() {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            let cameras = cams
                .iter()
                .map(|c| {
                    let r = render_camera(&geometry, c, cfg.lighting, cfg.lidar.max_range, Some(&mut noise_rng));
                    CameraFrame {
                        camera: c.clone(),
                        rgb: RgbImage {
                            height: c.height,
                            width: c.width,
                            data: quantize(&r.rgb),
                        },
                        depth: r.depth,
                    }
                })
                .collect();
            return Ok(Scene {
                scene_id: format!("scene_{:08}", cfg.seed),
                cloud,
                cameras,
                boxes: objects.iter().map(Primitive::bounding_box).collect(),
                lighting: cfg.lighting,
            });
        }
        if attempt + 1 == MAX_ATTEMPTS {
            break;
        }
        for i in unsupported {
            let others: Vec<Primitive> = objects
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| o.clone())
                .collect();
            objects[i] = place(&mut rng, cfg, &terrain, objects[i].class_id, &others)?;
        }
    }
    Err(Error::Generation(format!(
        "objects lack sensor support after {MAX_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project_points;

    fn flat() -> SceneGeometry {
        SceneGeometry {
            terrain: Terrain::flat(),
            objects: vec![],
            sun: [0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn downward_ray_hits_flat_ground() {
        let lidar = LidarSpec {
            channels: 1,
            elevation_deg: (-90.0, -90.0),
            azimuth_fov_deg: 0.0,
            azimuth_res_deg: 1.0,
            max_range: 10.0,
            origin: [0.0, 0.0, 2.0],
        };
        let (cloud, _) = sample_lidar(&flat(), &lidar);
        assert_eq!(cloud.len(), 1);
        let p = cloud.points[0];
        assert!(p[2].abs() < 1e-6 && p[0].abs() < 1e-6);
    }

    #[test]
    fn ray_missing_everything_emits_nothing() {
        let lidar = LidarSpec {
            channels: 1,
            elevation_deg: (10.0, 10.0),
            azimuth_fov_deg: 0.0,
            azimuth_res_deg: 1.0,
            max_range: 50.0,
            origin: [0.0, 0.0, 2.0],
        };
        assert!(sample_lidar(&flat(), &lidar).0.is_empty());
    }

    #[test]
    fn sphere_ahead_is_hit_at_four_meters() {
        let mut g = flat();
        g.terrain = Terrain {
            waves: vec![],
            craters: vec![],
        };
        g.objects.push(Primitive {
            shape: Shape::Ellipsoid {
                semi_axes: [1.0, 1.0, 1.0],
            },
            center: [5.0, 0.0, 2.0],
            yaw: 0.3,
            albedo: [0.5; 3],
            class_id: METEOR,
        });
        let hit = g.cast(&[0.0, 0.0, 2.0], &[1.0, 0.0, 0.0], 30.0).unwrap();
        assert!((hit.t - 4.0).abs() < 1e-9);
        assert_eq!(hit.object, Some(0));
    }

    #[test]
    fn empty_scene_has_no_boxes() {
        let cfg = SceneConfig {
            seed: 5,
            n_meteors: 0,
            n_platforms: 0,
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        assert!(s.boxes.is_empty());
        assert!(!s.cloud.is_empty());
        assert_eq!(s.cameras.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
    }

    #[test]
    fn every_box_has_sensor_support() {
        let cfg = SceneConfig {
            seed: 7,
            n_meteors: 3,
            n_platforms: 1,
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        assert_eq!(s.boxes.len(), 4);
        for b in &s.boxes {
            let pts = s
                .cloud
                .points
                .iter()
                .filter(|p| b.contains(&[p[0] as f64, p[1] as f64, p[2] as f64], 1e-3))
                .count();
            let px: usize = s
                .cameras
                .iter()
                .map(|f| {
                    let cam = &f.camera;
                    f.depth
                        .iter()
                        .enumerate()
                        .filter(|&(i, &d)| {
                            d > 0.0 && {
                                let (r, c) = (i / cam.width, i % cam.width);
                                let pc = cam.unproject(c as f64 + 0.5, r as f64 + 0.5, d as f64);
                                b.contains(&cam.camera_to_world(&pc), 1e-3)
                            }
                        })
                        .count()
                })
                .sum();
            assert!(pts >= 1 || px >= MIN_PIXEL_SUPPORT, "box {b:?}: {pts} points, {px} px");
        }
    }

    #[test]
    fn too_dense_config_fails() {
        let cfg = SceneConfig {
            seed: 1,
            n_meteors: 0,
            n_platforms: 80,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn objects_do_not_overlap() {
        for seed in 0..5 {
            let cfg = SceneConfig {
                seed,
                n_meteors: 4,
                n_platforms: 2,
                ..Default::default()
            };
            let s = generate_scene(&cfg).unwrap();
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    let ra = (a.size[0] / 2.0).hypot(a.size[1] / 2.0);
                    let rb = (b.size[0] / 2.0).hypot(b.size[1] / 2.0);
                    assert!(crate::geom::bev_center_distance(a, b) > ra + rb);
                }
            }
        }
    }

    #[test]
    fn lidar_points_lie_on_surfaces() {
        let cfg = SceneConfig {
            seed: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let terrain = random_terrain(&mut rng, cfg.extent);
        let geometry = SceneGeometry {
            terrain,
            objects: vec![],
            sun: [0.0, 0.0, 1.0],
        };
        let (cloud, _) = sample_lidar(&geometry, &cfg.lidar);
        assert!(cloud.len() > 1000);
        for p in &cloud.points {
            let r = p[2] as f64 - geometry.terrain.height(p[0] as f64, p[1] as f64);
            assert!(r.abs() < 1e-3, "residual {r}");
        }
    }

    #[test]
    fn camera_depth_agrees_with_lidar() {
        let cfg = SceneConfig {
            seed: 11,
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        let f = &s.cameras[0];
        let cam = &f.camera;
        let proj = project_points(&s.cloud, cam);
        assert!(proj.len() > 500);
        let inv = |r: usize, c: usize| {
            let d = f.depth[r * cam.width + c];
            (d > 0.0).then(|| 1.0 / d as f64)
        };
        // Inverse depth is affine in pixel coordinates over a plane, so any
        // sizeable second difference in the 4x4 stencil marks a silhouette.
        let planar = |r0: usize, c0: usize| {
            if r0 == 0 || c0 == 0 || r0 + 2 >= cam.height || c0 + 2 >= cam.width {
                return false;
            }
            let mut g = [[0.0; 4]; 4];
            for (i, row) in g.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    match inv(r0 + i - 1, c0 + j - 1) {
                        Some(x) => *v = x,
                        None => return false,
                    }
                }
            }
            let tol = 0.02 * g[1][1];
            (0..4).all(|i| (0..2).all(|j| (g[i][j] - 2.0 * g[i][j + 1] + g[i][j + 2]).abs() < tol))
                && (0..4).all(|j| (0..2).all(|i| (g[i][j] - 2.0 * g[i + 1][j] + g[i + 2][j]).abs() < tol))
                && (0..3).all(|i| (0..3).all(|j| (g[i][j] - g[i][j + 1] - g[i + 1][j] + g[i + 1][j + 1]).abs() < tol))
        };
        let (mut good, mut smooth, mut total) = (0, 0, 0);
        for p in &proj {
            // Bilinear interpolation of inverse depth between pixel centers.
            let (x, y) = (p.u - 0.5, p.v - 0.5);
            if x < 0.0 || y < 0.0 || x >= (cam.width - 1) as f64 || y >= (cam.height - 1) as f64 {
                continue;
            }
            total += 1;
            let (c0, r0) = (x.floor() as usize, y.floor() as usize);
            let (fx, fy) = (x - c0 as f64, y - r0 as f64);
            let q = [inv(r0, c0), inv(r0, c0 + 1), inv(r0 + 1, c0), inv(r0 + 1, c0 + 1)];
            let [Some(a), Some(b), Some(c), Some(d)] = q else {
                continue;
            };
            if !planar(r0, c0) {
                continue;
            }
            smooth += 1;
            let v = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
            if (1.0 / v - p.depth).abs() < 0.1 {
                good += 1;
            }
        }
        assert!(
            smooth as f64 >= 0.6 * total as f64,
            "{smooth} of {total} points are interior"
        );
        let frac = good as f64 / smooth as f64;
        assert!(frac >= 0.95, "only {frac:.3} of points agree");
    }

    #[test]
    fn dim_lighting_scales_radiance() {
        let cfg = SceneConfig {
            seed: 9,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let terrain = random_terrain(&mut rng, cfg.extent);
        let geometry = SceneGeometry {
            terrain,
            objects: vec![],
            sun: random_sun(&mut rng),
        };
        let cam = &cfg.cameras()[0];
        let bright = render_camera(&geometry, cam, Lighting::Bright, 25.0, None);
        let dim = render_camera(&geometry, cam, Lighting::Dim, 25.0, None);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ratio = mean(&dim.rgb) / mean(&bright.rgb);
        assert!((ratio - 0.4).abs() <= 0.05, "ratio {ratio}");
        // Missed pixels: zero depth and sky radiance.
        for (i, d) in bright.depth.iter().enumerate() {
            if *d == 0.0 {
                assert_eq!(&bright.rgb[i * 3..i * 3 + 3], &[SKY; 3]);
            }
        }
    }
}
