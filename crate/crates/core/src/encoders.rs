//! Camera and LiDAR encoders: a small convolutional image backbone with
//! adapter slots, sparse depth rasterization, a categorical depth head with
//! its lift-splat geometry, and a pillar encoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::geom::{project_points, BevGridSpec, CameraModel, PointCloud};
use crate::graph::{Graph, PillarPlan, SplatPlan, Var};
use crate::nn::{Conv, ConvSpec};
use crate::params::{module_rng, normal_tensor, Group, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Adapter insertion point: slot A follows a stage's first convolution
/// (the attention analogue), slot B its second (the feed-forward analogue).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId {
    /// 1-based stage index.
    pub stage: usize,
    pub second: bool,
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.stage, if self.second { 'B' } else { 'A' })
    }
}

impl FromStr for SlotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("adapter slot {s:?} is not of the form <stage><A|B>, e.g. 2B"));
        let (num, letter) = s.split_at(s.len().checked_sub(1).ok_or_else(bad)?);
        let stage: usize = num.parse().map_err(|_| bad())?;
        let second = match letter {
            "A" | "a" => false,
            "B" | "b" => true,
            _ => return Err(bad()),
        };
        if stage == 0 {
            return Err(bad());
        }
        Ok(SlotId { stage, second })
    }
}

pub fn parse_slots(s: &str) -> Result<Vec<SlotId>> {
    let mut v: Vec<SlotId> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub downsample: Vec<bool>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![8, 16, 16],
            downsample: vec![true, true, false],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.downsample.len() {
            return Err(Error::Config("encoder needs one downsample flag per stage".into()));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder channels must be positive and non-decreasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.downsample.iter().filter(|&&d| d).count()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv_a: Conv,
    pub conv_b: Conv,
    pub adapter_a: Option<Adapter>,
    pub adapter_b: Option<Adapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraEncoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl CameraEncoder {
    /// Builds the backbone; `adapters` lists the slots to fill with
    /// zero-initialized adapters of bottleneck ratio `r`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        config: &EncoderConfig,
        adapters: &[SlotId],
        r: usize,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(s) = adapters.iter().find(|s| s.stage > config.channels.len()) {
            return Err(Error::Config(format!(
                "adapter slot {s} refers to a missing stage (encoder has {})",
                config.channels.len()
            )));
        }
        let g = Group::CameraEncoder;
        let mut cin = config.in_channels;
        let mut stages = Vec::with_capacity(config.channels.len());
        for (i, (&c, &down)) in config.channels.iter().zip(&config.downsample).enumerate() {
            let name = format!("cam.stage{}", i + 1);
            let conv_a = Conv::new(store, seed, &format!("{name}.conv_a"), g, ConvSpec::new(cin, c, 3));
            let conv_b = Conv::new(
                store,
                seed,
                &format!("{name}.conv_b"),
                g,
                ConvSpec::new(c, c, 3).stride(if down { 2 } else { 1 }),
            );
            let mut slot = |second: bool| -> Result<Option<Adapter>> {
                let id = SlotId { stage: i + 1, second };
                if adapters.contains(&id) {
                    Ok(Some(Adapter::new(store, seed, &format!("adapter.{id}"), c, r)?))
                } else {
                    Ok(None)
                }
            };
            let adapter_a = slot(false)?;
            let adapter_b = slot(true)?;
            stages.push(Stage {
                conv_a,
                conv_b,
                adapter_a,
                adapter_b,
            });
            cin = c;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// `image: [U, in_channels, H, W]` to `[U, C, H / stride, W / stride]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        let stride = self.config.stride();
        if s.len() != 4
            || s[1] != self.config.in_channels
            || !s[2].is_multiple_of(stride)
            || !s[3].is_multiple_of(stride)
        {
            return Err(Error::Shape(format!(
                "camera encoder expects [U, {}, H, W] with H, W divisible by {stride}, got {:?}",
                self.config.in_channels, s
            )));
        }
        let mut x = image;
        for st in &self.stages {
            let a = st.conv_a.forward(g, store, x)?;
            x = g.relu(a);
            if let Some(ad) = &st.adapter_a {
                x = ad.forward(g, store, x)?;
            }
            let b = st.conv_b.forward(g, store, x)?;
            x = g.relu(b);
            if let Some(ad) = &st.adapter_b {
                x = ad.forward(g, store, x)?;
            }
        }
        Ok(x)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.stages
            .iter()
            .flat_map(|s| s.adapter_a.iter().chain(s.adapter_b.iter()))
    }
}

/// Uniform categorical depth bins over `[d_min, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 20.0,
            count: 16,
        }
    }
}

impl DepthBins {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0) || !(self.d_max > self.d_min) || self.count < 2 {
            return Err(Error::Config(format!("invalid depth bins {:?}", self)));
        }
        Ok(())
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * (self.d_max - self.d_min) / self.count as f64
    }
}

/// Rasterizes the cloud into a `[1, 1, H / stride, W / stride]` depth map
/// holding the nearest point depth per cell, 0 where empty.
pub fn depth_project(cloud: &PointCloud, cam: &CameraModel, stride: usize) -> Tensor<f32> {
    let (h, w) = (cam.height / stride, cam.width / stride);
    let mut map = vec![0.0f32; h * w];
    for p in project_points(cloud, cam) {
        let (r, c) = (
            (p.v / stride as f64).floor() as usize,
            (p.u / stride as f64).floor() as usize,
        );
        if r >= h || c >= w {
            continue;
        }
        let d = p.depth as f32;
        let cell = &mut map[r * w + c];
        if *cell == 0.0 || d < *cell {
            *cell = d;
        }
    }
    Tensor::from_vec(&[1, 1, h, w], map).expect("sized above")
}

/// Per-pixel categorical depth distribution: a 1x1 convolution to
/// `bins` logits followed by a softmax over the bin axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHead {
    pub conv: Conv,
}

impl DepthHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, channels: usize, bins: usize) -> Self {
        Self {
            conv: Conv::new(
                store,
                seed,
                "depth_head",
                Group::DepthHead,
                ConvSpec::new(channels, bins, 1),
            ),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(g, store, x)?;
        g.softmax(logits)
    }
}

/// Destination BEV cell (row-major, [`SplatPlan::NONE`] off-grid) of every
/// `(bin, pixel)` of one camera's feature map. Each feature pixel is lifted
/// along the ray through its center at every bin-center depth.
pub fn splat_cells(cam: &CameraModel, stride: usize, bins: &DepthBins, grid: &BevGridSpec) -> Vec<u32> {
    let (h, w) = (cam.height / stride, cam.width / stride);
    let gw = grid.width();
    let mut out = Vec::with_capacity(bins.count * h * w);
    for k in 0..bins.count {
        let z = bins.center(k);
        for r in 0..h {
            for c in 0..w {
                let u = (c as f64 + 0.5) * stride as f64;
                let v = (r as f64 + 0.5) * stride as f64;
                let p = cam.camera_to_world(&cam.unproject(u, v, z));
                out.push(match grid.world_to_cell(p[0], p[1]) {
                    Some((row, col)) => (row * gw + col) as u32,
                    None => SplatPlan::NONE,
                });
            }
        }
    }
    out
}

/// Combines per-unit splat cells into one batched plan; `units[i]` is
/// `(sample index, cells)`.
pub fn assemble_splat_plan(
    units: &[(usize, &[u32])],
    samples: usize,
    bins: usize,
    pixels: usize,
    grid: &BevGridSpec,
) -> Result<SplatPlan> {
    let cells = grid.cells();
    let mut dest = Vec::with_capacity(units.len() * bins * pixels);
    for &(s, c) in units {
        if c.len() != bins * pixels || s >= samples {
            return Err(Error::Shape(format!(
                "splat unit for sample {s} has {} cells, expected {}",
                c.len(),
                bins * pixels
            )));
        }
        dest.extend(c.iter().map(|&d| {
            if d == SplatPlan::NONE {
                d
            } else {
                (s * cells) as u32 + d
            }
        }));
    }
    Ok(SplatPlan {
        units: units.len(),
        bins,
        pixels,
        samples,
        bev_h: grid.height(),
        bev_w: grid.width(),
        dest,
    })
}

/// Number of per-point input features of the pillar encoder.
pub const POINT_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PillarSpec {
    pub grid: BevGridSpec,
    pub max_points: usize,
    pub embed: usize,
}

impl PillarSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.max_points == 0 || self.embed == 0 {
            return Err(Error::Config("pillar max_points and embed width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Points grouped into pillars: kept-point features `[N, POINT_FEATURES]`
/// and each kept point's cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Pillars {
    pub features: Vec<f32>,
    pub cells: Vec<u32>,
}

impl Pillars {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Assigns in-grid points to pillars, keeping at most `max_points` per
/// pillar in point-index order. Per point: offset from the pillar center
/// (x, y, in cells), height, height above the pillar's lowest kept point,
/// intensity, and pillar occupancy. Every feature is order-independent.
pub fn pillarize(cloud: &PointCloud, spec: &PillarSpec) -> Pillars {
    let grid = &spec.grid;
    let gw = grid.width();
    let mut count = vec![0usize; grid.cells()];
    let mut kept: Vec<(usize, u32)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if let Some((r, c)) = grid.world_to_cell(p[0] as f64, p[1] as f64) {
            let cell = r * gw + c;
            if count[cell] < spec.max_points {
                count[cell] += 1;
                kept.push((i, cell as u32));
            }
        }
    }
    let mut zmin = vec![f32::INFINITY; grid.cells()];
    for &(i, cell) in &kept {
        let z = cloud.points[i][2];
        let m = &mut zmin[cell as usize];
        *m = m.min(z);
    }
    let mut features = Vec::with_capacity(kept.len() * POINT_FEATURES);
    let mut cells = Vec::with_capacity(kept.len());
    for &(i, cell) in &kept {
        let p = cloud.points[i];
        let (row, col) = (cell as usize / gw, cell as usize % gw);
        let (cx, cy) = grid.cell_center(row, col);
        features.extend_from_slice(&[
            ((p[0] as f64 - cx) / grid.cell_size) as f32,
            ((p[1] as f64 - cy) / grid.cell_size) as f32,
            p[2],
            p[2] - zmin[cell as usize],
            p[3],
            count[cell as usize] as f32 / spec.max_points as f32,
        ]);
        cells.push(cell);
    }
    Pillars { features, cells }
}

/// Batches pillar sets: `(features [N, F], plan)`.
pub fn assemble_pillars<T: Real>(parts: &[&Pillars], grid: &BevGridSpec) -> (Tensor<T>, PillarPlan) {
    let cells = grid.cells() as u32;
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut feats = Vec::with_capacity(n * POINT_FEATURES);
    let mut dest = Vec::with_capacity(n);
    for (s, p) in parts.iter().enumerate() {
        feats.extend(p.features.iter().map(|&v| T::of(v as f64)));
        dest.extend(p.cells.iter().map(|&c| s as u32 * cells + c));
    }
    (
        Tensor::from_vec(&[n, POINT_FEATURES], feats).expect("sized above"),
        PillarPlan {
            samples: parts.len(),
            bev_h: grid.height(),
            bev_w: grid.width(),
            dest,
        },
    )
}

/// Pointwise linear embedding + ReLU, max-pooled per pillar.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub embed: usize,
}

impl PillarEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, embed: usize) -> Self {
        let mut rng = module_rng(seed, "pillar.weight");
        let w = normal_tensor(&[POINT_FEATURES, embed], (2.0 / POINT_FEATURES as f64).sqrt(), &mut rng);
        Self {
            weight: store.add("pillar.weight", Group::Pillar, w),
            // A small positive bias keeps most units alive on occupied pillars.
            bias: store.add("pillar.bias", Group::Pillar, Tensor::full(&[1, embed], T::of(0.1))),
            embed,
        }
    }

    /// `features: [N, POINT_FEATURES]` to `[samples, embed, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        plan: &PillarPlan,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let lin = g.matmul(features, w)?;
        let pre = g.add(lin, b)?;
        let act = g.relu(pre);
        g.pillar_max(act, plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;

    fn cam() -> CameraModel {
        CameraModel::looking([0.0, 0.0, 1.6], 0.0, 0.35, 32.0, 48, 64)
    }

    fn grid() -> BevGridSpec {
        BevGridSpec::new((0.0, 16.0), (-8.0, 8.0), 0.5, 16).unwrap()
    }

    #[test]
    fn slot_parsing() {
        assert_eq!(
            parse_slots("3A, 2B,2B").unwrap(),
            vec![
                SlotId { stage: 2, second: true },
                SlotId {
                    stage: 3,
                    second: false
                }
            ]
        );
        assert!(parse_slots("2C").is_err());
        assert!(parse_slots("0A").is_err());
        assert_eq!(SlotId { stage: 1, second: true }.to_string(), "1B");
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut store = ParamStore::<f32>::new();
        let enc = CameraEncoder::new(&mut store, 1, &EncoderConfig::default(), &[], 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 48, 64]));
        let y = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 12, 16]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_init_adapters_leave_encoder_unchanged() {
        let cfg = EncoderConfig::default();
        let all = parse_slots("1A,1B,2A,2B,3A,3B").unwrap();
        let mut plain = ParamStore::<f32>::new();
        let mut with = ParamStore::<f32>::new();
        let e0 = CameraEncoder::new(&mut plain, 5, &cfg, &[], 4).unwrap();
        let e1 = CameraEncoder::new(&mut with, 5, &cfg, &all, 4).unwrap();
        let mut rng = module_rng(2, "img");
        let img: Tensor<f32> = normal_tensor(&[2, 3, 48, 64], 1.0, &mut rng);
        let run = |e: &CameraEncoder, s: &ParamStore<f32>| {
            let mut g = Graph::new();
            let x = g.input(img.clone());
            let y = e.forward(&mut g, s, x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&e0, &plain), run(&e1, &with));
        assert_eq!(e1.adapters().count(), 6);
    }

    #[test]
    fn depth_projection_min_pools() {
        let c = cam();
        assert!(depth_project(&PointCloud::default(), &c, 4)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let p1: Vec3 = c.camera_to_world(&c.unproject(21.0, 30.0, 7.0));
        let p2: Vec3 = c.camera_to_world(&c.unproject(22.0, 29.0, 3.0));
        let cloud = PointCloud {
            points: vec![
                [p1[0] as f32, p1[1] as f32, p1[2] as f32, 0.5],
                [p2[0] as f32, p2[1] as f32, p2[2] as f32, 0.5],
            ],
        };
        let m = depth_project(&cloud, &c, 4);
        let nz: Vec<(usize, f32)> = m
            .data()
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        assert_eq!(nz.len(), 1);
        assert_eq!(nz[0].0, 7 * 16 + 5);
        assert!((nz[0].1 - 3.0).abs() < 1e-4);
    }

    #[test]
    fn zero_logits_give_uniform_depth() {
        let mut store = ParamStore::<f64>::new();
        let head = DepthHead::new(&mut store, 0, 4, 16);
        *store.value_mut(head.conv.w) = Tensor::zeros(&[16, 4, 1, 1]);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 4, 3, 3], 2.0));
        let p = head.forward(&mut g, &store, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn one_hot_splat_lands_in_one_cell() {
        let c = cam();
        let bins = DepthBins::default();
        let gr = grid();
        let cells = splat_cells(&c, 4, &bins, &gr);
        let plan = std::sync::Arc::new(assemble_splat_plan(&[(0, &cells)], 1, bins.count, 192, &gr).unwrap());
        let (k, pix) = (3, 6 * 16 + 8);
        let mut feat = Tensor::<f64>::zeros(&[1, 2, 12, 16]);
        feat.data_mut()[pix] = 1.5;
        feat.data_mut()[192 + pix] = -0.5;
        let mut prob = Tensor::<f64>::zeros(&[1, 16, 12, 16]);
        prob.data_mut()[k * 192 + pix] = 1.0;
        let mut g = Graph::new();
        let (f, p) = (g.input(feat), g.input(prob));
        let bev = g.lift_splat(f, p, plan.clone()).unwrap();
        let v = g.value(bev).data();
        let dest = cells[k * 192 + pix] as usize;
        assert_ne!(dest as u32, SplatPlan::NONE);
        let nz: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
        assert_eq!(nz, vec![dest, gr.cells() + dest]);
        assert_eq!((v[dest], v[gr.cells() + dest]), (1.5, -0.5));
    }

    #[test]
    fn pillars_are_permutation_invariant() {
        let spec = PillarSpec {
            grid: grid(),
            max_points: 64,
            embed: 8,
        };
        let mut rng = module_rng(4, "pts");
        let raw: Tensor<f64> = normal_tensor(&[300, 4], 3.0, &mut rng);
        let pts: Vec<[f32; 4]> = raw
            .data()
            .chunks(4)
            .map(|c| [(c[0].abs() * 2.0) as f32, c[1] as f32, c[2] as f32 * 0.1, 0.5])
            .collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 100);
        let mut store = ParamStore::<f32>::new();
        let enc = PillarEncoder::new(&mut store, 1, 8);
        let run = |points: Vec<[f32; 4]>| {
            let p = pillarize(&PointCloud { points }, &spec);
            let (f, plan) = assemble_pillars::<f32>(&[&p], &spec.grid);
            let mut g = Graph::new();
            let fv = g.input(f);
            let y = enc.forward(&mut g, &store, fv, &plan).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(pts), run(shuffled));
    }

    #[test]
    fn one_point_per_pillar_marks_exactly_those_cells() {
        let gr = grid();
        let spec = PillarSpec {
            grid: gr,
            max_points: 4,
            embed: 8,
        };
        let targets = [(3usize, 5usize), (10, 20), (31, 0)];
        let points = targets
            .iter()
            .map(|&(r, c)| {
                let (x, y) = gr.cell_center(r, c);
                [x as f32, y as f32, 0.3, 0.5]
            })
            .collect();
        let mut store = ParamStore::<f32>::new();
        let enc = PillarEncoder::new(&mut store, 1, 8);
        let p = pillarize(&PointCloud { points }, &spec);
        let (f, plan) = assemble_pillars::<f32>(&[&p], &gr);
        let mut g = Graph::new();
        let fv = g.input(f);
        let y = enc.forward(&mut g, &store, fv, &plan).unwrap();
        let v = g.value(y);
        for r in 0..gr.height() {
            for c in 0..gr.width() {
                let any = (0..8).any(|e| v.at4(0, e, r, c) != 0.0);
                assert_eq!(any, targets.contains(&(r, c)), "cell ({r}, {c})");
            }
        }
        let empty = pillarize(&PointCloud::default(), &spec);
        let (f, plan) = assemble_pillars::<f32>(&[&empty], &gr);
        let mut g = Graph::new();
        let fv = g.input(f);
        let y = enc.forward(&mut g, &store, fv, &plan).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
