//! End-to-end model: camera encoder (+ adapters) -> depth head -> lift-splat,
//! pillar encoder, concat + two 3x3 fusion convs -> coordinate attention ->
//! detection head. Alignment and the auxiliary branch only run in training.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{align_loss, DepthAlign};
use crate::auxbranch::AuxBranch;
use crate::config::RunConfig;
use crate::coordatt::CoordAtt;
use crate::detect::{build_targets, decode_batch, detection_loss, BatchTargets, DetectionHead, HeadOutput, TargetMaps};
use crate::encoders::{
    assemble_pillars, assemble_splat_plan, depth_project, parse_slots, pillarize, splat_cells, CameraEncoder,
    DepthBins, DepthHead, EncoderConfig, PillarEncoder, PillarSpec, Pillars, SlotId,
};
use crate::error::{Error, Result};
use crate::geom::{BevGridSpec, Box3D};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, ConvSpec};
use crate::params::{Group, ParamId, ParamStore};
use crate::synth::{Lighting, Scene, SceneConfig, CLASS_NAMES};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub align: f64,
    pub aux: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.align >= 0.0 && self.aux >= 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub grid: BevGridSpec,
    pub bins: DepthBins,
    pub encoder: EncoderConfig,
    pub pillar: PillarSpec,
    pub fusion_channels: usize,
    pub align: bool,
    pub align_tau: f64,
    pub align_symmetric: bool,
    pub auxbranch: bool,
    pub adapter: bool,
    pub adapter_r: usize,
    pub adapter_slots: Vec<SlotId>,
    pub coordatt: bool,
    pub coordatt_reduction: usize,
    pub weights: LossWeights,
    pub reg_weight: f64,
    pub k_max: usize,
    pub score_thresh: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let fusion_channels = cfg.usize("fusion.channels")?;
        let grid = BevGridSpec::new(
            (cfg.f64("grid.x_min")?, cfg.f64("grid.x_max")?),
            (cfg.f64("grid.y_min")?, cfg.f64("grid.y_max")?),
            cfg.f64("grid.cell")?,
            fusion_channels,
        )?;
        let flags: Vec<u8> = cfg.list("encoder.downsample")?;
        let encoder = EncoderConfig {
            in_channels: 3,
            channels: cfg.list("encoder.channels")?,
            downsample: flags.into_iter().map(|f| f != 0).collect(),
        };
        let bins = DepthBins {
            d_min: cfg.f64("depth.min")?,
            d_max: cfg.f64("depth.max")?,
            count: cfg.usize("depth.bins")?,
        };
        let tau = cfg.f64("align.tau")?;
        if tau <= 0.0 {
            return Err(Error::Config(format!("align.tau must be > 0, got {tau}")));
        }
        let m = Self {
            classes: CLASS_NAMES.len(),
            grid,
            bins,
            encoder,
            pillar: PillarSpec {
                grid,
                max_points: cfg.usize("pillar.max_points")?,
                embed: cfg.usize("pillar.embed")?,
            },
            fusion_channels,
            align: cfg.bool("align.enabled")?,
            align_tau: tau,
            align_symmetric: cfg.bool("align.symmetric")?,
            auxbranch: cfg.bool("auxbranch.enabled")?,
            adapter: cfg.bool("adapter.enabled")?,
            adapter_r: cfg.usize("adapter.r")?,
            adapter_slots: parse_slots(cfg.str("adapter.slots"))?,
            coordatt: cfg.bool("coordatt.enabled")?,
            coordatt_reduction: cfg.usize("coordatt.reduction")?,
            weights: LossWeights {
                align: cfg.f64("align.weight")?,
                aux: cfg.f64("auxbranch.weight")?,
            },
            reg_weight: cfg.f64("detect.reg_weight")?,
            k_max: cfg.usize("detect.k_max")?,
            score_thresh: cfg.f64("detect.score_thresh")?,
            seed: cfg.u64("model.seed")?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.bins.validate()?;
        self.encoder.validate()?;
        self.pillar.validate()?;
        self.weights.validate()?;
        if self.fusion_channels == 0 || self.classes == 0 {
            return Err(Error::Config("fusion.channels and class count must be positive".into()));
        }
        if !self.grid.height().is_multiple_of(2) || !self.grid.width().is_multiple_of(2) {
            return Err(Error::Config("BEV grid dimensions must be even".into()));
        }
        Ok(())
    }
}

/// Scene generator settings for scene `seed` under a run config.
pub fn scene_config(cfg: &RunConfig, seed: u64) -> Result<SceneConfig> {
    let lighting = Lighting::parse(cfg.str("data.lighting"))
        .ok_or_else(|| Error::Config(format!("unknown data.lighting {:?}", cfg.str("data.lighting"))))?;
    let sc = SceneConfig {
        seed,
        n_meteors: cfg.usize("data.n_meteors")?,
        n_platforms: cfg.usize("data.n_platforms")?,
        n_cameras: cfg.usize("data.n_cameras")?,
        lighting,
        ..SceneConfig::default()
    };
    sc.validate()?;
    Ok(sc)
}

/// Seeds of the two splits: training scenes start at `data.seed`, validation
/// scenes at `data.seed + 100000`.
pub fn split_seeds(cfg: &RunConfig, split: &str) -> Result<Vec<u64>> {
    let base = cfg.u64("data.seed")?;
    match split {
        "train" => Ok((0..cfg.u64("data.n_train")?).map(|i| base + i).collect()),
        "val" => Ok((0..cfg.u64("data.n_val")?).map(|i| base + 100_000 + i).collect()),
        s => Err(Error::Config(format!("unknown split {s:?} (expected train or val)"))),
    }
}

/// Every network input derived from one scene, computed once.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene_id: String,
    /// `[n_cameras, 3, H, W]`, RGB in `[0, 1]`.
    pub images: Tensor<f32>,
    /// `[n_cameras, 1, h, w]` nearest LiDAR depth at feature resolution,
    /// divided by the last bin edge; 0 where no point projects.
    pub depth: Tensor<f32>,
    /// Per camera, the BEV cell of every `(bin, feature pixel)`.
    pub splat: Vec<Vec<u32>>,
    pub pillars: Pillars,
    pub targets: TargetMaps,
    pub boxes: Vec<Box3D>,
}

impl Sample {
    pub fn new(scene: &Scene, cfg: &ModelConfig) -> Result<Self> {
        let stride = cfg.encoder.stride();
        let mut images = Vec::new();
        let mut depths = Vec::new();
        let mut splat = Vec::new();
        for frame in &scene.cameras {
            let (h, w) = (frame.rgb.height, frame.rgb.width);
            let mut chw = vec![0.0f32; 3 * h * w];
            for (i, px) in frame.rgb.data.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    chw[c * h * w + i] = px[c] as f32 / 255.0;
                }
            }
            images.push(Tensor::from_vec(&[1, 3, h, w], chw)?);
            let scale = 1.0 / cfg.bins.d_max as f32;
            depths.push(depth_project(&scene.cloud, &frame.camera, stride).map(|d| d * scale));
            splat.push(splat_cells(&frame.camera, stride, &cfg.bins, &cfg.grid));
        }
        if images.is_empty() {
            return Err(Error::Shape(format!("scene {} has no cameras", scene.scene_id)));
        }
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            images: Tensor::concat_batch(&images.iter().collect::<Vec<_>>())?,
            depth: Tensor::concat_batch(&depths.iter().collect::<Vec<_>>())?,
            splat,
            pillars: pillarize(&scene.cloud, &cfg.pillar),
            targets: build_targets(&scene.boxes, &cfg.grid, cfg.classes)?,
            boxes: scene.boxes.clone(),
        })
    }

    pub fn cameras(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Batched graph inputs.
pub struct Batch<T: Real> {
    pub samples: usize,
    pub images: Tensor<T>,
    pub depth: Tensor<T>,
    pub splat: Arc<crate::graph::SplatPlan>,
    pub pillar_features: Tensor<T>,
    pub pillar_plan: crate::graph::PillarPlan,
    pub targets: BatchTargets<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(samples: &[&Sample], cfg: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.images.cast()).collect();
        let depth: Vec<Tensor<T>> = samples.iter().map(|s| s.depth.cast()).collect();
        let (_, _, h, w) = samples[0].depth.dims4();
        let units: Vec<(usize, &[u32])> = samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.splat.iter().map(move |c| (i, c.as_slice())))
            .collect();
        let plan = assemble_splat_plan(&units, samples.len(), cfg.bins.count, h * w, &cfg.grid)?;
        let pillars: Vec<&Pillars> = samples.iter().map(|s| &s.pillars).collect();
        let (pillar_features, pillar_plan) = assemble_pillars(&pillars, &cfg.grid);
        let targets: Vec<&TargetMaps> = samples.iter().map(|s| &s.targets).collect();
        Ok(Self {
            samples: samples.len(),
            images: Tensor::concat_batch(&images.iter().collect::<Vec<_>>())?,
            depth: Tensor::concat_batch(&depth.iter().collect::<Vec<_>>())?,
            splat: Arc::new(plan),
            pillar_features,
            pillar_plan,
            targets: BatchTargets::stack(&targets)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: CameraEncoder,
    pub depth_head: DepthHead,
    pub pillar: PillarEncoder,
    pub align: Option<DepthAlign>,
    pub fusion: [Conv; 2],
    pub coordatt: Option<CoordAtt>,
    pub head: DetectionHead,
    pub aux: Option<AuxBranch>,
}

/// Intermediate maps of one forward pass.
pub struct Features {
    /// Image features before the view transform, `[U, C, h, w]`.
    pub image: Var,
    /// `[B, C, H, W]` camera BEV after lift-splat.
    pub camera_bev: Var,
    pub head: HeadOutput,
}

impl Model {
    /// Registers every leaf in a fixed order. Leaf values depend only on
    /// `(config.seed, leaf name)`, so toggling a plugin leaves every other
    /// leaf unchanged.
    pub fn new<T: Real>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let slots: &[SlotId] = if config.adapter { &config.adapter_slots } else { &[] };
        let encoder = CameraEncoder::new(&mut store, seed, &config.encoder, slots, config.adapter_r)?;
        let c_img = config.encoder.out_channels();
        let depth_head = DepthHead::new(&mut store, seed, c_img, config.bins.count);
        let pillar = PillarEncoder::new(&mut store, seed, config.pillar.embed);
        let align = if config.align {
            Some(DepthAlign::new(&mut store, seed, c_img)?)
        } else {
            None
        };
        let f = config.fusion_channels;
        let fusion = [
            Conv::new(
                &mut store,
                seed,
                "fusion.conv1",
                Group::Fusion,
                ConvSpec::new(c_img + config.pillar.embed, f, 3),
            ),
            Conv::new(&mut store, seed, "fusion.conv2", Group::Fusion, ConvSpec::new(f, f, 3)),
        ];
        let coordatt = if config.coordatt {
            Some(CoordAtt::new(&mut store, seed, f, config.coordatt_reduction)?)
        } else {
            None
        };
        let head = DetectionHead::new(&mut store, seed, "head", Group::Head, f, config.classes);
        let aux = config
            .auxbranch
            .then(|| AuxBranch::new(&mut store, seed, c_img, config.classes));
        let model = Self {
            config: config.clone(),
            encoder,
            depth_head,
            pillar,
            align,
            fusion,
            coordatt,
            head,
            aux,
        };
        Ok((model, store))
    }

    /// Inference path shared by training: never touches alignment or
    /// auxiliary-branch leaves.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch<T>) -> Result<Features> {
        let images = g.input(batch.images.clone());
        let image = self.encoder.forward(g, store, images)?;
        let prob = self.depth_head.forward(g, store, image)?;
        let camera_bev = g.lift_splat(image, prob, batch.splat.clone())?;
        let pts = g.input(batch.pillar_features.clone());
        let lidar_bev = self.pillar.forward(g, store, pts, &batch.pillar_plan)?;
        let cat = g.concat(&[camera_bev, lidar_bev], 1)?;
        let x = self.fusion[0].forward(g, store, cat)?;
        let x = g.relu(x);
        let x = self.fusion[1].forward(g, store, x)?;
        let mut x = g.relu(x);
        if let Some(ca) = &self.coordatt {
            x = ca.forward(g, store, x)?;
        }
        let head = self.head.forward(g, store, x)?;
        Ok(Features {
            image,
            camera_bev,
            head,
        })
    }

    pub fn ids_in(&self, store: &ParamStore<impl Real>, group: Group) -> Vec<ParamId> {
        store.ids().filter(|&id| store.leaf(id).group == group).collect()
    }
}

/// Scalar loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub det: f64,
    pub align: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBundle {
    fn check(&self, step: u64) -> Result<()> {
        for (component, v) in [
            ("L_det", self.det),
            ("L_align", self.align),
            ("L_aux", self.aux),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component, step });
            }
        }
        Ok(())
    }
}

/// A training graph and its loss nodes.
pub struct TrainForward<T: Real> {
    pub graph: Graph<T>,
    pub total: Var,
    pub losses: LossBundle,
}

/// `total = L_det + weights.align * L_align + weights.aux * L_aux`; disabled
/// plugins contribute exactly zero.
pub fn forward_train<T: Real>(model: &Model, store: &ParamStore<T>, samples: &[&Sample]) -> Result<TrainForward<T>> {
    let cfg = &model.config;
    let batch = Batch::<T>::new(samples, cfg)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, store, &batch)?;
    let det = detection_loss(&mut g, f.head, &batch.targets, cfg.reg_weight)?;
    let mut total = det.total;
    let mut losses = LossBundle::default();
    if let Some(al) = &model.align {
        let depth = g.input(batch.depth.clone());
        let dep = al.encode(&mut g, store, depth)?;
        let l = align_loss(&mut g, f.image, dep, cfg.align_tau, cfg.align_symmetric)?;
        losses.align = g.value(l).data()[0].f64();
        let w = g.scale(l, T::of(cfg.weights.align));
        total = g.add(total, w)?;
    }
    if let Some(aux) = &model.aux {
        let out = aux.forward(&mut g, store, f.camera_bev)?;
        let l = detection_loss(&mut g, out, &batch.targets, cfg.reg_weight)?;
        losses.aux = g.value(l.total).data()[0].f64();
        let w = g.scale(l.total, T::of(cfg.weights.aux));
        total = g.add(total, w)?;
    }
    losses.det = g.value(det.total).data()[0].f64();
    losses.total = g.value(total).data()[0].f64();
    Ok(TrainForward {
        graph: g,
        total,
        losses,
    })
}

/// Detections per sample, plus every parameter the graph read.
pub fn forward_infer_traced<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[&Sample],
) -> Result<(Vec<Vec<Box3D>>, BTreeSet<ParamId>)> {
    let cfg = &model.config;
    let batch = Batch::<T>::new(samples, cfg)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, store, &batch)?;
    let boxes = decode_batch(
        g.value(f.head.heatmap),
        g.value(f.head.reg),
        &cfg.grid,
        cfg.k_max,
        cfg.score_thresh,
    );
    Ok((boxes, g.touched().clone()))
}

pub fn forward_infer<T: Real>(model: &Model, store: &ParamStore<T>, sample: &Sample) -> Result<Vec<Box3D>> {
    Ok(forward_infer_traced(model, store, &[sample])?.0.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeMode {
    Full,
    Delta,
}

impl FreezeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "delta" => Ok(Self::Delta),
            _ => Err(Error::Config(format!("freeze.mode must be full or delta, got {s:?}"))),
        }
    }
}

/// Delta mode freezes the camera encoder outside its adapters; full mode
/// makes every leaf trainable.
pub fn apply_freeze_mask<T: Real>(store: &mut ParamStore<T>, mode: FreezeMode) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let frozen = mode == FreezeMode::Delta && store.leaf(id).group == Group::CameraEncoder;
        store.set_trainable(id, !frozen);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Inference,
    Training,
}

pub fn count_params<T: Real>(store: &ParamStore<T>, mode: CountMode) -> usize {
    store
        .leaves()
        .iter()
        .filter(|l| mode == CountMode::Training || l.inference)
        .map(|l| l.value.len())
        .sum()
}

/// Inference parameters added by adapters and coordinate attention,
/// relative to the rest of the inference model.
pub fn plugin_overhead<T: Real>(store: &ParamStore<T>) -> f64 {
    let plugin = store.group_size(Group::Adapter) + store.group_size(Group::CoordAtt);
    let base = count_params(store, CountMode::Inference) - plugin;
    plugin as f64 / base as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Cosine schedule length.
    pub total_steps: u64,
    pub batch: usize,
}

impl TrainOptions {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let o = Self {
            lr: cfg.f64("train.lr")?,
            momentum: cfg.f64("train.momentum")?,
            clip: cfg.f64("train.clip")?,
            total_steps: cfg.u64("train.steps")?,
            batch: cfg.usize("train.batch")?,
        };
        if o.lr < 0.0 || !(0.0..1.0).contains(&o.momentum) || o.clip < 0.0 || o.batch == 0 {
            return Err(Error::Config(format!("invalid training options {o:?}")));
        }
        Ok(o)
    }

    /// Cosine decay from `lr` at step 0 to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

/// Exponential moving average factor of [`TrainState::average`].
pub const AVERAGE_DECAY: f64 = 0.98;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Momentum buffer per leaf (store order); empty until first updated.
    pub velocity: Vec<Vec<f32>>,
    pub rng: ChaCha8Rng,
    /// Current epoch's sample order and position in it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub average: LossBundle,
}

impl TrainState {
    pub fn new(seed: u64, leaves: usize) -> Self {
        Self {
            step: 0,
            velocity: vec![Vec::new(); leaves],
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            average: LossBundle::default(),
        }
    }

    /// Next `batch` sample indices; reshuffles at every epoch boundary.
    pub fn next_batch(&mut self, n: usize, batch: usize) -> Result<Vec<usize>> {
        if n == 0 || batch > n {
            return Err(Error::Config(format!(
                "batch {batch} needs at least that many scenes, have {n}"
            )));
        }
        if self.order.len() != n || self.cursor + batch > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
    pub lr: f64,
    pub grad_norm: f64,
    /// Leaves that received a gradient (frozen leaves never do).
    pub updated: Vec<ParamId>,
}

/// One momentum-SGD step on the weighted total loss. Frozen leaves get no
/// gradient and keep their value and momentum.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    state: &mut TrainState,
    samples: &[&Sample],
    opts: &TrainOptions,
) -> Result<StepReport> {
    let fwd = forward_train(model, store, samples)?;
    fwd.losses.check(state.step)?;
    let grads = fwd.graph.backward(fwd.total);
    let norm = grads
        .params()
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            component: "gradient",
            step: state.step,
        });
    }
    let scale = if opts.clip > 0.0 && norm > opts.clip {
        opts.clip / norm
    } else {
        1.0
    };
    let lr = opts.lr_at(state.step);
    let (m, lr32, s32) = (opts.momentum as f32, lr as f32, scale as f32);
    if state.velocity.len() != store.len() {
        state.velocity.resize(store.len(), Vec::new());
    }
    let mut updated = Vec::with_capacity(grads.params().len());
    for (id, g) in grads.params() {
        let v = &mut state.velocity[id.0];
        if v.is_empty() {
            v.resize(g.len(), 0.0);
        }
        let p = store.value_mut(*id).data_mut();
        for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *v = m * *v + s32 * g;
            *p -= lr32 * *v;
        }
        updated.push(*id);
    }
    state.step += 1;
    let a = &mut state.average;
    let l = &fwd.losses;
    if state.step == 1 {
        *a = *l;
    } else {
        let mix = |avg: &mut f64, x: f64| *avg = AVERAGE_DECAY * *avg + (1.0 - AVERAGE_DECAY) * x;
        mix(&mut a.det, l.det);
        mix(&mut a.align, l.align);
        mix(&mut a.aux, l.aux);
        mix(&mut a.total, l.total);
    }
    Ok(StepReport {
        losses: fwd.losses,
        lr,
        grad_norm: norm,
        updated,
    })
}

/// Runs steps until `state.step == opts.total_steps`, drawing batches from
/// `samples`; `on_step` sees every report.
pub fn train_loop(
    model: &Model,
    store: &mut ParamStore<f32>,
    state: &mut TrainState,
    samples: &[Sample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(u64, &StepReport, &ParamStore<f32>, &TrainState) -> Result<()>,
) -> Result<()> {
    while state.step < opts.total_steps {
        let idx = state.next_batch(samples.len(), opts.batch)?;
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let step = state.step;
        let report = train_step(model, store, state, &batch, opts)?;
        on_step(step, &report, store, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    fn small_run() -> RunConfig {
        let mut c = RunConfig::default();
        c.set("fusion.channels", "16").unwrap();
        c
    }

    fn samples(cfg: &ModelConfig, seeds: &[u64]) -> Vec<Sample> {
        seeds
            .iter()
            .map(|&s| {
                let scene = generate_scene(&SceneConfig {
                    seed: s,
                    ..SceneConfig::default()
                })
                .unwrap();
                Sample::new(&scene, cfg).unwrap()
            })
            .collect()
    }

    fn model(run: &RunConfig) -> (Model, ParamStore<f32>) {
        Model::new(&ModelConfig::from_run(run).unwrap()).unwrap()
    }

    #[test]
    fn weighted_total_recomputes() {
        let run = small_run();
        let (m, store) = model(&run);
        let s = samples(&m.config, &[3, 4]);
        let f = forward_train(&m, &store, &[&s[0], &s[1]]).unwrap();
        let l = f.losses;
        assert!(l.align > 0.0 && l.aux > 0.0 && l.det > 0.0);
        let w = m.config.weights;
        assert!((l.total - (l.det + w.align * l.align + w.aux * l.aux)).abs() < 1e-7 * l.total.max(1.0));

        let mut zero = m.clone();
        zero.config.weights = LossWeights { align: 0.0, aux: 0.0 };
        let z = forward_train(&zero, &store, &[&s[0], &s[1]]).unwrap().losses;
        assert_eq!(z.total, z.det);
    }

    #[test]
    fn single_sample_align_is_zero() {
        let (m, store) = model(&small_run());
        let s = samples(&m.config, &[5]);
        assert_eq!(forward_train(&m, &store, &[&s[0]]).unwrap().losses.align, 0.0);
    }

    #[test]
    fn inference_ignores_training_modules() {
        let mut run = small_run();
        let (full, store) = model(&run);
        let s = samples(&full.config, &[7]);
        let (a, touched) = forward_infer_traced(&full, &store, &[&s[0]]).unwrap();
        assert!(touched.iter().all(|&id| store.leaf(id).inference));

        run.set("align.enabled", "false").unwrap();
        run.set("auxbranch.enabled", "false").unwrap();
        let (bare, bare_store) = model(&run);
        let (b, _) = forward_infer_traced(&bare, &bare_store, &[&s[0]]).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            count_params(&store, CountMode::Inference),
            count_params(&bare_store, CountMode::Inference)
        );
        assert!(count_params(&store, CountMode::Training) > count_params(&bare_store, CountMode::Training));

        // Perturbing training-only leaves changes nothing at inference.
        let mut noisy = store.clone();
        for id in store.ids().filter(|&id| !store.leaf(id).inference).collect::<Vec<_>>() {
            noisy.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        assert_eq!(forward_infer_traced(&full, &noisy, &[&s[0]]).unwrap().0, a);
        assert_eq!(forward_infer(&full, &store, &s[0]).unwrap(), a[0]);
    }

    #[test]
    fn freeze_modes() {
        let (m, mut store) = model(&small_run());
        apply_freeze_mask(&mut store, FreezeMode::Delta);
        apply_freeze_mask(&mut store, FreezeMode::Delta);
        for l in store.leaves() {
            assert_eq!(l.trainable, l.group != Group::CameraEncoder, "{}", l.name);
        }
        let s = samples(&m.config, &[1, 2]);
        let before = store.clone();
        let mut state = TrainState::new(0, store.len());
        let opts = TrainOptions::from_run(&small_run()).unwrap();
        let r = train_step(&m, &mut store, &mut state, &[&s[0], &s[1]], &opts).unwrap();
        for (id, l) in store.leaves().iter().enumerate() {
            if l.group == Group::CameraEncoder {
                assert!(!r.updated.contains(&ParamId(id)));
                assert_eq!(l.value, before.leaves()[id].value);
            }
        }
        apply_freeze_mask(&mut store, FreezeMode::Full);
        assert!(store.leaves().iter().all(|l| l.trainable));

        let mut frozen = before.clone();
        for id in frozen.ids().collect::<Vec<_>>() {
            frozen.set_trainable(id, false);
        }
        let snapshot = frozen.clone();
        train_step(
            &m,
            &mut frozen,
            &mut TrainState::new(0, snapshot.len()),
            &[&s[0], &s[1]],
            &opts,
        )
        .unwrap();
        assert_eq!(frozen, snapshot);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut st = TrainState::new(3, 0);
        let mut seen: Vec<usize> = (0..4).flat_map(|_| st.next_batch(8, 2).unwrap()).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert!(st.next_batch(2, 3).is_err());
    }

    #[test]
    fn fixed_batch_loss_trends_down() {
        let run = RunConfig::default();
        let (m, mut store) = model(&run);
        let s = samples(&m.config, &[11, 12]);
        let opts = TrainOptions {
            total_steps: 50,
            ..TrainOptions::from_run(&run).unwrap()
        };
        let mut state = TrainState::new(0, store.len());
        let totals: Vec<f64> = (0..50)
            .map(|_| {
                train_step(&m, &mut store, &mut state, &[&s[0], &s[1]], &opts)
                    .unwrap()
                    .losses
                    .total
            })
            .collect();
        let ma: Vec<f64> = totals.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in ma.windows(2) {
            assert!(w[1] <= w[0], "moving average rose: {ma:?}");
        }
        assert!(ma[ma.len() - 1] < 0.8 * ma[0]);
    }

    #[test]
    fn blank_input_is_finite_and_repeatable() {
        let (m, store) = model(&RunConfig::default());
        let mut s = samples(&m.config, &[2]).remove(0);
        s.images = Tensor::zeros(s.images.shape());
        s.depth = Tensor::zeros(s.depth.shape());
        s.pillars = pillarize(&crate::geom::PointCloud::default(), &m.config.pillar);
        let a = forward_infer(&m, &store, &s).unwrap();
        assert!(a
            .iter()
            .all(|b| b.center.iter().chain(&b.size).all(|v| v.is_finite()) && b.score.is_finite()));
        assert_eq!(forward_infer(&m, &store, &s).unwrap(), a);
        // Zero-norm alignment vectors are reported, not turned into NaN.
        assert!(matches!(
            forward_train(&m, &store, &[&s, &s]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn overhead_matches_shape_arithmetic() {
        let (_, store) = model(&RunConfig::default());
        // Adapter on C channels with bottleneck h = C / r: norm affine,
        // two mixing scalars, down 1x1, depthwise 3/5/7, pointwise 1x1, up 1x1.
        let adapter = |c: usize, r: usize| {
            let h = c / r;
            2 * c + 2 + (c * h + h) + (9 + 25 + 49 + 3) * h + (h * h + h) + (h * c + c)
        };
        // Coordinate attention: shared 1x1 to C / r, its norm, two 1x1 back to C.
        let coordatt = |c: usize, r: usize| {
            let h = c / r;
            (c * h + h) + 2 * h + 2 * (h * c + c)
        };
        let plugin = 2 * adapter(16, 4) + coordatt(32, 8);
        assert_eq!(
            plugin,
            store.group_size(Group::Adapter) + store.group_size(Group::CoordAtt)
        );
        let base = count_params(&store, CountMode::Inference) - plugin;
        assert_eq!(plugin_overhead(&store), plugin as f64 / base as f64);
        assert!(count_params(&store, CountMode::Training) >= count_params(&store, CountMode::Inference));
    }

    #[test]
    fn cosine_schedule() {
        let o = TrainOptions {
            lr: 0.1,
            momentum: 0.9,
            clip: 0.0,
            total_steps: 100,
            batch: 1,
        };
        assert_eq!(o.lr_at(0), 0.1);
        assert!((o.lr_at(50) - 0.05).abs() < 1e-12);
        assert!(o.lr_at(100).abs() < 1e-12);
    }
}
