//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: synthesize a scene and draw it, score deliberately
//! perturbed detections against a scene's ground truth, and count
//! parameters under plugin toggles. Each exported function has a plain Rust
//! counterpart so the logic is testable without a browser.

use fusion4ca_core::config::RunConfig;
use fusion4ca_core::eval::{evaluate, Frame};
use fusion4ca_core::geom::Box3D;
use fusion4ca_core::params::module_rng;
use fusion4ca_core::pipeline::{count_params, plugin_overhead, scene_config, CountMode, Model, ModelConfig};
use fusion4ca_core::synth::{generate_scene, RgbImage, Scene, CLASS_NAMES};
use fusion4ca_core::viz::bev_overlay;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

/// BEV overlay scale in the demo.
const PX_PER_M: f64 = 24.0;

/// An RGBA raster ready for `ImageData`.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Raster {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Raster {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl From<&RgbImage> for Raster {
    fn from(img: &RgbImage) -> Self {
        let rgba = img.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Self {
            width: img.width,
            height: img.height,
            rgba,
        }
    }
}

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct SceneView {
    camera: Raster,
    bev: Raster,
    points: usize,
    meteors: usize,
    platforms: usize,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn camera(&self) -> Raster {
        self.camera.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn bev(&self) -> Raster {
        self.bev.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn points(&self) -> usize {
        self.points
    }

    #[wasm_bindgen(getter)]
    pub fn meteors(&self) -> usize {
        self.meteors
    }

    #[wasm_bindgen(getter)]
    pub fn platforms(&self) -> usize {
        self.platforms
    }
}

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct ScoreView {
    bev: Raster,
    map: f64,
    nds_lite: f64,
    mate: f64,
    mase: f64,
    maoe: f64,
    predictions: usize,
}

#[wasm_bindgen]
impl ScoreView {
    #[wasm_bindgen(getter)]
    pub fn bev(&self) -> Raster {
        self.bev.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn map(&self) -> f64 {
        self.map
    }

    #[wasm_bindgen(getter)]
    pub fn nds_lite(&self) -> f64 {
        self.nds_lite
    }

    #[wasm_bindgen(getter)]
    pub fn mate(&self) -> f64 {
        self.mate
    }

    #[wasm_bindgen(getter)]
    pub fn mase(&self) -> f64 {
        self.mase
    }

    #[wasm_bindgen(getter)]
    pub fn maoe(&self) -> f64 {
        self.maoe
    }

    #[wasm_bindgen(getter)]
    pub fn predictions(&self) -> usize {
        self.predictions
    }
}

#[wasm_bindgen]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub inference: usize,
    pub training: usize,
    /// Adapter + coordinate-attention parameters over the rest of the
    /// inference model.
    pub overhead: f64,
}

fn scene_for(seed: u64, meteors: usize, dim: bool) -> Result<(Scene, ModelConfig), String> {
    let mut cfg = RunConfig::default();
    cfg.set("data.n_meteors", &meteors.to_string())
        .map_err(|e| e.to_string())?;
    cfg.set("data.lighting", if dim { "dim" } else { "bright" })
        .map_err(|e| e.to_string())?;
    let sc = scene_config(&cfg, seed).map_err(|e| e.to_string())?;
    let scene = generate_scene(&sc).map_err(|e| e.to_string())?;
    let mc = ModelConfig::from_run(&cfg).map_err(|e| e.to_string())?;
    Ok((scene, mc))
}

pub fn scene_view_native(seed: u64, meteors: usize, dim: bool) -> Result<SceneView, String> {
    let (scene, mc) = scene_for(seed, meteors, dim)?;
    let count = |c: usize| scene.boxes.iter().filter(|b| b.class_id == c).count();
    Ok(SceneView {
        camera: Raster::from(&scene.cameras[0].rgb),
        bev: Raster::from(&bev_overlay(&mc.grid, &scene.cloud, &scene.boxes, &[], PX_PER_M)),
        points: scene.cloud.len(),
        meteors: count(0),
        platforms: count(1),
    })
}

/// Turns the scene's ground truth into detections with Gaussian center and
/// yaw noise, random drops, and uniformly placed false positives.
pub fn perturb(gts: &[Box3D], trans_std: f64, yaw_std: f64, drop: f64, false_pos: usize, seed: u64) -> Vec<Box3D> {
    let mut rng = module_rng(seed, "demo-perturb");
    let trans = Normal::new(0.0, trans_std.max(0.0)).expect("finite std");
    let yaw = Normal::new(0.0, yaw_std.max(0.0)).expect("finite std");
    let mut out = Vec::new();
    for g in gts {
        if rng.random::<f64>() < drop {
            continue;
        }
        let mut p = Box3D::new(
            [
                g.center[0] + trans.sample(&mut rng),
                g.center[1] + trans.sample(&mut rng),
                g.center[2],
            ],
            g.size,
            g.yaw + yaw.sample(&mut rng),
            g.class_id,
        );
        p.score = 0.5 + 0.5 * rng.random::<f64>();
        out.push(p);
    }
    for _ in 0..false_pos {
        let mut p = Box3D::new(
            [rng.random_range(1.0..15.0), rng.random_range(-7.0..7.0), 0.5],
            [1.0, 1.0, 1.0],
            rng.random_range(-1.5..1.5),
            rng.random_range(0..CLASS_NAMES.len()),
        );
        p.score = rng.random::<f64>();
        out.push(p);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn score_native(
    seed: u64,
    meteors: usize,
    dim: bool,
    trans_std: f64,
    yaw_std: f64,
    drop: f64,
    false_pos: usize,
    noise_seed: u64,
) -> Result<ScoreView, String> {
    let (scene, mc) = scene_for(seed, meteors, dim)?;
    let preds = perturb(&scene.boxes, trans_std, yaw_std, drop, false_pos, noise_seed);
    let r = evaluate(
        &[Frame {
            preds: preds.clone(),
            gts: scene.boxes.clone(),
        }],
        &CLASS_NAMES,
    );
    Ok(ScoreView {
        bev: Raster::from(&bev_overlay(&mc.grid, &scene.cloud, &scene.boxes, &preds, PX_PER_M)),
        map: r.map,
        nds_lite: r.nds_lite,
        mate: r.mate,
        mase: r.mase,
        maoe: r.maoe,
        predictions: preds.len(),
    })
}

pub fn budget_native(align: bool, auxbranch: bool, adapter: bool, coordatt: bool) -> Result<Budget, String> {
    let mut cfg = RunConfig::default();
    for (k, on) in [
        ("align.enabled", align),
        ("auxbranch.enabled", auxbranch),
        ("adapter.enabled", adapter),
        ("coordatt.enabled", coordatt),
    ] {
        cfg.set(k, if on { "true" } else { "false" })
            .map_err(|e| e.to_string())?;
    }
    let mc = ModelConfig::from_run(&cfg).map_err(|e| e.to_string())?;
    let (_, store) = Model::new::<f32>(&mc).map_err(|e| e.to_string())?;
    Ok(Budget {
        inference: count_params(&store, CountMode::Inference),
        training: count_params(&store, CountMode::Training),
        overhead: plugin_overhead(&store),
    })
}

#[wasm_bindgen]
pub fn scene_view(seed: u64, meteors: usize, dim: bool) -> Result<SceneView, JsError> {
    scene_view_native(seed, meteors, dim).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn score(
    seed: u64,
    meteors: usize,
    dim: bool,
    trans_std: f64,
    yaw_std: f64,
    drop: f64,
    false_pos: usize,
    noise_seed: u64,
) -> Result<ScoreView, JsError> {
    score_native(seed, meteors, dim, trans_std, yaw_std, drop, false_pos, noise_seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn budget(align: bool, auxbranch: bool, adapter: bool, coordatt: bool) -> Result<Budget, JsError> {
    budget_native(align, auxbranch, adapter, coordatt).map_err(|e| JsError::new(&e))
}
