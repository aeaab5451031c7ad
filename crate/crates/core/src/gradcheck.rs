//! Central finite-difference verification of the reverse-mode gradients of
//! every trainable module, in 64-bit.
//!
//! Each case builds a scalar from a module's output (losses directly,
//! feature maps through a random linear probe) and compares the analytic
//! gradient of every input and parameter element against
//! `(f(x + h) - f(x - h)) / 2h`. Parameters are drawn fresh and then
//! jittered, so zero-initialized leaves cannot hide downstream paths.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::Adapter;
use crate::align::{align_loss, DepthAlign};
use crate::coordatt::CoordAtt;
use crate::encoders::{parse_slots, CameraEncoder, DepthHead, EncoderConfig, PillarEncoder, POINT_FEATURES};
use crate::error::Result;
use crate::graph::{Graph, PillarPlan, SplatPlan, Var};
use crate::params::{module_rng, normal_tensor, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator.
pub const FLOOR: f64 = 1e-4;
/// Elements sampled per tensor; smaller tensors are checked exhaustively.
pub const MAX_ELEMENTS: usize = 48;

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn eval(case: &Case, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, store, &vars)?;
    Ok(g.value(out).data()[0])
}

fn sample_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= MAX_ELEMENTS {
        (0..n).collect()
    } else {
        (0..MAX_ELEMENTS).map(|_| rng.random_range(0..n)).collect()
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn check(case: &Case, seed: u64) -> Result<CaseReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = (case.build)(&mut g, &case.store, &vars)?;
    let grads = g.backward(out);
    let mut rng = module_rng(seed, case.name);
    let mut worst = 0.0f64;
    let mut checked = 0;

    for (i, v) in vars.iter().enumerate() {
        let n = case.inputs[i].len();
        let zero = Tensor::zeros(case.inputs[i].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zero);
        for j in sample_indices(n, &mut rng) {
            let mut xs = case.inputs.clone();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = eval(case, &case.store, &xs)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let down = eval(case, &case.store, &xs)?;
            worst = worst.max(rel(analytic.data()[j], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    let mut store = case.store.clone();
    for id in case.store.ids() {
        let n = store.value(id).len();
        let zero = Tensor::zeros(store.value(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for j in sample_indices(n, &mut rng) {
            let p0 = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = p0 + STEP;
            let up = eval(case, &store, &case.inputs)?;
            store.value_mut(id).data_mut()[j] = p0 - STEP;
            let down = eval(case, &store, &case.inputs)?;
            store.value_mut(id).data_mut()[j] = p0;
            worst = worst.max(rel(analytic.data()[j], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok(CaseReport {
        name: case.name,
        max_rel_error: worst,
        checked,
    })
}

fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.leaf(id).name.clone();
        let noise: Tensor<f64> = normal_tensor(
            store.value(id).shape(),
            0.2,
            &mut module_rng(seed, &format!("jitter.{name}")),
        );
        store.value_mut(id).add_assign(&noise);
    }
}

/// `sum(out * c)` for a fixed random `c`.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let c = normal_tensor(g.shape(out), 1.0, &mut module_rng(seed, "probe"));
    g.dot_const(out, Arc::new(c))
}

fn randn(shape: &[usize], seed: u64, tag: &str) -> Tensor<f64> {
    normal_tensor(shape, 1.0, &mut module_rng(seed, tag))
}

/// Heatmap target with exact peaks, Gaussian-like shoulders, and zeros.
fn heat_target(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = module_rng(seed, "heat_target");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let u: f64 = rng.random();
        *v = if u < 0.08 {
            1.0
        } else if u < 0.5 {
            rng.random_range(0.05..0.95)
        } else {
            0.0
        };
    }
    t
}

pub fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let align = DepthAlign::new(&mut store, seed, 8)?;
    jitter(&mut store, seed);
    let mut depth = randn(&[2, 1, 5, 6], seed, "depth");
    depth.data_mut().iter_mut().for_each(|v| *v = v.abs());
    out.push(Case {
        name: "align_conv",
        store,
        inputs: vec![depth],
        build: Box::new(move |g, s, x| {
            let y = align.encode(g, s, x[0])?;
            probe(g, y, seed)
        }),
    });

    out.push(Case {
        name: "align_loss",
        store: ParamStore::new(),
        inputs: vec![randn(&[3, 7], seed, "rgb"), randn(&[3, 7], seed, "dep")],
        build: Box::new(|g, _, x| {
            let a = align_loss(g, x[0], x[1], 0.5, false)?;
            let b = align_loss(g, x[0], x[1], 0.3, true)?;
            g.add(a, b)
        }),
    });

    let mut store = ParamStore::new();
    let adapter = Adapter::new(&mut store, seed, "adapter.gc", 8, 4)?;
    jitter(&mut store, seed);
    out.push(Case {
        name: "adapter",
        store,
        inputs: vec![randn(&[2, 8, 5, 6], seed, "x")],
        build: Box::new(move |g, s, x| {
            let y = adapter.forward(g, s, x[0])?;
            probe(g, y, seed)
        }),
    });

    let mut store = ParamStore::new();
    let ca = CoordAtt::new(&mut store, seed, 8, 2)?;
    jitter(&mut store, seed);
    out.push(Case {
        name: "coordatt",
        store,
        inputs: vec![randn(&[2, 8, 5, 6], seed, "x")],
        build: Box::new(move |g, s, x| {
            let y = ca.forward(g, s, x[0])?;
            probe(g, y, seed)
        }),
    });

    let mut store = ParamStore::new();
    let dh = DepthHead::new(&mut store, seed, 8, 6);
    jitter(&mut store, seed);
    out.push(Case {
        name: "depth_head",
        store,
        inputs: vec![randn(&[2, 8, 4, 5], seed, "x")],
        build: Box::new(move |g, s, x| {
            let y = dh.forward(g, s, x[0])?;
            probe(g, y, seed)
        }),
    });

    let mut store = ParamStore::new();
    let pe = PillarEncoder::new(&mut store, seed, 6);
    jitter(&mut store, seed);
    // 12 points over 5 occupied pillars of a 2-sample 3x4 grid.
    let plan = PillarPlan {
        samples: 2,
        bev_h: 3,
        bev_w: 4,
        dest: vec![0, 0, 0, 5, 5, 7, 13, 13, 13, 13, 22, 7],
    };
    out.push(Case {
        name: "pillar_encoder",
        store,
        inputs: vec![randn(&[12, POINT_FEATURES], seed, "points")],
        build: Box::new(move |g, s, x| {
            let y = pe.forward(g, s, x[0], &plan)?;
            probe(g, y, seed)
        }),
    });

    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        in_channels: 3,
        channels: vec![4, 8],
        downsample: vec![true, false],
    };
    let enc = CameraEncoder::new(&mut store, seed, &cfg, &parse_slots("1B,2B")?, 4)?;
    jitter(&mut store, seed);
    out.push(Case {
        name: "camera_encoder",
        store,
        inputs: vec![randn(&[1, 3, 8, 8], seed, "image")],
        build: Box::new(move |g, s, x| {
            let y = enc.forward(g, s, x[0])?;
            probe(g, y, seed)
        }),
    });

    // Two units of one sample each over a 2-sample 3x3 grid.
    let splat = Arc::new(SplatPlan {
        units: 2,
        bins: 3,
        pixels: 4,
        samples: 2,
        bev_h: 3,
        bev_w: 3,
        dest: vec![
            0,
            1,
            1,
            2,
            4,
            4,
            4,
            SplatPlan::NONE,
            8,
            7,
            6,
            5, //
            9,
            10,
            10,
            17,
            SplatPlan::NONE,
            12,
            12,
            12,
            13,
            14,
            15,
            16,
        ],
    });
    out.push(Case {
        name: "lift_splat",
        store: ParamStore::new(),
        inputs: vec![randn(&[2, 5, 2, 2], seed, "feat"), randn(&[2, 3, 2, 2], seed, "prob")],
        build: Box::new(move |g, _, x| {
            let y = g.lift_splat(x[0], x[1], splat.clone())?;
            probe(g, y, seed)
        }),
    });

    let target = heat_target(&[2, 2, 5, 6], seed);
    out.push(Case {
        name: "focal_loss",
        store: ParamStore::new(),
        inputs: vec![randn(&[2, 2, 5, 6], seed, "logits")],
        build: Box::new(move |g, _, x| g.focal_loss(x[0], &target)),
    });

    let reg_target = randn(&[2, 8, 5, 6], seed, "reg_target");
    let mut mask = Tensor::zeros(&[2, 1, 5, 6]);
    for i in [1, 7, 13, 31, 44, 59] {
        mask.data_mut()[i] = 1.0;
    }
    out.push(Case {
        name: "l1_regression",
        store: ParamStore::new(),
        inputs: vec![randn(&[2, 8, 5, 6], seed, "reg")],
        build: Box::new(move |g, _, x| g.l1_masked(x[0], &reg_target, &mask)),
    });

    Ok(out)
}

/// Runs every case.
pub fn run(seed: u64) -> Result<Vec<CaseReport>> {
    cases(seed)?.iter().map(|c| check(c, seed)).collect()
}
