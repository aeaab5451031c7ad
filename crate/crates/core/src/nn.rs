//! Small parameterized layers shared by the model components.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{module_rng, normal_tensor, Group, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming normal, `std = sqrt(2 / fan_in)`.
    He,
    /// Normal with a fixed standard deviation.
    Std(f64),
    Zero,
}

fn init_tensor<T: Real>(shape: &[usize], fan_in: usize, init: Init, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = module_rng(seed, name);
    match init {
        Init::He => normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
        Init::Std(s) => normal_tensor(shape, s, &mut rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

/// Square-kernel convolution with "same" padding for stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride: 1,
            groups: 1,
            bias: true,
            init: Init::He,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

impl Conv {
    /// Registers `<name>.weight` (and `<name>.bias`) in `store`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, group: Group, spec: ConvSpec) -> Self {
        let cin_g = spec.cin / spec.groups;
        let wname = format!("{name}.weight");
        let w = init_tensor(
            &[spec.cout, cin_g, spec.k, spec.k],
            cin_g * spec.k * spec.k,
            spec.init,
            seed,
            &wname,
        );
        let w = store.add(wname, group, w);
        let b = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[spec.cout])));
        Self {
            w,
            b,
            stride: spec.stride,
            pad: spec.k / 2,
            groups: spec.groups,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Per-channel affine transform `gamma * x + beta` over `[B, C, H, W]`,
/// initialized to identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelAffine {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: Group, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[1, c, 1, 1], T::one())),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[1, c, 1, 1])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        let y = g.mul(x, gm)?;
        g.add(y, bt)
    }
}

/// Layer norm over channels followed by a learned per-channel affine.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub affine: ChannelAffine,
}

pub const LN_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: Group, c: usize) -> Self {
        Self {
            affine: ChannelAffine::new(store, name, group, c),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        self.affine.forward(g, store, n)
    }
}
