//! Parameter tree: every learnable leaf with its trainability and
//! inference-visibility flags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Submodule a leaf belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    CameraEncoder,
    Adapter,
    DepthHead,
    Pillar,
    Align,
    Fusion,
    CoordAtt,
    Head,
    AuxBranch,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::CameraEncoder,
        Group::Adapter,
        Group::DepthHead,
        Group::Pillar,
        Group::Align,
        Group::Fusion,
        Group::CoordAtt,
        Group::Head,
        Group::AuxBranch,
    ];

    /// Training-only submodules are never evaluated at inference.
    pub fn inference(self) -> bool {
        !matches!(self, Group::Align | Group::AuxBranch)
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::CameraEncoder => "camera_encoder",
            Group::Adapter => "adapter",
            Group::DepthHead => "depth_head",
            Group::Pillar => "pillar",
            Group::Align => "align",
            Group::Fusion => "fusion",
            Group::CoordAtt => "coordatt",
            Group::Head => "head",
            Group::AuxBranch => "auxbranch",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub inference: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    leaves: Vec<Leaf<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { leaves: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.leaves.iter().all(|l| l.name != name), "duplicate leaf {name}");
        self.leaves.push(Leaf {
            name,
            group,
            value,
            trainable: true,
            inference: group.inference(),
        });
        ParamId(self.leaves.len() - 1)
    }

    pub fn leaf(&self, id: ParamId) -> &Leaf<T> {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut Leaf<T> {
        &mut self.leaves[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.leaves[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.leaves[id.0].value
    }

    pub fn leaves(&self) -> &[Leaf<T>] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.leaves.iter().position(|l| l.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.leaves[id.0].trainable = trainable;
    }

    /// Number of scalars in leaves of the given group.
    pub fn group_size(&self, group: Group) -> usize {
        self.leaves
            .iter()
            .filter(|l| l.group == group)
            .map(|l| l.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            leaves: self
                .leaves
                .iter()
                .map(|l| Leaf {
                    name: l.name.clone(),
                    group: l.group,
                    value: l.value.cast(),
                    trainable: l.trainable,
                    inference: l.inference,
                })
                .collect(),
        }
    }
}

/// Deterministic per-module RNG: the same module name and seed always draw
/// the same weights, whatever else the model contains.
pub fn module_rng(seed: u64, module: &str) -> ChaCha8Rng {
    // FNV-1a over the module path.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in module.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Zero-mean Gaussian tensor drawn in 64-bit and rounded into `T`, so the
/// 32- and 64-bit builds of a model share the same initial weights.
pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
