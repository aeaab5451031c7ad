//! Contrastive alignment of image features against projected LiDAR depth.
//!
//! The sparse depth map is lifted to the image-feature width by three 3x3
//! convolutions (`1 -> C/4 -> C/2 -> C`); both maps are flattened per
//! (sample, camera) unit and scored with an InfoNCE loss whose positives are
//! the matching units. Training only: inference never evaluates this module.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, ConvSpec};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthAlign {
    pub channels: usize,
    pub convs: [Conv; 3],
}

impl DepthAlign {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, channels: usize) -> Result<Self> {
        if channels < 4 || !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "alignment needs image channels divisible by 4, got {channels}"
            )));
        }
        let widths = [1, channels / 4, channels / 2, channels];
        let mk = |store: &mut ParamStore<T>, i: usize| {
            Conv::new(
                store,
                seed,
                &format!("align.conv{}", i + 1),
                Group::Align,
                ConvSpec::new(widths[i], widths[i + 1], 3),
            )
        };
        let c1 = mk(store, 0);
        let c2 = mk(store, 1);
        let c3 = mk(store, 2);
        Ok(Self {
            channels,
            convs: [c1, c2, c3],
        })
    }

    /// `depth: [U, 1, h, w]` to `[U, C, h, w]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, depth: Var) -> Result<Var> {
        let s = g.shape(depth);
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!(
                "alignment expects a 1-channel depth map, got {:?}",
                s
            )));
        }
        let a = self.convs[0].forward(g, store, depth)?;
        let a = g.relu(a);
        let b = self.convs[1].forward(g, store, a)?;
        let b = g.relu(b);
        self.convs[2].forward(g, store, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.ids()).collect()
    }
}

/// InfoNCE over flattened units. `rgb` and `dep` are `[U, ...]` with equal
/// shapes; rgb rows are anchors and depth rows candidates unless `symmetric`.
pub fn align_loss<T: Real>(g: &mut Graph<T>, rgb: Var, dep: Var, tau: f64, symmetric: bool) -> Result<Var> {
    if g.shape(rgb) != g.shape(dep) {
        return Err(Error::Shape(format!(
            "image features {:?} vs depth features {:?}",
            g.shape(rgb),
            g.shape(dep)
        )));
    }
    let u = g.shape(rgb)[0];
    let l = g.value(rgb).len() / u.max(1);
    let r = g.reshape(rgb, &[u, l])?;
    let d = g.reshape(dep, &[u, l])?;
    g.info_nce(r, d, T::of(tau), symmetric)
}
