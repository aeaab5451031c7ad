//! Camera auxiliary branch: three residual blocks (strides 2, 1, 1) over
//! the camera-BEV map, a top-down merge back to the head stride, and its own
//! detection head. Training only.

use crate::detect::{DetectionHead, HeadOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ChannelNorm, Conv, ConvSpec};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Real;

pub const BLOCK_STRIDES: [usize; 3] = [2, 1, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: ChannelNorm,
    pub conv2: Conv,
    pub norm2: ChannelNorm,
    pub skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, c: usize, stride: usize) -> Self {
        let g = Group::AuxBranch;
        Self {
            conv1: Conv::new(
                store,
                seed,
                &format!("{name}.conv1"),
                g,
                ConvSpec::new(c, c, 3).stride(stride),
            ),
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), g, c),
            conv2: Conv::new(store, seed, &format!("{name}.conv2"), g, ConvSpec::new(c, c, 3)),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), g, c),
            skip: (stride != 1).then(|| {
                Conv::new(
                    store,
                    seed,
                    &format!("{name}.skip"),
                    g,
                    ConvSpec::new(c, c, 1).stride(stride),
                )
            }),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.norm1.forward(g, store, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y)?;
        let y = self.norm2.forward(g, store, y)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        let sum = g.add(y, s)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxBranch {
    pub channels: usize,
    pub blocks: Vec<ResBlock>,
    pub laterals: Vec<Conv>,
    pub head: DetectionHead,
}

impl AuxBranch {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, channels: usize, classes: usize) -> Self {
        let blocks = BLOCK_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &s)| ResBlock::new(store, seed, &format!("aux.block{}", i + 1), channels, s))
            .collect();
        let laterals = (0..BLOCK_STRIDES.len())
            .map(|i| {
                Conv::new(
                    store,
                    seed,
                    &format!("aux.lateral{}", i + 1),
                    Group::AuxBranch,
                    ConvSpec::new(channels, channels, 1),
                )
            })
            .collect();
        let head = DetectionHead::new(store, seed, "aux.head", Group::AuxBranch, channels, classes);
        Self {
            channels,
            blocks,
            laterals,
            head,
        }
    }

    /// `camera_bev: [B, C, H, W]` with even `H`, `W`; outputs at `H x W`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, camera_bev: Var) -> Result<HeadOutput> {
        let s = g.shape(camera_bev);
        if s.len() != 4 || s[1] != self.channels || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "aux branch expects [B, {}, even H, even W], got {:?}",
                self.channels, s
            )));
        }
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut x = camera_bev;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
            feats.push(x);
        }
        // Top-down: deepest first, each lateral added into the running map.
        let mut merged: Option<Var> = None;
        for (f, lat) in feats.iter().zip(&self.laterals).rev() {
            let l = lat.forward(g, store, *f)?;
            merged = Some(match merged {
                None => l,
                Some(m) if g.shape(m) == g.shape(l) => g.add(m, l)?,
                Some(m) => {
                    let up = g.upsample2x(m)?;
                    g.add(up, l)?
                }
            });
        }
        let top = g.upsample2x(merged.expect("three blocks"))?;
        self.head.forward(g, store, top)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.conv1.ids());
            v.extend([b.norm1.affine.gamma, b.norm1.affine.beta]);
            v.extend(b.conv2.ids());
            v.extend([b.norm2.affine.gamma, b.norm2.affine.beta]);
            if let Some(s) = &b.skip {
                v.extend(s.ids());
            }
        }
        for l in &self.laterals {
            v.extend(l.ids());
        }
        v.extend(self.head.ids());
        v
    }
}
