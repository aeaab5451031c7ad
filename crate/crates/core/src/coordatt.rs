//! Coordinate attention over fused BEV features: directional average
//! pooling, a shared 1x1 bottleneck, and per-direction sigmoid gates that
//! re-weight the input, `y = x * a_h * a_w`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ChannelNorm, Conv, ConvSpec};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordAtt {
    pub channels: usize,
    pub hidden: usize,
    pub shared: Conv,
    pub norm: ChannelNorm,
    pub conv_h: Conv,
    pub conv_w: Conv,
}

impl CoordAtt {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "coordinate attention: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let g = Group::CoordAtt;
        Ok(Self {
            channels,
            hidden,
            shared: Conv::new(store, seed, "coordatt.shared", g, ConvSpec::new(channels, hidden, 1)),
            norm: ChannelNorm::new(store, "coordatt.norm", g, hidden),
            conv_h: Conv::new(store, seed, "coordatt.conv_h", g, ConvSpec::new(hidden, channels, 1)),
            conv_w: Conv::new(store, seed, "coordatt.conv_w", g, ConvSpec::new(hidden, channels, 1)),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "coordinate attention expects [B, {}, H, W], got {:?}",
                self.channels, s
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        // [B, C, H, 1] and [B, C, 1, W] laid out as [B, C, W, 1] share one conv.
        let pool_h = g.mean_axis(x, 3)?;
        let pool_w = g.mean_axis(x, 2)?;
        let pool_w = g.reshape(pool_w, &[b, c, w, 1])?;
        let both = g.concat(&[pool_h, pool_w], 2)?;
        let z = self.shared.forward(g, store, both)?;
        let z = self.norm.forward(g, store, z)?;
        let z = g.gelu(z);
        let zh = g.slice(z, 2, 0, h)?;
        let zw = g.slice(z, 2, h, w)?;
        let zw = g.reshape(zw, &[b, self.hidden, 1, w])?;
        let ah = self.conv_h.forward(g, store, zh)?;
        let ah = g.sigmoid(ah);
        let aw = self.conv_w.forward(g, store, zw)?;
        let aw = g.sigmoid(aw);
        let y = g.mul(x, ah)?;
        g.mul(y, aw)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.shared.ids();
        v.extend([self.norm.affine.gamma, self.norm.affine.beta]);
        v.extend(self.conv_h.ids());
        v.extend(self.conv_w.ids());
        v
    }
}
