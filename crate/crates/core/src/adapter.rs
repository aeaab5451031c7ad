//! Cognitive adapter: a bottleneck inserted into the camera encoder,
//!
//! ```text
//! x_norm = s1 * LN(x) + s2 * x
//! y      = x + U(gelu(f_pw(f_dw(D(x_norm)))))
//! f_dw(z) = sum_k (z + dwconv_k(z)),  k in {3, 5, 7}
//! ```
//!
//! `U` starts at zero, so a freshly inserted adapter is an exact identity.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ChannelNorm, Conv, ConvSpec, Init};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DW_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub channels: usize,
    pub hidden: usize,
    pub ln: ChannelNorm,
    pub s1: ParamId,
    pub s2: ParamId,
    pub down: Conv,
    pub dw: Vec<Conv>,
    pub pw: Conv,
    pub up: Conv,
}

impl Adapter {
    /// Builds an adapter for `channels` inputs with bottleneck ratio `r`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, channels: usize, r: usize) -> Result<Self> {
        if r < 2 || !channels.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "adapter {name}: channels {channels} not divisible by ratio {r} (r must be >= 2)"
            )));
        }
        let hidden = channels / r;
        let g = Group::Adapter;
        let ln = ChannelNorm::new(store, &format!("{name}.ln"), g, channels);
        let s1 = store.add(format!("{name}.s1"), g, Tensor::full(&[1, 1, 1, 1], T::one()));
        let s2 = store.add(format!("{name}.s2"), g, Tensor::zeros(&[1, 1, 1, 1]));
        let down = Conv::new(
            store,
            seed,
            &format!("{name}.down"),
            g,
            ConvSpec::new(channels, hidden, 1),
        );
        let dw = DW_KERNELS
            .iter()
            .map(|&k| {
                Conv::new(
                    store,
                    seed,
                    &format!("{name}.dw{k}"),
                    g,
                    ConvSpec::new(hidden, hidden, k).groups(hidden).init(Init::Std(0.1)),
                )
            })
            .collect();
        let pw = Conv::new(store, seed, &format!("{name}.pw"), g, ConvSpec::new(hidden, hidden, 1));
        let up = Conv::new(
            store,
            seed,
            &format!("{name}.up"),
            g,
            ConvSpec::new(hidden, channels, 1).init(Init::Zero),
        );
        Ok(Self {
            channels,
            hidden,
            ln,
            s1,
            s2,
            down,
            dw,
            pw,
            up,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "adapter expects {} channels, got {:?}",
                self.channels, shape
            )));
        }
        let s1 = g.param(store, self.s1);
        let s2 = g.param(store, self.s2);
        let ln = self.ln.forward(g, store, x)?;
        let a = g.mul(ln, s1)?;
        let b = g.mul(x, s2)?;
        let x_norm = g.add(a, b)?;
        let z = self.down.forward(g, store, x_norm)?;
        let mut acc: Option<Var> = None;
        for conv in &self.dw {
            let d = conv.forward(g, store, z)?;
            let branch = g.add(z, d)?;
            acc = Some(match acc {
                Some(s) => g.add(s, branch)?,
                None => branch,
            });
        }
        let p = self.pw.forward(g, store, acc.expect("kernel set is non-empty"))?;
        let act = g.gelu(p);
        let u = self.up.forward(g, store, act)?;
        g.add(x, u)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln.affine.gamma, self.ln.affine.beta, self.s1, self.s2];
        v.extend(self.down.ids());
        for c in &self.dw {
            v.extend(c.ids());
        }
        v.extend(self.pw.ids());
        v.extend(self.up.ids());
        v
    }

    /// Parameter count from shape arithmetic alone.
    pub fn param_count(channels: usize, r: usize) -> usize {
        let h = channels / r;
        let ln = 2 * channels;
        let scalars = 2;
        let down = channels * h + h;
        let dw: usize = DW_KERNELS.iter().map(|k| h * k * k + h).sum();
        let pw = h * h + h;
        let up = h * channels + channels;
        ln + scalars + down + dw + pw + up
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{module_rng, normal_tensor};

    #[test]
    fn fresh_adapter_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let a = Adapter::new(&mut store, 3, "a", 8, 4).unwrap();
        let mut rng = module_rng(1, "x");
        let x: Tensor<f32> = normal_tensor(&[2, 8, 5, 6], 3.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = a.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn shapes_and_count() {
        let mut store = ParamStore::<f32>::new();
        let a = Adapter::new(&mut store, 3, "a", 8, 4).unwrap();
        assert_eq!(store.value(a.down.w).shape(), &[2, 8, 1, 1]);
        assert_eq!(store.value(a.up.w).shape(), &[8, 2, 1, 1]);
        assert_eq!(store.group_size(Group::Adapter), Adapter::param_count(8, 4));
        assert!(Adapter::new(&mut ParamStore::<f32>::new(), 0, "b", 10, 4).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        Adapter::new(&mut s1, 9, "a", 16, 4).unwrap();
        Adapter::new(&mut s2, 9, "a", 16, 4).unwrap();
        assert_eq!(s1, s2);
    }
}
