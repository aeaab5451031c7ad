//! Center-heatmap detection: head, target assignment, losses and decoding.
//! The main pipeline and the camera auxiliary branch both go through the
//! functions here.
//!
//! Regression channels at each positive cell:
//! `dx, dy` (sub-cell offset of the center from the cell corner, in cells),
//! `z` (m), `ln l, ln w, ln h`, `sin yaw, cos yaw`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geom::{BevGridSpec, Box3D};
use crate::graph::{sigmoid_scalar, Graph, Var};
use crate::nn::{Conv, ConvSpec, Init};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const REG_CHANNELS: usize = 8;
pub const MIN_OVERLAP: f64 = 0.3;
pub const MIN_RADIUS: usize = 2;
/// Initial heatmap logit bias, a 0.1 prior on every cell.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;
/// Log-size predictions are clamped to this magnitude before `exp`.
const MAX_LOG_SIZE: f64 = 5.0;

/// Graph handles to a head's outputs: heatmap logits `[B, K, H, W]` and
/// regression `[B, 8, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOutput {
    pub heatmap: Var,
    pub reg: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub shared: Conv,
    pub heatmap: Conv,
    pub reg: Conv,
}

impl DetectionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        group: Group,
        channels: usize,
        classes: usize,
    ) -> Self {
        let shared = Conv::new(
            store,
            seed,
            &format!("{prefix}.shared"),
            group,
            ConvSpec::new(channels, channels, 3),
        );
        let heatmap = Conv::new(
            store,
            seed,
            &format!("{prefix}.heatmap"),
            group,
            ConvSpec::new(channels, classes, 1).init(Init::Std(0.01)),
        );
        if let Some(b) = heatmap.b {
            *store.value_mut(b) = Tensor::full(&[classes], T::of(HEATMAP_PRIOR_BIAS));
        }
        let reg = Conv::new(
            store,
            seed,
            &format!("{prefix}.reg"),
            group,
            ConvSpec::new(channels, REG_CHANNELS, 1).init(Init::Std(0.01)),
        );
        Self { shared, heatmap, reg }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<HeadOutput> {
        let h = self.shared.forward(g, store, x)?;
        let h = g.relu(h);
        Ok(HeadOutput {
            heatmap: self.heatmap.forward(g, store, h)?,
            reg: self.reg.forward(g, store, h)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.shared.ids();
        v.extend(self.heatmap.ids());
        v.extend(self.reg.ids());
        v
    }
}

/// Training targets of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    /// `[K, H, W]` in `[0, 1]`.
    pub heatmap: Tensor<f32>,
    /// `[8, H, W]`, meaningful where `mask` is 1.
    pub reg: Tensor<f32>,
    /// `[1, H, W]` of 0/1.
    pub mask: Tensor<f32>,
    /// Boxes whose center fell outside the grid.
    pub skipped: usize,
}

/// Radius (in cells) at which a box shifted by that much still overlaps
/// its original footprint with IoU `min_overlap`; `l`, `w` in cells.
pub fn gaussian_radius(l: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let (a1, b1, c1) = (1.0, l + w, w * l * (1.0 - o) / (1.0 + o));
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let (a2, b2, c2) = (4.0, 2.0 * (l + w), (1.0 - o) * w * l);
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (4.0 * o, -2.0 * o * (l + w), (o - 1.0) * w * l);
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Integer splat radius for a box footprint.
pub fn box_radius(b: &Box3D, grid: &BevGridSpec) -> usize {
    let r = gaussian_radius(b.size[0] / grid.cell_size, b.size[1] / grid.cell_size, MIN_OVERLAP);
    (r.max(0.0) as usize).max(MIN_RADIUS)
}

/// Gaussian value at integer offset `(dr, dc)` from the center cell.
pub fn gaussian_value(radius: usize, dr: isize, dc: isize) -> f64 {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp()
}

/// Center-heatmap targets: a Gaussian per box around its center cell
/// (peak exactly 1), max-combined within each class.
pub fn build_targets(boxes: &[Box3D], grid: &BevGridSpec, classes: usize) -> Result<TargetMaps> {
    let (h, w) = (grid.height(), grid.width());
    let mut heat = vec![0.0f32; classes * h * w];
    let mut reg = vec![0.0f32; REG_CHANNELS * h * w];
    let mut mask = vec![0.0f32; h * w];
    let mut skipped = 0;
    for b in boxes {
        if b.class_id >= classes {
            return Err(Error::Config(format!("box class {} >= {classes} classes", b.class_id)));
        }
        let Some((row, col)) = grid.world_to_cell(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        let r = box_radius(b, grid);
        let plane = &mut heat[b.class_id * h * w..(b.class_id + 1) * h * w];
        let ri = r as isize;
        for dr in -ri..=ri {
            for dc in -ri..=ri {
                let (y, x) = (row as isize + dr, col as isize + dc);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let v = gaussian_value(r, dr, dc) as f32;
                let cell = &mut plane[y as usize * w + x as usize];
                *cell = cell.max(v);
            }
        }
        let cell = row * w + col;
        let fx = (b.center[0] - grid.x_range.0) / grid.cell_size - col as f64;
        let fy = (b.center[1] - grid.y_range.0) / grid.cell_size - row as f64;
        let vals = [
            fx,
            fy,
            b.center[2],
            b.size[0].ln(),
            b.size[1].ln(),
            b.size[2].ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (ch, v) in vals.into_iter().enumerate() {
            reg[ch * h * w + cell] = v as f32;
        }
        mask[cell] = 1.0;
    }
    Ok(TargetMaps {
        heatmap: Tensor::from_vec(&[classes, h, w], heat)?,
        reg: Tensor::from_vec(&[REG_CHANNELS, h, w], reg)?,
        mask: Tensor::from_vec(&[1, h, w], mask)?,
        skipped,
    })
}

/// Per-sample targets stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets<T> {
    pub heatmap: Tensor<T>,
    pub reg: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> BatchTargets<T> {
    pub fn stack(parts: &[&TargetMaps]) -> Result<Self> {
        let stack = |f: &dyn Fn(&TargetMaps) -> &Tensor<f32>| -> Result<Tensor<T>> {
            let first = f(parts.first().ok_or_else(|| Error::Shape("empty target batch".into()))?);
            let mut shape = vec![parts.len()];
            shape.extend_from_slice(first.shape());
            let data = parts
                .iter()
                .flat_map(|p| f(p).data().iter().map(|&v| T::of(v as f64)))
                .collect();
            Tensor::from_vec(&shape, data)
        };
        Ok(Self {
            heatmap: stack(&|t| &t.heatmap)?,
            reg: stack(&|t| &t.reg)?,
            mask: stack(&|t| &t.mask)?,
        })
    }
}

/// Loss terms of one head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetLoss {
    pub heatmap: Var,
    pub reg: Var,
    pub total: Var,
}

/// Focal heatmap loss plus `reg_weight` times the masked L1 regression loss.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    out: HeadOutput,
    targets: &BatchTargets<T>,
    reg_weight: f64,
) -> Result<DetLoss> {
    let heatmap = g.focal_loss(out.heatmap, &targets.heatmap)?;
    let reg = g.l1_masked(out.reg, &targets.reg, &targets.mask)?;
    let weighted = g.scale(reg, T::of(reg_weight));
    let total = g.add(heatmap, weighted)?;
    Ok(DetLoss { heatmap, reg, total })
}

/// Decodes one sample's maps (`heatmap: [K, H, W]` logits, `reg: [8, H, W]`)
/// into boxes: 3x3 local maxima of the sigmoid scores, the `k_max` best by
/// (score desc, row, col, class), then those scoring at least `score_thresh`.
pub fn decode<T: Real>(
    heatmap: &[T],
    reg: &[T],
    classes: usize,
    grid: &BevGridSpec,
    k_max: usize,
    score_thresh: f64,
) -> Vec<Box3D> {
    let (h, w) = (grid.height(), grid.width());
    let scores: Vec<f64> = heatmap.iter().map(|&v| sigmoid_scalar(v).f64()).collect();
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for k in 0..classes {
        let plane = &scores[k * h * w..(k + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let s = plane[r * w + c];
                let mut is_max = true;
                'nb: for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (y, x) = (r as isize + dr, c as isize + dc);
                        if (dr, dc) == (0, 0) || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        if plane[y as usize * w + x as usize] > s {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    peaks.push((s, r, c, k));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    peaks.truncate(k_max);
    peaks
        .into_iter()
        .filter(|p| p.0 >= score_thresh)
        .map(|(s, r, c, k)| {
            let at = |ch: usize| reg[ch * h * w + r * w + c].f64();
            let size = [3, 4, 5].map(|ch| at(ch).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp());
            let x = grid.x_range.0 + (c as f64 + at(0)) * grid.cell_size;
            let y = grid.y_range.0 + (r as f64 + at(1)) * grid.cell_size;
            let mut b = Box3D::new([x, y, at(2)], size, at(6).atan2(at(7)), k);
            b.score = s;
            b
        })
        .collect()
}

/// Decodes every sample of a batched head output.
pub fn decode_batch<T: Real>(
    heatmap: &Tensor<T>,
    reg: &Tensor<T>,
    grid: &BevGridSpec,
    k_max: usize,
    score_thresh: f64,
) -> Vec<Vec<Box3D>> {
    let (b, k, h, w) = heatmap.dims4();
    (0..b)
        .map(|i| {
            decode(
                &heatmap.data()[i * k * h * w..(i + 1) * k * h * w],
                &reg.data()[i * REG_CHANNELS * h * w..(i + 1) * REG_CHANNELS * h * w],
                k,
                grid,
                k_max,
                score_thresh,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BevGridSpec {
        BevGridSpec::new((0.0, 16.0), (-8.0, 8.0), 0.5, 16).unwrap()
    }

    fn focal(logits: &[f64], target: &[f64], shape: &[usize]) -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(shape, logits).unwrap());
        let l = g.focal_loss(x, &Tensor::from_f64(shape, target).unwrap()).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn empty_boxes_give_empty_targets() {
        let t = build_targets(&[], &grid(), 2).unwrap();
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
        assert!(t.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_box_peaks_at_one() {
        let gr = grid();
        let (x, y) = gr.cell_center(10, 7);
        let b = Box3D::new([x, y, 0.2], [1.0, 0.8, 0.5], 0.3, 1);
        let t = build_targets(&[b], &gr, 2).unwrap();
        let w = gr.width();
        assert_eq!(t.heatmap.data()[gr.cells() + 10 * w + 7], 1.0);
        assert_eq!(t.mask.data().iter().filter(|&&m| m == 1.0).count(), 1);
        let outside = Box3D::new([20.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
        assert_eq!(build_targets(&[outside], &gr, 2).unwrap().skipped, 1);
    }

    #[test]
    fn overlapping_gaussians_combine_by_max() {
        let gr = grid();
        let (x1, y1) = gr.cell_center(10, 10);
        let (x2, y2) = gr.cell_center(11, 12);
        let a = Box3D::new([x1, y1, 0.0], [2.0, 1.5, 1.0], 0.0, 0);
        let b = Box3D::new([x2 + 0.1, y2 - 0.1, 0.0], [3.0, 2.0, 1.0], 0.0, 0);
        let t = build_targets(&[a.clone(), b.clone()], &gr, 2).unwrap();
        let w = gr.width();
        for r in 0..gr.height() {
            for c in 0..w {
                let mut expect = 0.0f64;
                for (bx, (br, bc)) in [(&a, (10, 10)), (&b, (11, 12))] {
                    let rad = box_radius(bx, &gr) as isize;
                    let (dr, dc) = (r as isize - br, c as isize - bc);
                    if dr.abs() <= rad && dc.abs() <= rad {
                        expect = expect.max(gaussian_value(rad as usize, dr, dc));
                    }
                }
                assert_eq!(t.heatmap.data()[r * w + c], expect as f32);
            }
        }
    }

    #[test]
    fn focal_loss_examples() {
        assert!((focal(&[0.0], &[1.0], &[1, 1, 1, 1]) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((focal(&[0.0], &[1.0], &[1, 1, 1, 1]) - 0.1733).abs() < 1e-4);
        let target = [1.0, 0.0, 0.3, 0.0];
        let logits: Vec<f64> = target
            .iter()
            .map(|&t: &f64| {
                let p: f64 = if t == 1.0 { 1.0 - 1e-4 } else { 1e-4 };
                (p / (1.0 - p)).ln()
            })
            .collect();
        assert!(focal(&logits, &target, &[1, 1, 2, 2]) < 1e-3);
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let mut pred = Tensor::zeros(&[1, 8, 2, 2]);
        pred.data_mut()[3] = 1.0;
        let target = Tensor::zeros(&[1, 8, 2, 2]);
        let mut mask = Tensor::zeros(&[1, 1, 2, 2]);
        mask.data_mut()[3] = 1.0;
        let p = g.input(pred.clone());
        let l = g.l1_masked(p, &target, &mask).unwrap();
        assert_eq!(g.value(l).data()[0], 0.125);
        let l0 = g.l1_masked(p, &target, &Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert_eq!(g.value(l0).data()[0], 0.0);
        let same = g.l1_masked(p, &pred, &mask).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
    }

    #[test]
    fn low_scores_decode_to_nothing() {
        let gr = grid();
        let heat = vec![-10.0f32; 2 * gr.cells()];
        let reg = vec![0.0f32; REG_CHANNELS * gr.cells()];
        assert!(decode(&heat, &reg, 2, &gr, 50, 0.1).is_empty());
    }

    #[test]
    fn encode_decode_round_trip() {
        let gr = grid();
        let boxes = vec![
            Box3D::new([4.3, -2.1, 0.3], [1.1, 0.8, 0.6], 0.7, 0),
            Box3D::new([9.9, 3.6, 0.2], [2.0, 1.5, 0.4], -1.2, 1),
        ];
        let t = build_targets(&boxes, &gr, 2).unwrap();
        let logits: Vec<f64> = t
            .heatmap
            .data()
            .iter()
            .map(|&v| if v == 1.0 { 8.0 } else { -8.0 + v as f64 })
            .collect();
        let reg: Vec<f64> = t.reg.data().iter().map(|&v| v as f64).collect();
        let mut out = decode(&logits, &reg, 2, &gr, 10, 0.5);
        out.sort_by_key(|b| b.class_id);
        assert_eq!(out.len(), 2);
        for (a, b) in out.iter().zip(&boxes) {
            assert_eq!(a.class_id, b.class_id);
            for k in 0..3 {
                assert!((a.center[k] - b.center[k]).abs() < 1e-4);
                assert!((a.size[k] - b.size[k]).abs() < 1e-4);
            }
            assert!((a.yaw - b.yaw).abs() < 1e-4);
        }
    }

    #[test]
    fn equal_peaks_follow_tie_break() {
        let gr = grid();
        let w = gr.width();
        let mut heat = vec![-10.0f64; 2 * gr.cells()];
        for &(k, r, c) in &[(1usize, 5usize, 5usize), (0, 5, 9), (0, 2, 20), (1, 2, 20)] {
            heat[k * gr.cells() + r * w + c] = 3.0;
        }
        let reg = vec![0.0f64; REG_CHANNELS * gr.cells()];
        let out = decode(&heat, &reg, 2, &gr, 10, 0.1);
        let cells: Vec<(usize, f64, f64)> = out.iter().map(|b| (b.class_id, b.center[0], b.center[1])).collect();
        assert_eq!(
            cells,
            vec![(0, 10.0, -7.0), (1, 10.0, -7.0), (1, 2.5, -5.5), (0, 4.5, -5.5)]
        );
    }
}
