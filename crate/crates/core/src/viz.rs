//! Raster plots written as binary PPM: loss curves and bird's-eye overlays
//! of LiDAR points, ground truth and predictions.

use crate::geom::{bev_center_distance, BevGridSpec, Box3D, PointCloud};
use crate::synth::RgbImage;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREEN: Rgb = [40, 200, 60];
pub const YELLOW: Rgb = [250, 210, 20];
pub const RED: Rgb = [230, 40, 40];
/// Curve colors for `L_det`, `L_align`, `L_aux`, `total`.
pub const SERIES: [Rgb; 4] = [[30, 90, 220], [220, 120, 20], [150, 40, 180], [20, 20, 20]];
/// Predictions within this BEV distance of a same-class ground truth are drawn as correct.
pub const CORRECT_DIST: f64 = 2.0;

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bg: Rgb) -> Self {
        Self {
            img: RgbImage {
                height,
                width,
                data: bg.iter().copied().cycle().take(width * height * 3).collect(),
            },
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x >= self.img.width as i64 || y >= self.img.height as i64 {
            return;
        }
        let i = (y as usize * self.img.width + x as usize) * 3;
        self.img.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }
}

/// Line plot of loss columns over steps on a log10 axis; one colored
/// series per column, with a color swatch per series in the top-left
/// corner.
pub fn loss_curves(steps: &[u64], series: &[Vec<f64>], width: usize, height: usize) -> RgbImage {
    let mut cv = Canvas::new(width, height, WHITE);
    let (ml, mr, mt, mb) = (40i64, 10i64, 30i64, 30i64);
    let (pw, ph) = (width as i64 - ml - mr, height as i64 - mt - mb);
    cv.line((ml, mt), (ml, mt + ph), BLACK);
    cv.line((ml, mt + ph), (ml + pw, mt + ph), BLACK);
    let positive = series.iter().flatten().copied().filter(|v| v.is_finite() && *v > 0.0);
    let (lo, hi) = positive.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if steps.is_empty() || !lo.is_finite() {
        return cv.img;
    }
    let (lo, hi) = (lo.log10().floor(), hi.log10().ceil().max(lo.log10().floor() + 1.0));
    // Decade ticks.
    for d in (lo as i64)..=(hi as i64) {
        let y = mt + ph - ((d as f64 - lo) / (hi - lo) * ph as f64).round() as i64;
        cv.line((ml - 5, y), (ml, y), BLACK);
    }
    let (s0, s1) = (
        steps[0] as f64,
        (*steps.last().expect("non-empty") as f64).max(steps[0] as f64 + 1.0),
    );
    for (k, col) in series.iter().enumerate() {
        let color = SERIES[k % SERIES.len()];
        cv.fill_rect(ml + 6 + 14 * k as i64, 6, 10, 10, color);
        let mut prev: Option<(i64, i64)> = None;
        for (&s, &v) in steps.iter().zip(col) {
            if !(v.is_finite() && v > 0.0) {
                prev = None;
                continue;
            }
            let x = ml + ((s as f64 - s0) / (s1 - s0) * pw as f64).round() as i64;
            let y = mt + ph - ((v.log10() - lo) / (hi - lo) * ph as f64).round() as i64;
            if let Some(p) = prev {
                cv.line(p, (x, y), color);
            }
            prev = Some((x, y));
        }
    }
    cv.img
}

/// Marks each prediction correct when an unused same-class ground truth lies
/// within [`CORRECT_DIST`]; predictions are visited by descending score.
pub fn correctness(preds: &[Box3D], gts: &[Box3D]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut used = vec![false; gts.len()];
    let mut ok = vec![false; preds.len()];
    for i in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && g.class_id == preds[i].class_id)
            .map(|(j, g)| (j, bev_center_distance(&preds[i], g)))
            .filter(|&(_, d)| d <= CORRECT_DIST)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            ok[i] = true;
        }
    }
    ok
}

/// Bird's-eye overlay: x grows upward, y grows to the left (as seen from
/// above looking forward). LiDAR returns in gray, ground truth in green,
/// correct predictions in yellow, wrong ones in red.
pub fn bev_overlay(grid: &BevGridSpec, cloud: &PointCloud, gts: &[Box3D], preds: &[Box3D], px_per_m: f64) -> RgbImage {
    let w = ((grid.y_range.1 - grid.y_range.0) * px_per_m).round() as usize;
    let h = ((grid.x_range.1 - grid.x_range.0) * px_per_m).round() as usize;
    let mut cv = Canvas::new(w, h, [24, 24, 28]);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            ((grid.y_range.1 - y) * px_per_m).round() as i64,
            ((grid.x_range.1 - x) * px_per_m).round() as i64,
        )
    };
    for p in &cloud.points {
        let (u, v) = to_px(p[0] as f64, p[1] as f64);
        cv.set(u, v, [120, 120, 120]);
    }
    let draw = |cv: &mut Canvas, b: &Box3D, c: Rgb| {
        let cs = b.corners_bev();
        for i in 0..4 {
            let (a, bb) = (cs[i], cs[(i + 1) % 4]);
            cv.line(to_px(a[0], a[1]), to_px(bb[0], bb[1]), c);
        }
        let (u, v) = to_px(b.center[0], b.center[1]);
        cv.fill_rect(u - 1, v - 1, 3, 3, c);
    };
    for g in gts {
        draw(&mut cv, g, GREEN);
    }
    for (p, ok) in preds.iter().zip(correctness(preds, gts)) {
        draw(&mut cv, p, if ok { YELLOW } else { RED });
    }
    cv.img
}
