//! Constructed heatmaps with known decoding results.

use super::{Heatmap3D, SeparableHeatmap};
use crate::diffcore::Tensor;
use crate::error::Result;

/// A Gaussian bump in depth: centre (bins), width (bins), relative weight.
#[derive(Debug, Clone, Copy)]
pub struct Bump {
    pub center: f64,
    pub sigma: f64,
    pub weight: f64,
}

impl Bump {
    pub fn new(center: f64, sigma: f64, weight: f64) -> Self {
        Self { center, sigma, weight }
    }
}

/// Normalized mixture of bumps sampled at bins `0..d`.
pub fn bump_row(d: usize, bumps: &[Bump]) -> Vec<f64> {
    let raw: Vec<f64> = (0..d)
        .map(|i| {
            bumps
                .iter()
                .map(|b| b.weight * (-((i as f64 - b.center).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
                .sum::<f64>()
                .max(1e-300)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable logits: depth from the bump mixture, a sharp blob at
/// `(x0, y0)` in the image plane.
pub fn separable_from_bumps(
    joints: usize,
    d: usize,
    h: usize,
    w: usize,
    bumps: &[Bump],
    xy: [f64; 2],
) -> SeparableHeatmap {
    let depth: Vec<f64> = bump_row(d, bumps).into_iter().map(f64::ln).collect();
    let plane = |n: usize, c: f64| -> Vec<f64> { (0..n).map(|i| -4.0 * (i as f64 - c).powi(2)).collect() };
    SeparableHeatmap {
        depth: vec![depth; joints],
        rows: vec![plane(h, xy[1]); joints],
        cols: vec![plane(w, xy[0]); joints],
    }
}

/// The bundled decoding fixture: one joint, `D = 64`, bumps at depths 16 and
/// 48 over an `8 × 8` image plane.
pub fn bimodal_fixture() -> Result<Heatmap3D> {
    separable_from_bumps(
        1,
        64,
        8,
        8,
        &[Bump::new(16.0, 2.5, 1.0), Bump::new(48.0, 2.5, 0.8)],
        [3.0, 4.0],
    )
    .to_heatmap()
}

/// Single-joint heatmap with one dominant bin.
pub fn delta_heatmap(d: usize, h: usize, w: usize, at: [usize; 3], peak: f64, rest: f64) -> Result<Heatmap3D> {
    let mut data = vec![rest; d * h * w];
    data[(at[0] * h + at[1]) * w + at[2]] = peak;
    Heatmap3D::new(Tensor::new(&[1, d, h, w], data)?)
}
