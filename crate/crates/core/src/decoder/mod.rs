//! Soft-argmax and multi-hypothesis depth decoding of 3D heatmaps.
//!
//! A heatmap holds raw per-joint responses over a `D × H × W` grid. The
//! single-hypothesis decoder takes the expectation under the softmax. The
//! multi-hypothesis decoder keeps `x, y` from that expectation but extracts
//! several depths: the softmax is summed over the image plane into a depth
//! marginal, interior local maxima become candidates, the strongest `n_hypo`
//! survive, and each is refined by a weighted mean over `±n_w` bins.

mod batch;
pub mod synthetic;

pub use batch::{decode_batch_on_tape, BatchHypotheses};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Raw `J × D × H × W` responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap3D {
    data: Tensor,
}

impl Heatmap3D {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: data.shape().to_vec(),
                reason: "heatmap must be J x D x H x W".into(),
            });
        }
        if data.shape()[1] < 3 {
            return Err(Error::InvalidShape {
                shape: data.shape().to_vec(),
                reason: "depth axis needs at least 3 bins".into(),
            });
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("heatmap".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// (J, D, H, W)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Per-joint softmax over all bins, laid out like the heatmap.
    fn probabilities(&self) -> Vec<f64> {
        let (j, d, h, w) = self.dims();
        let n = d * h * w;
        let mut out = vec![0.0; j * n];
        for (dst, src) in out.chunks_mut(n).zip(self.data.data().chunks(n)) {
            softmax_into(src, dst);
        }
        out
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

pub(crate) fn softmax_row(src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    softmax_into(src, &mut out);
    out
}

/// Per-joint probability over depth bins (`J × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMarginal {
    rows: Vec<Vec<f64>>,
}

impl DepthMarginal {
    /// Wraps rows that must each be a probability vector (sum 1 ± 1e-9).
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(Error::Empty("depth marginal"))?;
        for r in &rows {
            if r.len() != d {
                return Err(Error::InvalidArgument("ragged depth marginal".into()));
            }
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("depth marginal rows must be probability vectors".into()));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        Self::new(logits.iter().map(|r| softmax_row(r)).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn joints(&self) -> usize {
        self.rows.len()
    }

    pub fn depth(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_hypo: usize,
    pub n_w: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_hypo: 3, n_w: 15 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hypo == 0 || self.n_w == 0 {
            return Err(Error::InvalidArgument(format!("n_hypo and n_w must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Peak indices selected for one joint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakSelection {
    /// Descending by marginal value, ties broken by lower index.
    pub indices: Vec<usize>,
    /// Set when the row had no interior candidate and the global argmax was used.
    pub fallback: bool,
}

/// Decoded hypotheses in heatmap units (`x` = width index, `y` = height
/// index, `z` = depth bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    /// `n_hypo × J` points. Entries beyond a joint's `valid_count` repeat its
    /// first hypothesis.
    pub poses: Vec<Vec<[f64; 3]>>,
    /// `n_hypo × J` marginal values at the peaks; zero for padding.
    pub confidences: Vec<Vec<f64>>,
    pub valid_count: Vec<usize>,
    pub fallback: Vec<bool>,
}

impl HypothesisSet {
    pub fn n_hypo(&self) -> usize {
        self.poses.len()
    }

    pub fn joint_count(&self) -> usize {
        self.valid_count.len()
    }

    /// Number of distinct pose hypotheses (the largest per-joint count).
    pub fn pose_count(&self) -> usize {
        self.valid_count.iter().copied().max().unwrap_or(0)
    }

    pub fn pose(&self, h: usize) -> &[[f64; 3]] {
        &self.poses[h]
    }

    pub fn mean_confidence(&self, h: usize) -> f64 {
        self.confidences[h].iter().sum::<f64>() / self.joint_count() as f64
    }
}

/// Expected `(x, y, z)` per joint under the softmax over the whole grid.
pub fn soft_argmax_3d(h: &Heatmap3D) -> Vec<[f64; 3]> {
    let (j, d, hh, w) = h.dims();
    let p = h.probabilities();
    let n = d * hh * w;
    (0..j)
        .map(|jj| {
            let mut acc = [0.0; 3];
            for z in 0..d {
                for y in 0..hh {
                    for x in 0..w {
                        let v = p[jj * n + (z * hh + y) * w + x];
                        acc[0] += x as f64 * v;
                        acc[1] += y as f64 * v;
                        acc[2] += z as f64 * v;
                    }
                }
            }
            acc
        })
        .collect()
}

pub fn marginalize_depth(h: &Heatmap3D) -> DepthMarginal {
    let (j, d, hh, w) = h.dims();
    let p = h.probabilities();
    let plane = hh * w;
    let rows = (0..j)
        .map(|jj| {
            (0..d)
                .map(|z| p[(jj * d + z) * plane..(jj * d + z + 1) * plane].iter().sum())
                .collect()
        })
        .collect();
    DepthMarginal { rows }
}

fn require_depth(m: &DepthMarginal) -> Result<()> {
    if m.depth() < 3 {
        return Err(Error::InvalidArgument(format!("peak detection needs D >= 3, got {}", m.depth())));
    }
    Ok(())
}

/// Interior local maxima (`≥` both neighbours); the end bins never qualify.
pub fn candidate_peaks(m: &DepthMarginal) -> Result<Vec<Vec<bool>>> {
    require_depth(m)?;
    Ok(m.rows
        .iter()
        .map(|row| {
            let d = row.len();
            (0..d)
                .map(|i| i >= 1 && i + 2 <= d && row[i] >= row[i - 1] && row[i] >= row[i + 1])
                .collect()
        })
        .collect())
}

/// Same mask as [`candidate_peaks`], computed on the whole `J × D` block by
/// comparing the centre slice against its left- and right-shifted copies.
pub fn candidate_peaks_matrix(m: &DepthMarginal) -> Result<Vec<Vec<bool>>> {
    require_depth(m)?;
    let (j, d) = (m.joints(), m.depth());
    let flat: Vec<f64> = m.rows.iter().flatten().copied().collect();
    let slice = |offset: usize| -> Vec<f64> {
        (0..j).flat_map(|r| flat[r * d + offset..r * d + offset + d - 2].iter().copied()).collect()
    };
    let (left, centre, right) = (slice(0), slice(1), slice(2));
    let interior: Vec<bool> = centre
        .iter()
        .zip(&left)
        .zip(&right)
        .map(|((c, l), r)| c >= l && c >= r)
        .collect();
    Ok(interior
        .chunks(d - 2)
        .map(|row| {
            let mut full = Vec::with_capacity(d);
            full.push(false);
            full.extend_from_slice(row);
            full.push(false);
            full
        })
        .collect())
}

pub fn top_k_peaks(m: &DepthMarginal, mask: &[Vec<bool>], k: usize) -> Result<Vec<PeakSelection>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if mask.len() != m.joints() || mask.iter().any(|r| r.len() != m.depth()) {
        return Err(Error::InvalidArgument("candidate mask does not match marginal".into()));
    }
    Ok(m.rows
        .iter()
        .zip(mask)
        .map(|(row, cand)| {
            let mut idx: Vec<usize> = (0..row.len()).filter(|&i| cand[i]).collect();
            if idx.is_empty() {
                return PeakSelection {
                    indices: vec![argmax(row)],
                    fallback: true,
                };
            }
            // stable sort keeps lower indices first among equal values
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate(k);
            PeakSelection {
                indices: idx,
                fallback: false,
            }
        })
        .collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Clamped inclusive window `[peak - n_w, peak + n_w] ∩ [0, d - 1]`.
pub fn depth_window(peak: usize, n_w: usize, d: usize) -> (usize, usize) {
    (peak.saturating_sub(n_w), (peak + n_w).min(d - 1))
}

fn check_peaks(m: &DepthMarginal, peaks: &[Vec<usize>]) -> Result<()> {
    if peaks.len() != m.joints() {
        return Err(Error::InvalidArgument(format!("{} peak lists for {} joints", peaks.len(), m.joints())));
    }
    for &p in peaks.iter().flatten() {
        if p >= m.depth() {
            return Err(Error::IndexOutOfRange {
                index: p,
                len: m.depth(),
            });
        }
    }
    Ok(())
}

/// Local weighted mean of the depth index around each peak.
pub fn refine_depth(m: &DepthMarginal, peaks: &[Vec<usize>], n_w: usize) -> Result<Vec<Vec<f64>>> {
    check_peaks(m, peaks)?;
    Ok(m.rows
        .iter()
        .zip(peaks)
        .map(|(row, ps)| {
            ps.iter()
                .map(|&p| {
                    let (lo, hi) = depth_window(p, n_w, row.len());
                    let (mut num, mut den) = (0.0, 0.0);
                    for (i, v) in row.iter().enumerate().take(hi + 1).skip(lo) {
                        num += i as f64 * v;
                        den += v;
                    }
                    if den == 0.0 {
                        p as f64
                    } else {
                        num / den
                    }
                })
                .collect()
        })
        .collect())
}

/// Stride-1 average pooling with window `2 * pad + 1` and zero padding.
fn avg_pool_1d(x: &[f64], pad: usize) -> Vec<f64> {
    let win = 2 * pad + 1;
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(pad);
            let hi = (i + pad).min(n - 1);
            x[lo..=hi].iter().sum::<f64>() / win as f64
        })
        .collect()
}

/// [`refine_depth`] as a ratio of two average-pooled rows read at each peak.
pub fn refine_depth_pooled(m: &DepthMarginal, peaks: &[Vec<usize>], n_w: usize) -> Result<Vec<Vec<f64>>> {
    check_peaks(m, peaks)?;
    Ok(m.rows
        .iter()
        .zip(peaks)
        .map(|(row, ps)| {
            let weighted: Vec<f64> = row.iter().enumerate().map(|(i, v)| i as f64 * v).collect();
            let num = avg_pool_1d(&weighted, n_w);
            let den = avg_pool_1d(row, n_w);
            ps.iter()
                .map(|&p| if den[p] == 0.0 { p as f64 } else { num[p] / den[p] })
                .collect()
        })
        .collect())
}

/// Assembles hypotheses from per-joint `(x, y)` and a depth marginal.
pub fn decode_from_parts(xy: &[[f64; 2]], m: &DepthMarginal, cfg: &DecoderConfig) -> Result<HypothesisSet> {
    cfg.validate()?;
    if xy.len() != m.joints() {
        return Err(Error::InvalidArgument("x/y and marginal joint counts differ".into()));
    }
    let mask = candidate_peaks(m)?;
    let selected = top_k_peaks(m, &mask, cfg.n_hypo)?;
    let peaks: Vec<Vec<usize>> = selected.iter().map(|s| s.indices.clone()).collect();
    let depths = refine_depth(m, &peaks, cfg.n_w)?;

    let j = m.joints();
    let mut poses = vec![vec![[0.0; 3]; j]; cfg.n_hypo];
    let mut confidences = vec![vec![0.0; j]; cfg.n_hypo];
    for jj in 0..j {
        for h in 0..cfg.n_hypo {
            let src = if h < peaks[jj].len() { h } else { 0 };
            poses[h][jj] = [xy[jj][0], xy[jj][1], depths[jj][src]];
            if h < peaks[jj].len() {
                confidences[h][jj] = m.rows[jj][peaks[jj][h]];
            }
        }
    }
    Ok(HypothesisSet {
        poses,
        confidences,
        valid_count: peaks.iter().map(Vec::len).collect(),
        fallback: selected.iter().map(|s| s.fallback).collect(),
    })
}

/// Full multi-hypothesis decoding of a heatmap.
pub fn decode(h: &Heatmap3D, cfg: &DecoderConfig) -> Result<HypothesisSet> {
    let xy: Vec<[f64; 2]> = soft_argmax_3d(h).iter().map(|p| [p[0], p[1]]).collect();
    decode_from_parts(&xy, &marginalize_depth(h), cfg)
}

/// Heatmap whose logits separate as `depth[z] + rows[y] + cols[x]` per joint.
///
/// The softmax of such a heatmap factorizes into three independent
/// softmaxes, so decoding never has to materialize the `D × H × W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableHeatmap {
    pub depth: Vec<Vec<f64>>,
    pub rows: Vec<Vec<f64>>,
    pub cols: Vec<Vec<f64>>,
}

impl SeparableHeatmap {
    pub fn joints(&self) -> usize {
        self.depth.len()
    }

    pub fn to_heatmap(&self) -> Result<Heatmap3D> {
        let j = self.joints();
        let (d, h, w) = (self.depth[0].len(), self.rows[0].len(), self.cols[0].len());
        let mut data = Vec::with_capacity(j * d * h * w);
        for jj in 0..j {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        data.push(self.depth[jj][z] + self.rows[jj][y] + self.cols[jj][x]);
                    }
                }
            }
        }
        Heatmap3D::new(Tensor::new(&[j, d, h, w], data)?)
    }

    pub fn soft_argmax_xy(&self) -> Vec<[f64; 2]> {
        let expect = |row: &[f64]| -> f64 { softmax_row(row).iter().enumerate().map(|(i, p)| i as f64 * p).sum() };
        self.cols.iter().zip(&self.rows).map(|(c, r)| [expect(c), expect(r)]).collect()
    }

    pub fn decode(&self, cfg: &DecoderConfig) -> Result<HypothesisSet> {
        decode_from_parts(&self.soft_argmax_xy(), &DepthMarginal::from_logits(&self.depth)?, cfg)
    }
}
