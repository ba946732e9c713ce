//! Training objectives.
//!
//! Each loss exists twice: a plain version over `f64` slices for reporting
//! and tests, and a tape version that builds the same expression from
//! differentiable ops. Winner-takes-all reductions use `min_axis`, which
//! routes the gradient to the first minimizing hypothesis.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};

/// Weights of the total objective and of the two mask terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_g: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 2e-2,
            lambda_g: 1.0,
            lambda_r: 0.5,
            lambda_s: 1.0,
            lambda_p: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_m, self.lambda_g, self.lambda_r, self.lambda_s, self.lambda_p];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and non-negative, got {all:?}")));
        }
        Ok(())
    }
}

/// Minimum over hypotheses and the index that attains it (first on ties).
pub fn wta(values: &[f64]) -> Result<(f64, usize)> {
    if values.is_empty() {
        return Err(Error::Empty("wta"));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("wta entry {i}")));
        }
        if *v < values[best] {
            best = i;
        }
    }
    Ok((values[best], best))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `λ_s · mse(gt, skeleton) + λ_p · mse(gt, physique)` over equally shaped masks.
pub fn mask_loss(gt: &Tensor, skeleton: &Tensor, physique: &Tensor, w: &LossWeights) -> Result<f64> {
    gt.expect_same_shape(skeleton, "mask_loss")?;
    gt.expect_same_shape(physique, "mask_loss")?;
    if gt.numel() == 0 {
        return Err(Error::Empty("mask_loss"));
    }
    Ok(w.lambda_s * mse(gt.data(), skeleton.data()) + w.lambda_p * mse(gt.data(), physique.data()))
}

fn check_scores(scores: &[Vec<f64>], op: &'static str) -> Result<()> {
    if scores.is_empty() || scores.iter().any(Vec::is_empty) {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Least-squares discriminator loss with the winner-takes-all minimum taken
/// inside the fake term, per sample.
pub fn lsgan_discriminator_loss(real: &[f64], fake: &[Vec<f64>]) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::Empty("lsgan_discriminator_loss"));
    }
    check_scores(fake, "lsgan_discriminator_loss")?;
    let real_term = real.iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / real.len() as f64;
    let mut fake_term = 0.0;
    for row in fake {
        let sq: Vec<f64> = row.iter().map(|f| f * f).collect();
        fake_term += wta(&sq)?.0;
    }
    Ok(0.5 * real_term + 0.5 * fake_term / fake.len() as f64)
}

/// Mean over samples of `½ · min_h (score − 1)²`.
pub fn lsgan_generator_wta_loss(fake: &[Vec<f64>]) -> Result<f64> {
    check_scores(fake, "lsgan_generator_wta_loss")?;
    let mut total = 0.0;
    for row in fake {
        let sq: Vec<f64> = row.iter().map(|f| 0.5 * (f - 1.0) * (f - 1.0)).collect();
        total += wta(&sq)?.0;
    }
    Ok(total / fake.len() as f64)
}

/// Mean squared joint error of each hypothesis against the target.
pub fn per_hypothesis_errors(target: &[[f64; 3]], hypotheses: &[Vec<[f64; 3]>]) -> Result<Vec<f64>> {
    if target.is_empty() || hypotheses.is_empty() {
        return Err(Error::Empty("render_wta_loss"));
    }
    hypotheses
        .iter()
        .map(|pose| {
            if pose.len() != target.len() {
                return Err(Error::ShapeMismatch {
                    op: "render_wta_loss",
                    lhs: vec![target.len(), 3],
                    rhs: vec![pose.len(), 3],
                });
            }
            let s: f64 = pose
                .iter()
                .zip(target)
                .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]) * (p[k] - t[k])).sum::<f64>())
                .sum();
            Ok(s / target.len() as f64)
        })
        .collect()
}

/// Minimum over hypotheses of the mean squared joint error.
pub fn render_wta_loss(target: &[[f64; 3]], hypotheses: &[Vec<[f64; 3]>]) -> Result<f64> {
    Ok(wta(&per_hypothesis_errors(target, hypotheses)?)?.0)
}

/// `λ_m · mask + λ_g · gen + λ_r · render`.
pub fn total_loss(mask: f64, gen: f64, render: f64, w: &LossWeights) -> f64 {
    w.lambda_m * mask + w.lambda_g * gen + w.lambda_r * render
}

/// Tape versions of the objectives.
pub mod tape {
    use super::*;

    /// Minimum of a 1-D vector.
    pub fn wta<'t>(v: Var<'t>) -> Result<Var<'t>> {
        let n: usize = v.shape().iter().product();
        if n == 0 {
            return Err(Error::Empty("wta"));
        }
        v.reshape(&[1, n])?.min_axis(1)
    }

    pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        Ok(a.sub(b)?.square().mean())
    }

    pub fn mask_loss<'t>(gt: Var<'t>, skeleton: Var<'t>, physique: Option<Var<'t>>, w: &LossWeights) -> Result<Var<'t>> {
        let s = mse(gt, skeleton)?.scale(w.lambda_s);
        match physique {
            Some(p) => s.add(mse(gt, p)?.scale(w.lambda_p)),
            None => Ok(s),
        }
    }

    fn check_fake(fake: &Var<'_>, op: &'static str) -> Result<()> {
        let s = fake.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("{op} expects B × K scores"),
            });
        }
        Ok(())
    }

    /// `real` has one score per sample, `fake` is `B × K`.
    pub fn lsgan_discriminator_loss<'t>(real: Var<'t>, fake: Var<'t>) -> Result<Var<'t>> {
        check_fake(&fake, "lsgan_discriminator_loss")?;
        let real_term = real.add_scalar(-1.0).square().mean();
        let fake_term = fake.square().min_axis(1)?.mean();
        Ok(real_term.add(fake_term)?.scale(0.5))
    }

    pub fn lsgan_generator_wta_loss<'t>(fake: Var<'t>) -> Result<Var<'t>> {
        check_fake(&fake, "lsgan_generator_wta_loss")?;
        Ok(fake.add_scalar(-1.0).square().scale(0.5).min_axis(1)?.mean())
    }

    /// Batched render loss. `coords` is `(B·K·J) × 3` ordered sample,
    /// hypothesis, joint; `targets` is `(B·J) × 3`. Returns the batch mean of
    /// the per-sample winner-takes-all error.
    pub fn render_wta_loss<'t>(coords: Var<'t>, targets: Var<'t>, n_hypo: usize, joints: usize) -> Result<Var<'t>> {
        let (cs, ts) = (coords.shape(), targets.shape());
        if n_hypo == 0 || joints == 0 || ts.len() != 2 || ts[0] % joints != 0 || cs != [ts[0] * n_hypo, ts[1]] {
            return Err(Error::ShapeMismatch {
                op: "render_wta_loss",
                lhs: cs,
                rhs: ts,
            });
        }
        let batch = ts[0] / joints;
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| (0..n_hypo).flat_map(move |_| (0..joints).map(move |j| b * joints + j)))
            .collect();
        let err = coords.sub(targets.gather_rows(&rows)?)?.square().sum_axis(1)?;
        let per_hypo = err.reshape(&[batch * n_hypo, joints])?.mean_axis(1)?;
        Ok(per_hypo.reshape(&[batch, n_hypo])?.min_axis(1)?.mean())
    }

    pub fn total_loss<'t>(mask: Var<'t>, gen: Var<'t>, render: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
        mask.scale(w.lambda_m).add(gen.scale(w.lambda_g))?.add(render.scale(w.lambda_r))
    }
}

#[cfg(test)]
mod tests;
