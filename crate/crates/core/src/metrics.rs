//! Pose error metrics and hypothesis selection.
//!
//! `mpjpe`, `n_mpjpe`, `pck` and `auc` expect root-centred poses; use
//! [`pose_metrics`] to centre and evaluate in one go.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::decoder::HypothesisSet;
use crate::error::{Error, Result};
use crate::skeleton::{root_center, Pose3D};

pub const PCK_THRESHOLD_MM: f64 = 150.0;

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "pose metric",
            lhs: vec![pred.len(), 3],
            rhs: vec![gt.len(), 3],
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("pose metric"));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    Ok(pred.joints.iter().zip(&gt.joints).map(|(a, b)| dist(*a, *b)).collect())
}

/// Mean per-joint Euclidean distance.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Error after an alignment, with a flag for inputs where the alignment is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aligned {
    pub error: f64,
    pub degenerate: bool,
}

fn scaled_error(pred: &Pose3D, gt: &Pose3D, s: f64) -> f64 {
    pred.joints.iter().zip(&gt.joints).map(|(p, g)| dist(p.map(|v| v * s), *g)).sum::<f64>() / pred.len() as f64
}

/// Best uniform scale about the origin.
///
/// The mean distance is convex in the scale, so a golden-section search on
/// `[0, 2·Σ‖g‖/Σ‖p‖]` (beyond which the error exceeds the error at 0)
/// finds its minimum. The least-squares scale and `s = 1` are kept as
/// candidates, so the result never exceeds `mpjpe`.
pub fn n_mpjpe_aligned(pred: &Pose3D, gt: &Pose3D) -> Result<(Aligned, f64)> {
    check_pair(pred, gt)?;
    let pp: f64 = pred.joints.iter().flatten().map(|v| v * v).sum();
    if pp == 0.0 {
        return Ok((
            Aligned {
                error: mpjpe(pred, gt)?,
                degenerate: true,
            },
            1.0,
        ));
    }
    let pg: f64 = pred.joints.iter().flatten().zip(gt.joints.iter().flatten()).map(|(a, b)| a * b).sum();
    let norm_sum = |p: &Pose3D| p.joints.iter().map(|q| dist(*q, [0.0; 3])).sum::<f64>();
    let f = |s: f64| scaled_error(pred, gt, s);
    let (mut a, mut b) = (0.0, 2.0 * norm_sum(gt) / norm_sum(pred));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let mut best = (f(1.0), 1.0);
    for s in [pg / pp, 0.5 * (a + b)] {
        if s > 0.0 && f(s) < best.0 {
            best = (f(s), s);
        }
    }
    Ok((
        Aligned {
            error: best.0,
            degenerate: false,
        },
        best.1,
    ))
}

pub fn n_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(n_mpjpe_aligned(pred, gt)?.0.error)
}

fn centroid(p: &Pose3D) -> Vector3<f64> {
    p.joints.iter().map(|q| Vector3::new(q[0], q[1], q[2])).sum::<Vector3<f64>>() / p.len() as f64
}

/// Mean distance after the least-squares similarity transform (rotation,
/// uniform scale, translation; reflections excluded).
pub fn procrustes_aligned(pred: &Pose3D, gt: &Pose3D) -> Result<(Aligned, Pose3D)> {
    check_pair(pred, gt)?;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let xs: Vec<Vector3<f64>> = pred.joints.iter().map(|q| Vector3::new(q[0], q[1], q[2]) - mp).collect();
    let ys: Vec<Vector3<f64>> = gt.joints.iter().map(|q| Vector3::new(q[0], q[1], q[2]) - mg).collect();
    let xx: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    if xx == 0.0 {
        let aligned = Pose3D::new(vec![[mg[0], mg[1], mg[2]]; pred.len()]);
        return Ok((
            Aligned {
                error: mpjpe(&aligned, gt)?,
                degenerate: true,
            },
            aligned,
        ));
    }
    let h: Matrix3<f64> = xs.iter().zip(&ys).map(|(x, y)| x * y.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut sign = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rot = v_t.transpose() * sign * u.transpose();
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
    let scale = trace / xx;
    let aligned = Pose3D::new(
        xs.iter()
            .map(|x| {
                let q = rot * x * scale + mg;
                [q[0], q[1], q[2]]
            })
            .collect(),
    );
    Ok((
        Aligned {
            error: mpjpe(&aligned, gt)?,
            degenerate: false,
        },
        aligned,
    ))
}

/// Error after the best similarity alignment found: the Procrustes solution,
/// or the scale-only alignment when that happens to give a smaller mean
/// distance (least squares does not minimize the mean distance).
pub fn p_mpjpe_aligned(pred: &Pose3D, gt: &Pose3D) -> Result<Aligned> {
    let (proc, _) = procrustes_aligned(pred, gt)?;
    let (scaled, _) = n_mpjpe_aligned(pred, gt)?;
    Ok(if scaled.error < proc.error { Aligned { degenerate: proc.degenerate, ..scaled } } else { proc })
}

pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(p_mpjpe_aligned(pred, gt)?.error)
}

/// Fraction of joints with error strictly below `threshold` (mm).
pub fn pck(pred: &Pose3D, gt: &Pose3D, threshold: f64) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().filter(|d| **d < threshold).count() as f64 / e.len() as f64)
}

/// The thresholds 5, 10, …, 150 mm.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

/// Mean PCK over [`auc_thresholds`].
pub fn auc(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    let ts = auc_thresholds();
    let total: usize = ts.iter().map(|t| e.iter().filter(|d| *d < t).count()).sum();
    Ok(total as f64 / (ts.len() * e.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Single,
    Conf,
    Best,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Single => "single",
            Protocol::Conf => "conf",
            Protocol::Best => "best",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::Single),
            "conf" => Ok(Protocol::Conf),
            "best" => Ok(Protocol::Best),
            _ => Err(Error::InvalidArgument(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Picks one of `candidates`. `single` takes the first, `conf` the highest
/// mean confidence, `best` the lowest root-centred MPJPE against `gt`.
/// Ties go to the lower index.
pub fn select_index(candidates: &[Pose3D], confidence: &[f64], gt: Option<&Pose3D>, protocol: Protocol, root: usize) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("select_hypothesis"));
    }
    match protocol {
        Protocol::Single => Ok(0),
        Protocol::Conf => {
            if confidence.len() != candidates.len() {
                return Err(Error::ShapeMismatch {
                    op: "select_hypothesis",
                    lhs: vec![candidates.len()],
                    rhs: vec![confidence.len()],
                });
            }
            let mut best = 0;
            for (i, c) in confidence.iter().enumerate() {
                if *c > confidence[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Protocol::Best => {
            let gt = gt.ok_or_else(|| Error::InvalidArgument("best protocol needs ground truth".into()))?;
            let gt = root_center(gt, root)?;
            let mut best = (f64::INFINITY, 0);
            for (i, c) in candidates.iter().enumerate() {
                let e = mpjpe(&root_center(c, root)?, &gt)?;
                if e < best.0 {
                    best = (e, i);
                }
            }
            Ok(best.1)
        }
    }
}

/// [`select_index`] over the poses of a hypothesis set, in the set's own units.
pub fn select_hypothesis(hypos: &HypothesisSet, gt: Option<&Pose3D>, protocol: Protocol, root: usize) -> Result<Pose3D> {
    let poses: Vec<Pose3D> = (0..hypos.n_hypo()).map(|h| Pose3D::new(hypos.pose(h).to_vec())).collect();
    let conf: Vec<f64> = (0..hypos.n_hypo()).map(|h| hypos.mean_confidence(h)).collect();
    let i = select_index(&poses, &conf, gt, protocol, root)?;
    Ok(poses.into_iter().nth(i).expect("index in range"))
}

/// All metrics for one root-centred pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub mpjpe: f64,
    pub n_mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
}

/// Centres both poses on `root`, then evaluates every metric.
pub fn pose_metrics(pred: &Pose3D, gt: &Pose3D, root: usize) -> Result<PoseMetrics> {
    let (p, g) = (root_center(pred, root)?, root_center(gt, root)?);
    Ok(PoseMetrics {
        mpjpe: mpjpe(&p, &g)?,
        n_mpjpe: n_mpjpe(&p, &g)?,
        p_mpjpe: p_mpjpe(&p, &g)?,
        pck: pck(&p, &g, PCK_THRESHOLD_MM)?,
        auc: auc(&p, &g)?,
    })
}

/// Dataset-level averages for one selection protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub count: usize,
    pub mpjpe: f64,
    pub n_mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
}

impl MetricsReport {
    pub fn from_samples(protocol: Protocol, samples: &[PoseMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("metrics report"));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&PoseMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            protocol,
            count: samples.len(),
            mpjpe: mean(|m| m.mpjpe),
            n_mpjpe: mean(|m| m.n_mpjpe),
            p_mpjpe: mean(|m| m.p_mpjpe),
            pck: mean(|m| m.pck),
            auc: mean(|m| m.auc),
        })
    }

    pub const CSV_HEADER: &'static str = "protocol,count,mpjpe,n_mpjpe,p_mpjpe,pck,auc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.protocol, self.count, self.mpjpe, self.n_mpjpe, self.p_mpjpe, self.pck, self.auc
        )
    }
}
