use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use crate::diffcore::{CustomOp, Tensor, Var};
use crate::error::{Error, Result};

/// Squared distance from `p` to segment `ab` and the clamped projection parameter.
fn segment_distance2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = [p[0] - q[0], p[1] - q[1]];
    (d[0] * d[0] + d[1] * d[1], t)
}

/// Renders one skeleton into `out` (`h·w`, row-major, pixel centres at
/// integer coordinates). With `grad` set, accumulates `∂(Σ g·out)/∂points`
/// instead; the gradient of the per-pixel max goes to the first nearest bone.
fn render_one(
    points: &[[f64; 2]],
    edges: &[(usize, usize)],
    thickness: f64,
    h: usize,
    w: usize,
    out: &mut [f64],
    mut grad: Option<(&[f64], &mut [[f64; 2]])>,
) {
    let inv = 1.0 / (2.0 * thickness * thickness);
    for r in 0..h {
        for c in 0..w {
            let p = [c as f64, r as f64];
            let mut best = (f64::INFINITY, 0.0, 0usize);
            for (e, &(a, b)) in edges.iter().enumerate() {
                let (d2, t) = segment_distance2(p, points[a], points[b]);
                if d2 < best.0 {
                    best = (d2, t, e);
                }
            }
            let (d2, t, e) = best;
            let v = (-d2 * inv).exp();
            let pix = r * w + c;
            out[pix] = v;
            if let Some((g, acc)) = grad.as_mut() {
                let (a, b) = edges[e];
                let (pa, pb) = (points[a], points[b]);
                let q = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                // dv/dd² = −v·inv; ∂d²/∂a = −2(p − q)(1 − t), ∂d²/∂b = −2(p − q)t
                let s = g[pix] * v * inv * 2.0;
                for k in 0..2 {
                    acc[a][k] += s * (p[k] - q[k]) * (1.0 - t);
                    acc[b][k] += s * (p[k] - q[k]) * t;
                }
            }
        }
    }
}

fn check_edges(edges: &[(usize, usize)], joints: usize) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::Empty("skeleton edges"));
    }
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= joints || b >= joints) {
        return Err(Error::IndexOutOfRange {
            index: a.max(b),
            len: joints,
        });
    }
    Ok(())
}

/// Soft skeleton mask: each bone is a Gaussian capsule
/// `exp(−d²/(2·thickness²))`, combined by a per-pixel max.
pub fn render_skeleton_mask(pose2d: &[[f64; 2]], edges: &[(usize, usize)], thickness: f64, h: usize, w: usize) -> Result<Tensor> {
    check_edges(edges, pose2d.len())?;
    if !(thickness > 0.0) {
        return Err(Error::InvalidArgument(format!("thickness {thickness} must be positive")));
    }
    if pose2d.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("2D pose".into()));
    }
    let mut out = vec![0.0; h * w];
    render_one(pose2d, edges, thickness, h, w, &mut out, None);
    Tensor::new(&[h, w], out)
}

/// Batched renderer as a tape operation: `(B·J) × 2` points to `B × (h·w)` masks.
#[derive(Debug, Clone)]
pub struct SkeletonRender {
    pub edges: Vec<(usize, usize)>,
    pub joints: usize,
    pub thickness: f64,
    pub height: usize,
    pub width: usize,
}

impl SkeletonRender {
    fn points(&self, t: &Tensor, b: usize) -> Vec<[f64; 2]> {
        let d = t.data();
        (0..self.joints).map(|j| [d[(b * self.joints + j) * 2], d[(b * self.joints + j) * 2 + 1]]).collect()
    }

    pub fn forward(&self, points: &Tensor) -> Result<Tensor> {
        check_edges(&self.edges, self.joints)?;
        let s = points.shape();
        if s.len() != 2 || s[1] != 2 || s[0] % self.joints != 0 || s[0] == 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("expected (B·{}) × 2 points", self.joints),
            });
        }
        if !points.is_finite() {
            return Err(Error::NonFinite("2D pose".into()));
        }
        let batch = s[0] / self.joints;
        let n = self.height * self.width;
        let mut out = vec![0.0; batch * n];
        for b in 0..batch {
            render_one(&self.points(points, b), &self.edges, self.thickness, self.height, self.width, &mut out[b * n..(b + 1) * n], None);
        }
        Tensor::new(&[batch, n], out)
    }
}

impl CustomOp for SkeletonRender {
    fn name(&self) -> &'static str {
        "render_skeleton_mask"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let points = inputs[0];
        let batch = output.shape()[0];
        let n = self.height * self.width;
        let mut grad = vec![[0.0; 2]; batch * self.joints];
        let mut scratch = vec![0.0; n];
        for b in 0..batch {
            let g = &grad_out.data()[b * n..(b + 1) * n];
            let acc = &mut grad[b * self.joints..(b + 1) * self.joints];
            render_one(&self.points(points, b), &self.edges, self.thickness, self.height, self.width, &mut scratch, Some((g, acc)));
        }
        Ok(vec![Some(Tensor::new(points.shape(), grad.into_iter().flatten().collect())?)])
    }
}

pub fn render_skeleton_mask_on_tape<'t>(points: Var<'t>, op: &SkeletonRender) -> Result<Var<'t>> {
    let out = op.forward(&points.value())?;
    Ok(points.tape().custom(&[points], out, Rc::new(op.clone())))
}

/// Writes an `h × w` mask with values in `[0, 1]` as a binary 8-bit PGM.
pub fn write_pgm(mask: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if mask.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: mask.shape().to_vec(),
            reason: "PGM export needs a 2-D mask".into(),
        });
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
