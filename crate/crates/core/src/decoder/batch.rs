use super::{candidate_peaks, decode_from_parts, depth_window, top_k_peaks, DecoderConfig, DepthMarginal, HypothesisSet};
use crate::diffcore::{concat, Tensor, Var};
use crate::error::{Error, Result};

/// Differentiable decoding result for a batch of separable heatmaps.
pub struct BatchHypotheses<'t> {
    /// `(B · n_hypo · J) × 3` coordinates ordered sample, hypothesis, joint.
    pub coords: Var<'t>,
    pub n_hypo: usize,
    pub joints: usize,
    /// The same hypotheses as plain values, one set per sample.
    pub sets: Vec<HypothesisSet>,
}

impl BatchHypotheses<'_> {
    pub fn batch(&self) -> usize {
        self.sets.len()
    }
}

fn index_column(n: usize) -> Result<Tensor> {
    Tensor::new(&[n, 1], (0..n).map(|i| i as f64).collect())
}

/// Decodes `B × J` separable heatmaps given as `(B·J) × D`, `(B·J) × H` and
/// `(B·J) × W` logit blocks.
///
/// Peak selection is discrete and carries no gradient; the soft-argmax
/// `x, y` and the windowed depth means are differentiable in the logits.
/// Pose hypotheses beyond a joint's valid count reuse its first depth, which
/// makes them duplicates of an earlier hypothesis for that joint.
pub fn decode_batch_on_tape<'t>(
    depth_logits: Var<'t>,
    row_logits: Var<'t>,
    col_logits: Var<'t>,
    joints: usize,
    cfg: &DecoderConfig,
) -> Result<BatchHypotheses<'t>> {
    cfg.validate()?;
    let (ds, rs, cs) = (depth_logits.shape(), row_logits.shape(), col_logits.shape());
    if ds.len() != 2 || rs.len() != 2 || cs.len() != 2 || ds[0] != rs[0] || ds[0] != cs[0] || joints == 0 || ds[0] % joints != 0 {
        return Err(Error::ShapeMismatch {
            op: "decode_batch_on_tape",
            lhs: ds,
            rhs: rs,
        });
    }
    let tape = depth_logits.tape();
    let n_rows = ds[0];
    let batch = n_rows / joints;
    let (d, h, w) = (ds[1], rs[1], cs[1]);
    let k = cfg.n_hypo;

    let pz = depth_logits.softmax(1)?;
    let x = col_logits.softmax(1)?.matmul(tape.constant(index_column(w)?))?;
    let y = row_logits.softmax(1)?.matmul(tape.constant(index_column(h)?))?;

    let pz_val = pz.value();
    let (x_val, y_val) = (x.value(), y.value());
    let mut sets = Vec::with_capacity(batch);
    let mut gather = Vec::with_capacity(batch * k * joints);
    let mut window = Vec::with_capacity(batch * k * joints * d);
    let mut weighted = Vec::with_capacity(batch * k * joints * d);
    let mut peak_of = Vec::with_capacity(batch * k * joints);

    for b in 0..batch {
        let rows: Vec<Vec<f64>> = (0..joints)
            .map(|j| pz_val.data()[(b * joints + j) * d..(b * joints + j + 1) * d].to_vec())
            .collect();
        let marginal = DepthMarginal { rows };
        let xy: Vec<[f64; 2]> = (0..joints)
            .map(|j| [x_val.data()[b * joints + j], y_val.data()[b * joints + j]])
            .collect();
        sets.push(decode_from_parts(&xy, &marginal, cfg)?);
        let selected = top_k_peaks(&marginal, &candidate_peaks(&marginal)?, k)?;
        for hh in 0..k {
            for (j, sel) in selected.iter().enumerate() {
                let src = if hh < sel.indices.len() { hh } else { 0 };
                let p = sel.indices[src];
                let (lo, hi) = depth_window(p, cfg.n_w, d);
                gather.push(b * joints + j);
                peak_of.push(p as f64);
                for i in 0..d {
                    let inside = if (lo..=hi).contains(&i) { 1.0 } else { 0.0 };
                    window.push(inside);
                    weighted.push(inside * i as f64);
                }
            }
        }
    }

    let m = gather.len();
    let g = pz.gather_rows(&gather)?;
    let num = g.mul(tape.constant(Tensor::new(&[m, d], weighted)?))?.sum_axis(1)?;
    let den = g.mul(tape.constant(Tensor::new(&[m, d], window)?))?.sum_axis(1)?;
    // an empty window falls back to the peak index itself
    let den_val = den.value();
    let (num, den) = if den_val.data().iter().any(|v| *v == 0.0) {
        let fix_den: Vec<f64> = den_val.data().iter().map(|v| if *v == 0.0 { 1.0 } else { 0.0 }).collect();
        let fix_num: Vec<f64> = fix_den.iter().zip(&peak_of).map(|(f, p)| f * p).collect();
        (
            num.add(tape.constant(Tensor::vector(fix_num)?))?,
            den.add(tape.constant(Tensor::vector(fix_den)?))?,
        )
    } else {
        (num, den)
    };
    let z = num.div(den)?.reshape(&[m, 1])?;
    let coords = concat(&[x.gather_rows(&gather)?, y.gather_rows(&gather)?, z], 1)?;
    Ok(BatchHypotheses {
        coords,
        n_hypo: k,
        joints,
        sets,
    })
}
