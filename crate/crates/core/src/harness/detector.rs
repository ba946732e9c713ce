use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DetectorConfig, GridConfig, MaskConfig};
use crate::diffcore::{glorot_uniform, linear, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Average of each `pool × pool` patch of every mask, flattened row-major.
/// Returns `B × (size/pool)²`.
pub fn pooled_features(masks: &[&Tensor], pool: usize) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Empty("pooled_features"));
    };
    let s = first.shape().to_vec();
    if s.len() != 2 || s[0] != s[1] || pool == 0 || s[0] % pool != 0 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("square mask divisible by {pool} expected"),
        });
    }
    let (n, g) = (s[0], s[0] / pool);
    let inv = 1.0 / (pool * pool) as f64;
    let mut out = vec![0.0; masks.len() * g * g];
    for (b, m) in masks.iter().enumerate() {
        m.expect_same_shape(first, "pooled_features")?;
        let feats = &mut out[b * g * g..(b + 1) * g * g];
        for (i, row) in m.data().chunks(n).enumerate() {
            for (j, v) in row.iter().enumerate() {
                feats[(i / pool) * g + j / pool] += v * inv;
            }
        }
    }
    Tensor::new(&[masks.len(), g * g], out)
}

/// Separable logit blocks, each `(B·J) × len`.
pub struct SeparableLogits<'t> {
    pub depth: Var<'t>,
    pub rows: Var<'t>,
    pub cols: Var<'t>,
}

/// Small trainable map from a mask image to separable heatmap logits:
/// pooled patches, one hidden ReLU layer, then one linear head per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub store: ParamStore,
    pub joints: usize,
    pub grid: GridConfig,
    pub pool: usize,
    w1: usize,
    b1: usize,
    heads: [(usize, usize); 3],
}

impl ToyDetector {
    pub fn init(joints: usize, grid: GridConfig, cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        if joints == 0 || cfg.pool == 0 || grid.height % cfg.pool != 0 || grid.width % cfg.pool != 0 {
            return Err(Error::InvalidArgument("detector needs joints and a pool dividing the grid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (grid.height / cfg.pool) * (grid.width / cfg.pool);
        let mut store = ParamStore::new();
        let w1 = store.add("detector.w1", glorot_uniform(feats, cfg.hidden, &mut rng));
        let b1 = store.add("detector.b1", Tensor::zeros(&[cfg.hidden])?);
        let mut head = |name: &str, len: usize| -> Result<(usize, usize)> {
            let w: Vec<f64> = (0..cfg.hidden * joints * len).map(|_| cfg.output_init * rng.gen_range(-1.0..1.0)).collect();
            let w = store.add(format!("detector.{name}.w"), Tensor::new(&[cfg.hidden, joints * len], w)?);
            let b = store.add(format!("detector.{name}.b"), Tensor::zeros(&[joints * len])?);
            Ok((w, b))
        };
        let heads = [head("depth", grid.depth)?, head("rows", grid.height)?, head("cols", grid.width)?];
        Ok(Self {
            store,
            joints,
            grid,
            pool: cfg.pool,
            w1,
            b1,
            heads,
        })
    }

    pub fn features(&self, masks: &[&Tensor]) -> Result<Tensor> {
        if masks.iter().any(|m| m.shape() != [self.grid.height, self.grid.width]) {
            return Err(Error::InvalidShape {
                shape: masks.first().map(|m| m.shape().to_vec()).unwrap_or_default(),
                reason: format!("detector expects {}×{} masks", self.grid.height, self.grid.width),
            });
        }
        pooled_features(masks, self.pool)
    }

    /// `features` is `B × F` from [`features`](Self::features).
    pub fn forward<'t>(&self, p: &[Var<'t>], features: Var<'t>) -> Result<SeparableLogits<'t>> {
        let batch = features.shape()[0];
        let h = linear(features, p[self.w1], p[self.b1])?.relu();
        let lens = [self.grid.depth, self.grid.height, self.grid.width];
        let mut out = Vec::with_capacity(3);
        for (&(w, b), len) in self.heads.iter().zip(lens) {
            out.push(linear(h, p[w], p[b])?.reshape(&[batch * self.joints, len])?);
        }
        Ok(SeparableLogits {
            depth: out[0],
            rows: out[1],
            cols: out[2],
        })
    }
}

/// Two-layer perceptron reconstructing the body mask from the rendered
/// skeleton mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysiqueNet {
    pub store: ParamStore,
    pub size: usize,
}

impl PhysiqueNet {
    pub fn init(cfg: &MaskConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.size * cfg.size;
        let mut store = ParamStore::new();
        store.add("physique.w1", glorot_uniform(n, cfg.physique_hidden, &mut rng));
        store.add("physique.b1", Tensor::zeros(&[cfg.physique_hidden])?);
        store.add("physique.w2", glorot_uniform(cfg.physique_hidden, n, &mut rng));
        store.add("physique.b2", Tensor::zeros(&[n])?);
        Ok(Self { store, size: cfg.size })
    }

    /// `B × size²` skeleton masks to `B × size²` values in (0, 1).
    pub fn forward<'t>(&self, p: &[Var<'t>], skeleton: Var<'t>) -> Result<Var<'t>> {
        let h = linear(skeleton, p[0], p[1])?.relu();
        Ok(linear(h, p[2], p[3])?.sigmoid())
    }
}

/// Box-filters a square mask down to `size × size`, flattened.
pub fn downsample(mask: &Tensor, size: usize) -> Result<Vec<f64>> {
    let n = mask.shape()[0];
    if size == 0 || n % size != 0 {
        return Err(Error::InvalidArgument(format!("cannot downsample {n} pixels to {size}")));
    }
    Ok(pooled_features(&[mask], n / size)?.data().to_vec())
}
