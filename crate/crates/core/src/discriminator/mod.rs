//! Dual-graph GraphSAGE discriminator.
//!
//! Two branches share one design: the keypoint graph (root-centred joints on
//! the skeleton) and the bone graph (bone vectors on the skeleton's line
//! graph). Each node gets a one-hot index appended, is lifted to the hidden
//! width, passes through residual blocks of
//! `sage → layer norm → ReLU → sage → layer norm → ReLU`, and a final SAGE
//! layer. Both branches are flattened in node order, concatenated, and
//! scored by a `Linear → ReLU → Linear` header. Weight matrices are stored
//! `in × out`.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{concat, glorot_uniform, linear, CustomOp, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{bone_adjacency, keypoint_adjacency, Adjacency, DualGraphInput, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub n_blocks: usize,
    /// Width of the last SAGE layer in each branch.
    pub final_width: usize,
    pub header_width: usize,
    /// Multiplier applied to node coordinates on input.
    pub input_scale: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            n_blocks: 2,
            final_width: 16,
            header_width: 128,
            input_scale: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.final_width == 0 || self.header_width == 0 || !(self.input_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }
}

/// Mean over graph neighbours for a batch of identical graphs stored as
/// consecutive `nodes`-row blocks. Isolated nodes aggregate to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAggregate {
    neighbors: Vec<Vec<usize>>,
}

impl MeanAggregate {
    pub fn new(adj: &Adjacency) -> Result<Self> {
        if !adj.is_symmetric() || !adj.has_empty_diagonal() {
            return Err(Error::Topology("adjacency must be symmetric with an empty diagonal".into()));
        }
        Ok(Self {
            neighbors: (0..adj.len()).map(|v| adj.neighbors(v)).collect(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.neighbors.len()
    }

    fn run(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        let s = x.shape();
        let n = self.nodes();
        if s.len() != 2 || n == 0 || s[0] % n != 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("expected (B·{n}) × d node features"),
            });
        }
        let d = s[1];
        let mut out = Tensor::zeros(s)?;
        let (src, dst) = (x.data(), out.data_mut());
        for b in 0..s[0] / n {
            for (v, nb) in self.neighbors.iter().enumerate() {
                if nb.is_empty() {
                    continue;
                }
                let w = 1.0 / nb.len() as f64;
                for &u in nb {
                    // forward gathers x[u] into v; the adjoint scatters g[v] back to u
                    let (from, to) = if transpose { (v, u) } else { (u, v) };
                    let (fi, ti) = ((b * n + from) * d, (b * n + to) * d);
                    for k in 0..d {
                        dst[ti + k] += w * src[fi + k];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let out = self.run(&x.value(), false)?;
        Ok(x.tape().custom(&[x], out, Rc::new(self.clone())))
    }
}

impl CustomOp for MeanAggregate {
    fn name(&self) -> &'static str {
        "mean_aggregate"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.run(grad_out, true)?)])
    }
}

/// `x·w_self + mean_neighbours(x)·w_neigh + bias`.
pub fn sage_conv<'t>(x: Var<'t>, agg: &MeanAggregate, w_self: Var<'t>, w_neigh: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w_self)?.add(agg.apply(x)?.matmul(w_neigh)?)?.add_row(bias)
}

/// Parameter indices of one SAGE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SageLayer {
    pub w_self: usize,
    pub w_neigh: usize,
    pub bias: usize,
}

impl SageLayer {
    fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_self: store.add(format!("{name}.w_self"), glorot_uniform(d_in, d_out, rng)),
            w_neigh: store.add(format!("{name}.w_neigh"), glorot_uniform(d_in, d_out, rng)),
            bias: store.add(format!("{name}.bias"), zeros(d_out)),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, agg: &MeanAggregate) -> Result<Var<'t>> {
        sage_conv(x, agg, p[self.w_self], p[self.w_neigh], p[self.bias])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0).expect("valid shape")),
            bias: store.add(format!("{name}.bias"), zeros(d)),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm().mul_row(p[self.gain])?.add_row(p[self.bias])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphBlock {
    pub sage1: SageLayer,
    pub norm1: Norm,
    pub sage2: SageLayer,
    pub norm2: Norm,
}

impl GraphBlock {
    /// `x + ReLU(LN(sage₂(ReLU(LN(sage₁(x))))))`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, agg: &MeanAggregate) -> Result<Var<'t>> {
        let h = self.norm1.forward(p, self.sage1.forward(p, x, agg)?)?.relu();
        let h = self.norm2.forward(p, self.sage2.forward(p, h, agg)?)?.relu();
        x.add(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot_uniform(d_in, d_out, rng)),
            b: store.add(format!("{name}.b"), zeros(d_out)),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        linear(x, p[self.w], p[self.b])
    }
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n]).expect("valid shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub agg: MeanAggregate,
    pub lift: Dense,
    pub blocks: Vec<GraphBlock>,
    pub final_conv: SageLayer,
}

impl Branch {
    fn init(store: &mut ParamStore, name: &str, adj: &Adjacency, cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = adj.len();
        let lift = Dense::init(store, &format!("{name}.lift"), 3 + n, cfg.hidden, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| GraphBlock {
                sage1: SageLayer::init(store, &format!("{name}.block{i}.sage1"), cfg.hidden, cfg.hidden, rng),
                norm1: Norm::init(store, &format!("{name}.block{i}.norm1"), cfg.hidden),
                sage2: SageLayer::init(store, &format!("{name}.block{i}.sage2"), cfg.hidden, cfg.hidden, rng),
                norm2: Norm::init(store, &format!("{name}.block{i}.norm2"), cfg.hidden),
            })
            .collect();
        let final_conv = SageLayer::init(store, &format!("{name}.final"), cfg.hidden, cfg.final_width, rng);
        Ok(Self {
            agg: MeanAggregate::new(adj)?,
            lift,
            blocks,
            final_conv,
        })
    }

    /// `(B·N) × 3` node coordinates to `B × (N·final_width)`.
    fn forward<'t>(&self, p: &[Var<'t>], nodes: Var<'t>, cfg: &DiscriminatorConfig) -> Result<Var<'t>> {
        let n = self.agg.nodes();
        let rows = nodes.shape()[0];
        let batch = rows / n;
        let mut onehot = vec![0.0; rows * n];
        for r in 0..rows {
            onehot[r * n + r % n] = 1.0;
        }
        let tape = nodes.tape();
        let x = concat(&[nodes.scale(cfg.input_scale), tape.constant(Tensor::new(&[rows, n], onehot)?)], 1)?;
        let mut h = self.lift.forward(p, x)?;
        for block in &self.blocks {
            h = block.forward(p, h, &self.agg)?;
        }
        self.final_conv.forward(p, h, &self.agg)?.reshape(&[batch, n * cfg.final_width])
    }
}

/// Discriminator layout plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore,
    edges: Vec<(usize, usize)>,
    root: usize,
    joints: usize,
    pub keypoint: Branch,
    pub bone: Branch,
    pub header1: Dense,
    pub header2: Dense,
}

impl Discriminator {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(topology: &SkeletonTopology, cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (j, m) = (topology.joint_count(), topology.bone_count());
        if m == 0 {
            return Err(Error::Topology("discriminator needs at least one bone".into()));
        }
        let keypoint = Branch::init(&mut store, "disc.kp", &keypoint_adjacency(topology), &cfg, &mut rng)?;
        let bone = Branch::init(&mut store, "disc.bone", &bone_adjacency(topology), &cfg, &mut rng)?;
        let header1 = Dense::init(&mut store, "disc.header1", (j + m) * cfg.final_width, cfg.header_width, &mut rng);
        let header2 = Dense::init(&mut store, "disc.header2", cfg.header_width, 1, &mut rng);
        Ok(Self {
            cfg,
            store,
            edges: topology.edges().to_vec(),
            root: topology.root(),
            joints: j,
            keypoint,
            bone,
            header1,
            header2,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Scores from explicit node features: `(B·J) × 3` keypoints and
    /// `(B·(J−1)) × 3` bones. Returns `B × 1`.
    pub fn forward_nodes<'t>(&self, p: &[Var<'t>], keypoints: Var<'t>, bones: Var<'t>) -> Result<Var<'t>> {
        let (ks, bs) = (keypoints.shape(), bones.shape());
        let m = self.edges.len();
        if ks.len() != 2 || bs.len() != 2 || ks[1] != 3 || bs[1] != 3 || ks[0] % self.joints != 0 || ks[0] / self.joints * m != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                lhs: ks,
                rhs: bs,
            });
        }
        let fk = self.keypoint.forward(p, keypoints, &self.cfg)?;
        let fb = self.bone.forward(p, bones, &self.cfg)?;
        let h = self.header1.forward(p, concat(&[fk, fb], 1)?)?.relu();
        self.header2.forward(p, h)
    }

    /// Scores raw poses given as `(B·J) × 3`; root-centring and bone vectors
    /// are built on the tape so gradients reach the joints.
    pub fn forward_poses<'t>(&self, p: &[Var<'t>], poses: Var<'t>) -> Result<Var<'t>> {
        let s = poses.shape();
        if s.len() != 2 || s[1] != 3 || s[0] % self.joints != 0 || s[0] == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("expected (B·{}) × 3 joints", self.joints),
            });
        }
        let batch = s[0] / self.joints;
        let j = self.joints;
        let roots: Vec<usize> = (0..batch).flat_map(|b| (0..j).map(move |_| b * j)).map(|r| r + self.root).collect();
        let centered = poses.sub(poses.gather_rows(&roots)?)?;
        let parents: Vec<usize> = (0..batch).flat_map(|b| self.edges.iter().map(move |e| b * j + e.0)).collect();
        let children: Vec<usize> = (0..batch).flat_map(|b| self.edges.iter().map(move |e| b * j + e.1)).collect();
        let bones = poses.gather_rows(&children)?.sub(poses.gather_rows(&parents)?)?;
        self.forward_nodes(p, centered, bones)
    }

    /// Score of a single dual graph.
    pub fn score(&self, g: &DualGraphInput) -> Result<f64> {
        if g.keypoint_nodes.len() != self.joints || g.bone_nodes.len() != self.edges.len() {
            return Err(Error::Topology("graph does not match the discriminator's skeleton".into()));
        }
        let expect_kp: Vec<Vec<usize>> = (0..g.keypoint_adjacency.len()).map(|v| g.keypoint_adjacency.neighbors(v)).collect();
        let expect_bone: Vec<Vec<usize>> = (0..g.bone_adjacency.len()).map(|v| g.bone_adjacency.neighbors(v)).collect();
        if expect_kp != self.keypoint.agg.neighbors || expect_bone != self.bone.agg.neighbors {
            return Err(Error::Topology("graph adjacency differs from the discriminator's skeleton".into()));
        }
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        let flat = |v: &[[f64; 3]]| Tensor::new(&[v.len(), 3], v.iter().flatten().copied().collect());
        let out = self.forward_nodes(&p, tape.constant(flat(&g.keypoint_nodes)?), tape.constant(flat(&g.bone_nodes)?))?;
        out.item()
    }
}
