//! Skeleton topology, bone extraction and the keypoint/bone graph pair the
//! discriminator consumes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HUMAN18: &str = include_str!("../data/human18.toml");

/// Joint tree: names, parent→child edges and template bone lengths (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    names: Vec<String>,
    edges: Vec<(usize, usize)>,
    lengths: Vec<f64>,
    root: usize,
    parent: Vec<Option<usize>>,
    /// Incoming edge index per joint (`None` for the root).
    parent_edge: Vec<Option<usize>>,
    /// Joints ordered so that every parent precedes its children.
    order: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct BoneEntry {
    pub parent: String,
    pub child: String,
    pub length: f64,
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
    #[serde(default)]
    pub shape: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct SkeletonSection {
    #[serde(default)]
    pub root: Option<String>,
    pub joints: Vec<String>,
    pub bones: Vec<BoneEntry>,
}

#[derive(Deserialize)]
struct SkeletonFile {
    skeleton: SkeletonSection,
}

impl SkeletonTopology {
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>, lengths: Vec<f64>) -> Result<Self> {
        let j = names.len();
        if j == 0 {
            return Err(Error::Topology("no joints".into()));
        }
        if edges.len() != j - 1 {
            return Err(Error::Topology(format!("{} joints need {} edges, got {}", j, j - 1, edges.len())));
        }
        if lengths.len() != edges.len() {
            return Err(Error::Topology(format!("{} lengths for {} edges", lengths.len(), edges.len())));
        }
        if let Some(l) = lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::Topology(format!("bone length must be positive, got {l}")));
        }
        let mut parent = vec![None; j];
        let mut parent_edge = vec![None; j];
        for (e, &(p, c)) in edges.iter().enumerate() {
            if p >= j || c >= j {
                return Err(Error::Topology(format!("edge ({p}, {c}) references a joint outside 0..{j}")));
            }
            if p == c {
                return Err(Error::Topology(format!("self-loop at joint {p}")));
            }
            if parent[c].is_some() {
                return Err(Error::Topology(format!("joint {} has two parents", names[c])));
            }
            parent[c] = Some(p);
            parent_edge[c] = Some(e);
        }
        let roots: Vec<usize> = (0..j).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Topology(format!("expected one root, found {}", roots.len())));
        }
        let root = roots[0];

        let mut children = vec![Vec::new(); j];
        for &(p, c) in &edges {
            children[p].push(c);
        }
        let mut order = Vec::with_capacity(j);
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(children[v].iter().rev());
        }
        if order.len() != j {
            return Err(Error::Topology("edges do not form a connected tree".into()));
        }
        Ok(Self {
            names,
            edges,
            lengths,
            root,
            parent,
            parent_edge,
            order,
        })
    }

    pub(crate) fn from_section(section: &SkeletonSection) -> Result<Self> {
        let index = |name: &str| {
            section
                .joints
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Topology(format!("unknown joint {name:?}")))
        };
        let edges = section
            .bones
            .iter()
            .map(|b| Ok((index(&b.parent)?, index(&b.child)?)))
            .collect::<Result<Vec<_>>>()?;
        let lengths = section.bones.iter().map(|b| b.length).collect();
        let topo = Self::new(section.joints.clone(), edges, lengths)?;
        if let Some(root) = &section.root {
            if index(root)? != topo.root {
                return Err(Error::Topology(format!("declared root {root:?} has a parent")));
            }
        }
        Ok(topo)
    }

    /// Parses the `[skeleton]` section of a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_section(&file.skeleton)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The bundled 18-joint human skeleton rooted at the pelvis.
    pub fn human18() -> Self {
        Self::from_toml_str(HUMAN18).expect("bundled skeleton is valid")
    }

    pub(crate) fn human18_source() -> &'static str {
        HUMAN18
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn bone_count(&self) -> usize {
        self.edges.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn template_lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn parent_edge(&self, joint: usize) -> Option<usize> {
        self.parent_edge[joint]
    }

    /// Root-first traversal order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Joints in the subtree rooted at `joint` (inclusive).
    pub fn subtree(&self, joint: usize) -> Vec<usize> {
        let mut out = vec![joint];
        let mut i = 0;
        while i < out.len() {
            let v = out[i];
            out.extend(self.edges.iter().filter(|e| e.0 == v).map(|e| e.1));
            i += 1;
        }
        out
    }

    pub fn joint_degree(&self, joint: usize) -> usize {
        self.edges.iter().filter(|&&(p, c)| p == joint || c == joint).count()
    }
}

/// A 3D pose in millimetres, one point per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn translated(&self, v: [f64; 3]) -> Self {
        Self::new(self.joints.iter().map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }
}

/// Dense symmetric boolean adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn connect(&mut self, a: usize, b: usize) {
        self.bits[a * self.n + b] = true;
        self.bits[b * self.n + a] = true;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.n + b]
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.n).filter(|&u| self.get(v, u)).collect()
    }

    pub fn degree(&self, v: usize) -> usize {
        (0..self.n).filter(|&u| self.get(v, u)).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|a| (0..self.n).all(|b| self.get(a, b) == self.get(b, a)))
    }

    pub fn has_empty_diagonal(&self) -> bool {
        (0..self.n).all(|a| !self.get(a, a))
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Keypoint graph plus bone (line) graph for one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGraphInput {
    pub keypoint_nodes: Vec<[f64; 3]>,
    pub keypoint_adjacency: Adjacency,
    pub bone_nodes: Vec<[f64; 3]>,
    pub bone_adjacency: Adjacency,
}

fn check_pose(p: &Pose3D, t: &SkeletonTopology) -> Result<()> {
    if p.len() != t.joint_count() {
        return Err(Error::Topology(format!(
            "pose has {} joints, topology has {}",
            p.len(),
            t.joint_count()
        )));
    }
    Ok(())
}

/// One vector per edge, child minus parent.
pub fn bones_from_pose(p: &Pose3D, t: &SkeletonTopology) -> Result<Vec<[f64; 3]>> {
    check_pose(p, t)?;
    Ok(t.edges
        .iter()
        .map(|&(a, b)| {
            let (pa, pb) = (p.joints[a], p.joints[b]);
            [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]]
        })
        .collect())
}

pub fn root_center(p: &Pose3D, root: usize) -> Result<Pose3D> {
    let r = *p.joints.get(root).ok_or(Error::IndexOutOfRange {
        index: root,
        len: p.len(),
    })?;
    Ok(p.translated([-r[0], -r[1], -r[2]]))
}

/// Symmetrized skeleton edges.
pub fn keypoint_adjacency(t: &SkeletonTopology) -> Adjacency {
    let mut adj = Adjacency::new(t.joint_count());
    for &(a, b) in &t.edges {
        adj.connect(a, b);
    }
    adj
}

/// Line graph of the skeleton: bones are adjacent when they share a joint.
pub fn bone_adjacency(t: &SkeletonTopology) -> Adjacency {
    let m = t.bone_count();
    let mut adj = Adjacency::new(m);
    for e in 0..m {
        for f in e + 1..m {
            let (a, b) = t.edges[e];
            let (c, d) = t.edges[f];
            if a == c || a == d || b == c || b == d {
                adj.connect(e, f);
            }
        }
    }
    adj
}

pub fn build_dual_graph(p: &Pose3D, t: &SkeletonTopology) -> Result<DualGraphInput> {
    check_pose(p, t)?;
    Ok(DualGraphInput {
        keypoint_nodes: root_center(p, t.root)?.joints,
        keypoint_adjacency: keypoint_adjacency(t),
        bone_nodes: bones_from_pose(p, t)?,
        bone_adjacency: bone_adjacency(t),
    })
}
