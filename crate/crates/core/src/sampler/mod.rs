//! Synthetic pose generation: truncated-Gaussian joint parameters, a
//! kinematic-chain body model, pinhole projection and skeleton-mask
//! rendering.
//!
//! The body model is a bone tree. Each articulated joint carries an
//! axis-angle vector (degrees) that rotates every bone hanging below it;
//! shape coefficients scale bone lengths linearly.

mod camera;
mod render;

pub use camera::{CameraModel, HeatmapFrame};
pub use render::{render_skeleton_mask, render_skeleton_mask_on_tape, write_pgm, SkeletonRender};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, SkeletonSection, SkeletonTopology};

/// Draw budget for a single truncated-Gaussian value.
const MAX_DRAWS: usize = 100_000;

/// SplitMix64 finalizer over a seed and a stream index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gaussian `N(mu, sigma²)` conditioned on `[mu − gamma_l, mu + gamma_u]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussianSpec {
    pub mu: f64,
    pub sigma: f64,
    pub gamma_l: f64,
    pub gamma_u: f64,
}

impl TruncatedGaussianSpec {
    /// Interval `[mu − a, mu + b]` with `sigma = (a + b) / 4`.
    pub fn from_widths(mu: f64, a: f64, b: f64) -> Result<Self> {
        let s = Self {
            mu,
            sigma: (a + b) / 4.0,
            gamma_l: a,
            gamma_u: b,
        };
        s.validate()?;
        Ok(s)
    }

    /// Absolute interval `[lo, hi]` centred on its midpoint.
    pub fn from_interval(lo: f64, hi: f64) -> Result<Self> {
        Self::from_widths(0.5 * (lo + hi), 0.5 * (hi - lo), 0.5 * (hi - lo))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mu.is_finite()
            && self.sigma.is_finite()
            && self.sigma > 0.0
            && self.gamma_l >= 0.0
            && self.gamma_u >= 0.0
            && (self.gamma_l + self.gamma_u) > 0.0
            && (self.gamma_l + self.gamma_u).is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid truncated Gaussian {self:?}")))
        }
    }

    pub fn lower(&self) -> f64 {
        self.mu - self.gamma_l
    }

    pub fn upper(&self) -> f64 {
        self.mu + self.gamma_u
    }

    /// Mirror image across the rest value: the interval becomes `[mu − b, mu + a]`.
    pub fn mirrored(&self) -> Self {
        Self {
            gamma_l: self.gamma_u,
            gamma_u: self.gamma_l,
            ..*self
        }
    }

    /// Rejection sampler. Narrow intervals (width up to `2σ`) use a uniform
    /// proposal accepted with the Gaussian density ratio; wider ones draw
    /// from the Gaussian itself. Both keep the acceptance rate above 0.3.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let (lo, hi) = (self.lower(), self.upper());
        let narrow = hi - lo <= 2.0 * self.sigma;
        for _ in 0..MAX_DRAWS {
            if narrow {
                let x = lo + (hi - lo) * rng.gen::<f64>();
                let t = (x - self.mu) / self.sigma;
                if rng.gen::<f64>() < (-0.5 * t * t).exp() {
                    return Ok(x);
                }
            } else {
                let z: f64 = rng.sample(StandardNormal);
                let x = self.mu + self.sigma * z;
                if (lo..=hi).contains(&x) {
                    return Ok(x);
                }
            }
        }
        Err(Error::SamplingExhausted {
            attempts: MAX_DRAWS,
            reason: format!("no draw landed in [{lo}, {hi}]"),
        })
    }
}

/// One truncated-Gaussian draw from an explicit seed.
pub fn sample_truncated_gaussian(spec: &TruncatedGaussianSpec, seed: u64) -> Result<f64> {
    spec.sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Sampling ranges for one articulated joint, per rotation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Articulation {
    pub joint: usize,
    pub axes: [TruncatedGaussianSpec; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParamSpec {
    pub articulations: Vec<Articulation>,
    pub rest_probability: f64,
    pub shape: Vec<TruncatedGaussianSpec>,
    pub global_rotation: [TruncatedGaussianSpec; 3],
}

#[derive(Debug, Clone, Deserialize)]
struct ArticulationEntry {
    joint: String,
    #[serde(default)]
    widths: Option<[[f64; 2]; 3]>,
    #[serde(default)]
    mirror_of: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct ShapeEntry {
    count: usize,
    width: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
struct PoseSpecSection {
    rest_probability: f64,
    shape: ShapeEntry,
    global_rotation: [[f64; 2]; 3],
    articulations: Vec<ArticulationEntry>,
}

#[derive(Debug, Clone, Deserialize)]
struct BodyFile {
    skeleton: SkeletonSection,
    pose_spec: PoseSpecSection,
}

fn parse_body(text: &str) -> Result<BodyFile> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

impl PoseParamSpec {
    fn from_section(section: &PoseSpecSection, topology: &SkeletonTopology) -> Result<Self> {
        let index = |name: &str| {
            topology
                .joint_index(name)
                .ok_or_else(|| Error::Config(format!("articulation names unknown joint {name:?}")))
        };
        let mut by_name: Vec<(String, [TruncatedGaussianSpec; 3])> = Vec::new();
        let mut articulations = Vec::new();
        for entry in &section.articulations {
            let axes = match (&entry.widths, &entry.mirror_of) {
                (Some(w), None) => [
                    TruncatedGaussianSpec::from_widths(0.0, w[0][0], w[0][1])?,
                    TruncatedGaussianSpec::from_widths(0.0, w[1][0], w[1][1])?,
                    TruncatedGaussianSpec::from_widths(0.0, w[2][0], w[2][1])?,
                ],
                (None, Some(src)) => {
                    let (_, a) = by_name
                        .iter()
                        .find(|(n, _)| n == src)
                        .ok_or_else(|| Error::Config(format!("{} mirrors {src:?}, which is not listed earlier", entry.joint)))?;
                    [a[0], a[1].mirrored(), a[2].mirrored()]
                }
                _ => {
                    return Err(Error::Config(format!(
                        "articulation {} needs exactly one of widths or mirror_of",
                        entry.joint
                    )))
                }
            };
            let joint = index(&entry.joint)?;
            if articulations.iter().any(|a: &Articulation| a.joint == joint) {
                return Err(Error::Config(format!("articulation {} listed twice", entry.joint)));
            }
            by_name.push((entry.joint.clone(), axes));
            articulations.push(Articulation { joint, axes });
        }
        let [a, b] = section.shape.width;
        let shape = (0..section.shape.count)
            .map(|_| TruncatedGaussianSpec::from_widths(0.0, a, b))
            .collect::<Result<Vec<_>>>()?;
        let g = section.global_rotation;
        let spec = Self {
            articulations,
            rest_probability: section.rest_probability,
            shape,
            global_rotation: [
                TruncatedGaussianSpec::from_interval(g[0][0], g[0][1])?,
                TruncatedGaussianSpec::from_interval(g[1][0], g[1][1])?,
                TruncatedGaussianSpec::from_interval(g[2][0], g[2][1])?,
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_str(text: &str, topology: &SkeletonTopology) -> Result<Self> {
        Self::from_section(&parse_body(text)?.pose_spec, topology)
    }

    pub fn human18() -> Self {
        Self::from_toml_str(SkeletonTopology::human18_source(), &SkeletonTopology::human18()).expect("bundled pose spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rest_probability) {
            return Err(Error::InvalidArgument(format!("rest probability {} outside [0, 1]", self.rest_probability)));
        }
        for s in self.articulations.iter().flat_map(|a| a.axes.iter()).chain(&self.shape).chain(&self.global_rotation) {
            s.validate()?;
        }
        Ok(())
    }
}

/// A sampled body configuration. Angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub global: [f64; 3],
    /// Axis-angle vector per joint; zero for joints that do not articulate.
    pub rotations: Vec<[f64; 3]>,
    pub shape: Vec<f64>,
}

impl PoseParams {
    pub fn rest(joints: usize, shape_count: usize) -> Self {
        Self {
            global: [0.0; 3],
            rotations: vec![[0.0; 3]; joints],
            shape: vec![0.0; shape_count],
        }
    }

    /// Global rotation, then per-joint rotations, then shape.
    pub fn to_vec(&self) -> Vec<f64> {
        self.global
            .iter()
            .chain(self.rotations.iter().flatten())
            .chain(&self.shape)
            .copied()
            .collect()
    }
}

fn sample_pose_params_with<R: Rng + ?Sized>(spec: &PoseParamSpec, joints: usize, rng: &mut R) -> Result<PoseParams> {
    let mut p = PoseParams::rest(joints, spec.shape.len());
    for (k, s) in spec.global_rotation.iter().enumerate() {
        p.global[k] = s.sample(rng)?;
    }
    for a in &spec.articulations {
        if a.joint >= joints {
            return Err(Error::IndexOutOfRange { index: a.joint, len: joints });
        }
        for (k, s) in a.axes.iter().enumerate() {
            p.rotations[a.joint][k] = if rng.gen::<f64>() < spec.rest_probability { s.mu } else { s.sample(rng)? };
        }
    }
    for (k, s) in spec.shape.iter().enumerate() {
        p.shape[k] = s.sample(rng)?;
    }
    Ok(p)
}

/// Draws body parameters for a skeleton with `joints` joints.
pub fn sample_pose_params(spec: &PoseParamSpec, joints: usize, seed: u64) -> Result<PoseParams> {
    spec.validate()?;
    sample_pose_params_with(spec, joints, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Rest bone directions and length sensitivities over a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTemplate {
    pub topology: SkeletonTopology,
    pub rest_directions: Vec<[f64; 3]>,
    pub shape_basis: Vec<Vec<f64>>,
}

impl KinematicTemplate {
    pub fn new(topology: SkeletonTopology, rest_directions: Vec<[f64; 3]>, shape_basis: Vec<Vec<f64>>) -> Result<Self> {
        let bones = topology.bone_count();
        if rest_directions.len() != bones || shape_basis.len() != bones {
            return Err(Error::Topology(format!(
                "{bones} bones but {} directions and {} shape rows",
                rest_directions.len(),
                shape_basis.len()
            )));
        }
        for (e, d) in rest_directions.iter().enumerate() {
            let n = norm(*d);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Topology(format!("rest direction of bone {e} has norm {n}")));
            }
        }
        let width = shape_basis.first().map_or(0, Vec::len);
        if shape_basis.iter().any(|r| r.len() != width) {
            return Err(Error::Topology("shape basis rows differ in length".into()));
        }
        Ok(Self {
            topology,
            rest_directions,
            shape_basis,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file = parse_body(text)?;
        let topology = SkeletonTopology::from_section(&file.skeleton)?;
        let mut dirs = Vec::new();
        let mut basis = Vec::new();
        for b in &file.skeleton.bones {
            let d = b
                .direction
                .ok_or_else(|| Error::Config(format!("bone {}-{} has no rest direction", b.parent, b.child)))?;
            let n = norm(d);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Config(format!("bone {}-{} has a degenerate direction", b.parent, b.child)));
            }
            dirs.push(d.map(|v| v / n));
            basis.push(b.shape.clone());
        }
        let t = Self::new(topology, dirs, basis)?;
        t.check_shape_bounds(&PoseParamSpec::from_section(&file.pose_spec, &t.topology)?)?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PoseParamSpec)> {
        let text = std::fs::read_to_string(path)?;
        let t = Self::from_toml_str(&text)?;
        let spec = PoseParamSpec::from_toml_str(&text, &t.topology)?;
        Ok((t, spec))
    }

    pub fn human18() -> Self {
        Self::from_toml_str(SkeletonTopology::human18_source()).expect("bundled template is valid")
    }

    pub fn shape_count(&self) -> usize {
        self.shape_basis.first().map_or(0, Vec::len)
    }

    /// Fails if some corner of the shape box gives a non-positive bone.
    pub fn check_shape_bounds(&self, spec: &PoseParamSpec) -> Result<()> {
        if spec.shape.len() != self.shape_count() {
            return Err(Error::Config(format!(
                "{} shape coefficients against a basis of width {}",
                spec.shape.len(),
                self.shape_count()
            )));
        }
        for (e, row) in self.shape_basis.iter().enumerate() {
            let worst: f64 = row
                .iter()
                .zip(&spec.shape)
                .map(|(s, g)| (s * g.lower()).min(s * g.upper()))
                .sum();
            if 1.0 + worst <= 0.0 {
                return Err(Error::Config(format!("bone {e} collapses within the shape bounds")));
            }
        }
        Ok(())
    }

    /// Bone lengths after applying shape coefficients.
    pub fn bone_lengths(&self, shape: &[f64]) -> Result<Vec<f64>> {
        if shape.len() != self.shape_count() {
            return Err(Error::ShapeMismatch {
                op: "bone_lengths",
                lhs: vec![self.shape_count()],
                rhs: vec![shape.len()],
            });
        }
        self.topology
            .template_lengths()
            .iter()
            .zip(&self.shape_basis)
            .enumerate()
            .map(|(e, (l, row))| {
                let scale = 1.0 + row.iter().zip(shape).map(|(a, b)| a * b).sum::<f64>();
                if scale > 0.0 && scale.is_finite() {
                    Ok(l * scale)
                } else {
                    Err(Error::InvalidArgument(format!("shape collapses bone {e}")))
                }
            })
            .collect()
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Rotation matrix of an axis-angle vector given in degrees.
pub fn rodrigues(axis_angle_deg: [f64; 3]) -> Result<Mat3> {
    let w = axis_angle_deg.map(f64::to_radians);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("rotation {axis_angle_deg:?}")));
    }
    let theta = norm(w);
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if theta < 1e-12 {
        return Ok(r);
    }
    let k = w.map(|v| v / theta);
    let (s, c) = theta.sin_cos();
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * kx[i][j] + (1.0 - c) * (k[i] * k[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    Ok(r)
}

/// Joint positions with the root at the origin.
pub fn forward_kinematics(params: &PoseParams, template: &KinematicTemplate) -> Result<Pose3D> {
    let topo = &template.topology;
    let j = topo.joint_count();
    if params.rotations.len() != j {
        return Err(Error::ShapeMismatch {
            op: "forward_kinematics",
            lhs: vec![j, 3],
            rhs: vec![params.rotations.len(), 3],
        });
    }
    let lengths = template.bone_lengths(&params.shape)?;
    let mut global = vec![[[0.0; 3]; 3]; j];
    let mut pos = vec![[0.0; 3]; j];
    for &v in topo.order() {
        let local = rodrigues(params.rotations[v])?;
        match topo.parent(v) {
            None => global[v] = mat_mul(&rodrigues(params.global)?, &local),
            Some(p) => {
                let e = topo.parent_edge(v).expect("non-root joint has an edge");
                let d = template.rest_directions[e];
                let off = mat_vec(&global[p], [d[0] * lengths[e], d[1] * lengths[e], d[2] * lengths[e]]);
                pos[v] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
                global[v] = mat_mul(&global[p], &local);
            }
        }
    }
    Ok(Pose3D::new(pos))
}

/// Camera placement and image settings for synthetic pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub image_size: usize,
    pub depth_bins: usize,
    /// Capsule radius of rendered bones, in pixels.
    pub thickness: f64,
    /// Range of the root's distance from the camera (mm).
    pub root_depth: [f64; 2],
    /// Maximum sideways offset of the root (mm).
    pub lateral: f64,
    /// Fraction of the image size kept free at each border.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            image_size: 64,
            depth_bins: 64,
            thickness: 1.5,
            root_depth: [4800.0, 6000.0],
            lateral: 150.0,
            margin: 0.05,
            max_attempts: 100,
        }
    }
}

impl SynthSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 4
            && self.depth_bins >= 3
            && self.thickness > 0.0
            && self.root_depth[0] > 0.0
            && self.root_depth[1] >= self.root_depth[0]
            && self.lateral >= 0.0
            && (0.0..0.5).contains(&self.margin)
            && self.max_attempts > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid synthesis settings {self:?}")))
        }
    }
}

/// A generated training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub seed: u64,
    pub params: PoseParams,
    /// Camera-frame joints (mm).
    pub pose3d: Pose3D,
    pub pose2d: Vec<[f64; 2]>,
    /// `image_size × image_size` skeleton mask.
    pub mask: Tensor,
    pub frame: HeatmapFrame,
    pub heatmap_coords: Vec<[f64; 3]>,
}

/// Samples a pose, places it in front of the camera, projects and renders it.
/// Placements that leave the image (with margin) or the depth range are
/// redrawn from a derived seed.
pub fn make_synthetic_pair(
    spec: &PoseParamSpec,
    template: &KinematicTemplate,
    cam: &CameraModel,
    settings: &SynthSettings,
    seed: u64,
) -> Result<SynthSample> {
    spec.validate()?;
    cam.validate()?;
    settings.validate()?;
    let topo = &template.topology;
    let size = settings.image_size as f64;
    let (lo, hi) = (settings.margin * size, size - 1.0 - settings.margin * size);
    let mut last = String::new();
    for attempt in 0..settings.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt as u64));
        let params = sample_pose_params_with(spec, topo.joint_count(), &mut rng)?;
        let body = forward_kinematics(&params, template)?;
        let depth = settings.root_depth[0] + (settings.root_depth[1] - settings.root_depth[0]) * rng.gen::<f64>();
        let ox = settings.lateral * (2.0 * rng.gen::<f64>() - 1.0);
        let oy = settings.lateral * (2.0 * rng.gen::<f64>() - 1.0);
        let pose3d = cam.to_camera(&body.translated([ox, oy, depth]));
        let root = pose3d.joints[topo.root()];
        if let Some(z) = pose3d.joints.iter().map(|p| p[2]).find(|z| *z <= 0.0) {
            last = format!("joint behind the camera (z = {z})");
            continue;
        }
        let pose2d = cam.project(&pose3d)?;
        if let Some(p) = pose2d.iter().find(|p| p.iter().any(|c| *c < lo || *c > hi)) {
            last = format!("joint at {p:?} outside [{lo}, {hi}]");
            continue;
        }
        let frame = HeatmapFrame::new(cam, root[2], settings.depth_bins)?;
        let heatmap_coords = frame.to_heatmap(&pose3d)?;
        let max_z = (settings.depth_bins - 1) as f64;
        if let Some(p) = heatmap_coords.iter().find(|p| p[2] < 0.0 || p[2] > max_z) {
            last = format!("heatmap depth {} outside [0, {max_z}]", p[2]);
            continue;
        }
        let mask = render_skeleton_mask(&pose2d, topo.edges(), settings.thickness, settings.image_size, settings.image_size)?;
        return Ok(SynthSample {
            seed,
            params,
            pose3d,
            pose2d,
            mask,
            frame,
            heatmap_coords,
        });
    }
    Err(Error::SamplingExhausted {
        attempts: settings.max_attempts,
        reason: format!("seed {seed}: last rejection: {last}"),
    })
}
