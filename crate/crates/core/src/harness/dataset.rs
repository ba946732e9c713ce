//! Synthetic datasets on disk: a JSON index next to a file of fixed-size
//! little-endian records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::DataConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::sampler::{
    derive_seed, make_synthetic_pair, render_skeleton_mask, CameraModel, HeatmapFrame, KinematicTemplate, SynthSample,
};
use crate::skeleton::{Pose3D, SkeletonTopology};

pub const INDEX_FILE: &str = "index.json";
pub const RECORDS_FILE: &str = "records.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Base,
    /// Depth-reflected copy of the preceding record.
    Twin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub offset: u64,
    pub seed: u64,
    pub kind: RecordKind,
    pub pair: Option<usize>,
    /// Joints whose depth was reflected to build a twin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reflected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub joints: usize,
    pub image_size: usize,
    pub depth_bins: usize,
    pub camera: CameraModel,
    pub record_bytes: usize,
    pub entries: Vec<IndexEntry>,
}

/// One sample as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub pose3d: Pose3D,
    pub pose2d: Vec<[f64; 2]>,
    pub heatmap_coords: Vec<[f64; 3]>,
    /// `image_size × image_size`, stored as 32-bit floats.
    pub mask: Tensor,
    pub frame: HeatmapFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `n` records, keeping the index consistent.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let mut index = self.index.clone();
        index.entries.truncate(n);
        for e in &mut index.entries {
            if e.pair.is_some_and(|p| p >= n) {
                e.pair = None;
            }
        }
        index.count = n;
        Dataset {
            index,
            records: self.records[..n].to_vec(),
        }
    }

    /// Splits off the last `n` records.
    pub fn split_tail(&self, n: usize) -> (Dataset, Dataset) {
        let k = self.len().saturating_sub(n);
        let mut tail_index = self.index.clone();
        tail_index.entries = tail_index.entries.split_off(k);
        tail_index.count = self.len() - k;
        (
            self.head(k),
            Dataset {
                index: tail_index,
                records: self.records[k..].to_vec(),
            },
        )
    }
}

fn record_bytes(joints: usize, image_size: usize) -> usize {
    16 + joints * 8 * 8 + image_size * image_size * 4
}

impl Record {
    fn from_sample(s: &SynthSample) -> Self {
        Self {
            seed: s.seed,
            pose3d: s.pose3d.clone(),
            pose2d: s.pose2d.clone(),
            heatmap_coords: s.heatmap_coords.clone(),
            mask: s.mask.map(|v| v as f32 as f64),
            frame: s.frame,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.frame.root_depth.to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        self.pose3d.joints.iter().flatten().for_each(|v| put(*v));
        self.pose2d.iter().flatten().for_each(|v| put(*v));
        self.heatmap_coords.iter().flatten().for_each(|v| put(*v));
        for v in self.mask.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    fn read(bytes: &[u8], joints: usize, size: usize, cam: &CameraModel, depth_bins: usize) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &bytes[pos..pos + n];
            pos += n;
            s
        };
        let seed = u64::from_le_bytes(take(8).try_into().expect("8 bytes"));
        let mut f64s = |n: usize| -> Vec<f64> { (0..n).map(|_| f64::from_le_bytes(take(8).try_into().expect("8 bytes"))).collect() };
        let root_depth = f64s(1)[0];
        let p3 = f64s(joints * 3);
        let p2 = f64s(joints * 2);
        let hm = f64s(joints * 3);
        let mask: Vec<f64> = take(size * size * 4)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self {
            seed,
            pose3d: Pose3D::new(p3.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()),
            pose2d: p2.chunks(2).map(|c| [c[0], c[1]]).collect(),
            heatmap_coords: hm.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            mask: Tensor::new(&[size, size], mask)?,
            frame: HeatmapFrame::new(cam, root_depth, depth_bins)?,
        })
    }
}

/// Roots of the limb chains that can be depth-reflected: joints whose
/// subtree is a simple chain of at least two joints and whose parent
/// branches.
pub fn limb_pivots(t: &SkeletonTopology) -> Vec<usize> {
    let children = |v: usize| t.edges().iter().filter(|e| e.0 == v).count();
    (0..t.joint_count())
        .filter(|&j| {
            let Some(p) = t.parent(j) else { return false };
            let sub = t.subtree(j);
            children(p) >= 2 && sub.len() >= 3 && sub.iter().all(|&v| children(v) <= 1)
        })
        .collect()
}

/// Reflects the depth of every joint below each pivot about the plane
/// through that pivot parallel to the image. Image-plane coordinates are
/// untouched, so orthographic projections coincide.
pub fn reflect_limbs(pose: &Pose3D, t: &SkeletonTopology, pivots: &[usize]) -> (Pose3D, Vec<usize>) {
    let mut out = pose.clone();
    let mut moved = Vec::new();
    for &pv in pivots {
        let z0 = pose.joints[pv][2];
        for &v in t.subtree(pv).iter().skip(1) {
            out.joints[v][2] = 2.0 * z0 - pose.joints[v][2];
            moved.push(v);
        }
    }
    moved.sort_unstable();
    (out, moved)
}

/// Largest orthographic image-plane distance between two poses, in pixels
/// at the given scale.
pub fn orthographic_gap(a: &Pose3D, b: &Pose3D, pixels_per_mm: f64) -> f64 {
    a.joints
        .iter()
        .zip(&b.joints)
        .map(|(p, q)| pixels_per_mm * ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

struct Generator<'a> {
    template: &'a KinematicTemplate,
    cam: CameraModel,
    data: &'a DataConfig,
    pivots: Vec<usize>,
}

impl Generator<'_> {
    fn twin(&self, base: &SynthSample, rng: &mut ChaCha8Rng) -> Option<(Record, Vec<usize>)> {
        let s = &self.data.synth;
        let size = s.image_size as f64;
        let (lo, hi) = (s.margin * size, size - 1.0 - s.margin * size);
        let max_z = (s.depth_bins - 1) as f64;
        let topo = &self.template.topology;
        for _ in 0..32 {
            let mut chosen: Vec<usize> = self.pivots.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            if chosen.is_empty() {
                chosen.push(*self.pivots.choose(rng)?);
            }
            let (pose3d, moved) = reflect_limbs(&base.pose3d, topo, &chosen);
            let shift: f64 = moved.iter().map(|&v| (pose3d.joints[v][2] - base.pose3d.joints[v][2]).abs()).sum();
            if shift < 1.0 || orthographic_gap(&base.pose3d, &pose3d, base.frame.scale()) >= 1e-6 * size {
                continue;
            }
            if pose3d.joints.iter().any(|p| p[2] <= 0.0) {
                continue;
            }
            let Ok(pose2d) = self.cam.project(&pose3d) else { continue };
            if pose2d.iter().any(|p| p.iter().any(|c| *c < lo || *c > hi)) {
                continue;
            }
            let Ok(heatmap_coords) = base.frame.to_heatmap(&pose3d) else { continue };
            if heatmap_coords.iter().any(|p| p[2] < 0.0 || p[2] > max_z) {
                continue;
            }
            let mask = render_skeleton_mask(&pose2d, topo.edges(), s.thickness, s.image_size, s.image_size).ok()?;
            let rec = Record {
                seed: base.seed,
                pose3d,
                pose2d,
                heatmap_coords,
                mask: mask.map(|v| v as f32 as f64),
                frame: base.frame,
            };
            return Some((rec, chosen));
        }
        None
    }
}

/// Generates `n` records. With ambiguity pairs enabled, records come in
/// (base, twin) pairs where the twin reflects some limbs in depth; an odd
/// count ends with a lone base record.
pub fn generate(data: &DataConfig, n: usize, seed: u64) -> Result<Dataset> {
    let (template, spec) = data.load_skeleton()?;
    template.check_shape_bounds(&spec)?;
    let s = &data.synth;
    let cam = CameraModel::centered(data.focal, s.image_size);
    let pivots = limb_pivots(&template.topology);
    if data.ambiguity_pairs && pivots.is_empty() {
        return Err(Error::Topology("skeleton has no limb chains to reflect".into()));
    }
    let gen = Generator {
        template: &template,
        cam: cam.clone(),
        data,
        pivots,
    };
    let joints = template.topology.joint_count();
    let rb = record_bytes(joints, s.image_size);
    let mut entries = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut push = |rec: Record, kind, pair, reflected| {
        let id = records.len();
        entries.push(IndexEntry {
            id,
            offset: (id * rb) as u64,
            seed: rec.seed,
            kind,
            pair,
            reflected,
        });
        records.push(rec);
    };
    let mut i = 0;
    while i < n {
        let item_seed = derive_seed(seed, i as u64);
        if !data.ambiguity_pairs || i + 1 == n {
            let sample = make_synthetic_pair(&spec, &template, &cam, s, item_seed)?;
            push(Record::from_sample(&sample), RecordKind::Base, None, Vec::new());
            i += 1;
            continue;
        }
        let mut made = None;
        for attempt in 0..s.max_attempts {
            let base_seed = derive_seed(item_seed, attempt as u64);
            let sample = make_synthetic_pair(&spec, &template, &cam, s, base_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, u64::MAX));
            if let Some(t) = gen.twin(&sample, &mut rng) {
                made = Some((sample, t));
                break;
            }
        }
        let Some((sample, (twin, chosen))) = made else {
            return Err(Error::SamplingExhausted {
                attempts: s.max_attempts,
                reason: format!("no reflectable limb configuration for record {i}"),
            });
        };
        let (_, moved) = reflect_limbs(&sample.pose3d, &template.topology, &chosen);
        push(Record::from_sample(&sample), RecordKind::Base, Some(i + 1), Vec::new());
        push(twin, RecordKind::Twin, Some(i), moved);
        i += 2;
    }
    Ok(Dataset {
        index: DatasetIndex {
            version: FORMAT_VERSION,
            seed,
            count: n,
            joints,
            image_size: s.image_size,
            depth_bins: s.depth_bins,
            camera: cam,
            record_bytes: rb,
            entries,
        },
        records,
    })
}

pub fn save(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(ds.len() * ds.index.record_bytes);
    for r in &ds.records {
        r.write(&mut bytes);
    }
    fs::write(dir.join(RECORDS_FILE), bytes)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    serde_json::to_writer_pretty(&mut w, &ds.index)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
    if index.version != FORMAT_VERSION {
        return Err(Error::Format(format!("dataset version {} (expected {FORMAT_VERSION})", index.version)));
    }
    let rb = record_bytes(index.joints, index.image_size);
    if index.record_bytes != rb || index.entries.len() != index.count {
        return Err(Error::Format("dataset index is inconsistent".into()));
    }
    let bytes = fs::read(dir.join(RECORDS_FILE))?;
    if bytes.len() != rb * index.count {
        return Err(Error::Format(format!("records file holds {} bytes, index promises {}", bytes.len(), rb * index.count)));
    }
    let records = index
        .entries
        .iter()
        .map(|e| {
            let off = e.offset as usize;
            if off + rb > bytes.len() {
                return Err(Error::Format(format!("record {} out of range", e.id)));
            }
            Record::read(&bytes[off..off + rb], index.joints, index.image_size, &index.camera, index.depth_bins)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { index, records })
}
