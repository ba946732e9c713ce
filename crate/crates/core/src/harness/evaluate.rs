use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Record};
use super::train::{check_compatible, Model};
use crate::decoder::{decode_batch_on_tape, DecoderConfig, HypothesisSet};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{pose_metrics, select_index, MetricsReport, PoseMetrics, Protocol};
use crate::skeleton::Pose3D;

const EVAL_BATCH: usize = 256;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Metrics of already decoded hypotheses. Every hypothesis is lifted to
/// millimetres with the record's frame (ground-truth root depth) before
/// selection.
pub fn evaluate_sets(sets: &[HypothesisSet], records: &[&Record], protocols: &[Protocol], root: usize) -> Result<Vec<MetricsReport>> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if sets.len() != records.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_sets",
            lhs: vec![sets.len()],
            rhs: vec![records.len()],
        });
    }
    let mut per: Vec<Vec<PoseMetrics>> = vec![Vec::with_capacity(records.len()); protocols.len()];
    for (set, rec) in sets.iter().zip(records) {
        let candidates: Vec<Pose3D> = set.poses.iter().map(|p| rec.frame.from_heatmap(p)).collect();
        let conf: Vec<f64> = (0..set.n_hypo()).map(|h| set.mean_confidence(h)).collect();
        for (slot, &protocol) in per.iter_mut().zip(protocols) {
            let i = select_index(&candidates, &conf, Some(&rec.pose3d), protocol, root)?;
            slot.push(pose_metrics(&candidates[i], &rec.pose3d, root)?);
        }
    }
    protocols.iter().zip(&per).map(|(p, m)| MetricsReport::from_samples(*p, m)).collect()
}

/// Decodes and scores records with the model's detector.
pub fn evaluate_records(model: &Model, records: &[&Record], protocols: &[Protocol]) -> Result<Vec<MetricsReport>> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut sets = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        sets.extend(model.predict(chunk)?);
    }
    evaluate_sets(&sets, records, protocols, model.topology.root())
}

/// Evaluates a model on a whole dataset. Empty or mismatched datasets are refused.
pub fn evaluate(model: &Model, data: &Dataset, protocols: &[Protocol]) -> Result<Vec<MetricsReport>> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    check_compatible(model, data)?;
    let records: Vec<&Record> = data.records.iter().collect();
    evaluate_records(model, &records, protocols)
}

/// Hypotheses decoded from ground-truth heatmaps: separable Gaussian logits
/// of width `sigma` bins centred on each record's heatmap coordinates.
pub fn oracle_sets(records: &[&Record], grid: (usize, usize, usize), sigma: f64, cfg: &DecoderConfig) -> Result<Vec<HypothesisSet>> {
    if records.is_empty() {
        return Err(Error::Empty("oracle records"));
    }
    let (d, h, w) = grid;
    let joints = records[0].heatmap_coords.len();
    let logits = |len: usize, axis: usize| -> Result<Tensor> {
        let data: Vec<f64> = records
            .iter()
            .flat_map(|r| r.heatmap_coords.iter())
            .flat_map(|c| (0..len).map(move |i| -(i as f64 - c[axis]).powi(2) / (2.0 * sigma * sigma)))
            .collect();
        Tensor::new(&[records.len() * joints, len], data)
    };
    let tape = Tape::new();
    let depth = tape.constant(logits(d, 2)?);
    let rows = tape.constant(logits(h, 1)?);
    let cols = tape.constant(logits(w, 0)?);
    Ok(decode_batch_on_tape(depth, rows, cols, joints, cfg)?.sets)
}

/// Writes `metrics.csv` and `metrics.json` into `dir`.
pub fn write_reports(reports: &[MetricsReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(dir.join(METRICS_CSV), csv)?;
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    fs::write(dir.join(METRICS_JSON), json)?;
    Ok(())
}
