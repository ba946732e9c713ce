mod common;

use hypopose::harness::config::ExperimentConfig;
use hypopose::harness::dataset::{self, orthographic_gap, RecordKind};
use hypopose::metrics::mpjpe;

#[test]
fn zero_samples_give_an_empty_index() {
    let cfg = ExperimentConfig::default();
    let ds = dataset::generate(&cfg.data, 0, 3).unwrap();
    assert!(ds.is_empty());
    assert!(ds.index.entries.is_empty());
    let dir = tempfile::tempdir().unwrap();
    dataset::save(&ds, dir.path()).unwrap();
    assert_eq!(std::fs::metadata(dir.path().join(dataset::RECORDS_FILE)).unwrap().len(), 0);
    let back = dataset::load(dir.path()).unwrap();
    assert_eq!(back.len(), 0);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let cfg = ExperimentConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset::save(&dataset::generate(&cfg.data, 9, 7).unwrap(), a.path()).unwrap();
    dataset::save(&dataset::generate(&cfg.data, 9, 7).unwrap(), b.path()).unwrap();
    for f in [dataset::INDEX_FILE, dataset::RECORDS_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = dataset::generate(&cfg.data, 9, 8).unwrap();
    assert_ne!(c.records[0].pose3d, dataset::generate(&cfg.data, 9, 7).unwrap().records[0].pose3d);
}

#[test]
fn save_load_round_trip() {
    let cfg = ExperimentConfig::default();
    let ds = dataset::generate(&cfg.data, 5, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dataset::save(&ds, dir.path()).unwrap();
    assert_eq!(dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn truncated_records_are_refused() {
    let cfg = ExperimentConfig::default();
    let ds = dataset::generate(&cfg.data, 4, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dataset::save(&ds, dir.path()).unwrap();
    let path = dir.path().join(dataset::RECORDS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    std::fs::write(&path, bytes).unwrap();
    assert!(dataset::load(dir.path()).is_err());
}

#[test]
fn ambiguity_pairs_differ_in_3d_but_not_orthographically() {
    let cfg = ExperimentConfig::default();
    let ds = dataset::generate(&cfg.data, 40, 5).unwrap();
    let size = cfg.data.synth.image_size as f64;
    let mut pairs = 0;
    for e in ds.index.entries.iter().filter(|e| e.kind == RecordKind::Twin) {
        let base = &ds.records[e.pair.unwrap()];
        let twin = &ds.records[e.id];
        assert!(mpjpe(&base.pose3d, &twin.pose3d).unwrap() > 0.0);
        // orthographic projection at the root's pixels-per-millimetre
        assert!(orthographic_gap(&base.pose3d, &twin.pose3d, base.frame.scale()) < 1e-6 * size);
        assert!(!e.reflected.is_empty());
        for (j, (p, q)) in base.pose3d.joints.iter().zip(&twin.pose3d.joints).enumerate() {
            if !e.reflected.contains(&j) {
                assert_eq!(p, q);
            }
        }
        pairs += 1;
    }
    assert_eq!(pairs, 20);
}

#[test]
fn odd_counts_end_with_a_lone_base() {
    let cfg = ExperimentConfig::default();
    let ds = dataset::generate(&cfg.data, 5, 2).unwrap();
    let kinds: Vec<RecordKind> = ds.index.entries.iter().map(|e| e.kind).collect();
    use RecordKind::*;
    assert_eq!(kinds, [Base, Twin, Base, Twin, Base]);
    assert_eq!(ds.index.entries[4].pair, None);
}

#[test]
fn records_stay_inside_image_and_depth_range() {
    let cfg = ExperimentConfig::default();
    let ds = dataset::generate(&cfg.data, 30, 21).unwrap();
    let s = &cfg.data.synth;
    let margin = s.margin * s.image_size as f64;
    for r in &ds.records {
        for p in &r.pose2d {
            assert!(p.iter().all(|c| *c >= margin && *c <= s.image_size as f64 - 1.0 - margin));
        }
        for c in &r.heatmap_coords {
            assert!(c[2] >= 0.0 && c[2] <= (s.depth_bins - 1) as f64);
        }
        let back = r.frame.from_heatmap(&r.heatmap_coords);
        assert!(mpjpe(&back, &r.pose3d).unwrap() < 1e-9);
    }
}
