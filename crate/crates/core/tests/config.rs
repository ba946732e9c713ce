use hypopose::harness::config::ExperimentConfig;

#[test]
fn readme_config_block_spells_out_the_defaults() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("```toml").nth(1).and_then(|s| s.split("```").next()).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(block).unwrap(), ExperimentConfig::default());
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 17;
    cfg.decoder.n_hypo = 1;
    cfg.optimizer.d_lr = Some(1e-3);
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    assert_ne!(ExperimentConfig::default().hash().unwrap(), cfg.hash().unwrap());
}

#[test]
fn invalid_configs_are_refused() {
    let bad = [
        "[optimizer]\nstage1_epochs = 0\nstage2_epochs = 0\n",
        "[optimizer]\nbatch_size = 0\n",
        "[detector]\npool = 7\n",
        "[grid]\ndepth = 32\n",
        "[data]\nskeleton = \"/definitely/missing.toml\"\n",
    ];
    for text in bad {
        let ok = ExperimentConfig::from_toml_str(text).and_then(|c| c.validate());
        assert!(ok.is_err(), "{text}");
    }
}

#[test]
fn relative_skeleton_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = concat!(env!("CARGO_MANIFEST_DIR"), "/data/human18.toml");
    std::fs::copy(src, dir.path().join("body.toml")).unwrap();
    std::fs::write(dir.path().join("exp.toml"), "[data]\nskeleton = \"body.toml\"\n").unwrap();
    let cfg = ExperimentConfig::load(dir.path().join("exp.toml")).unwrap();
    cfg.validate().unwrap();
    let (template, _) = cfg.data.load_skeleton().unwrap();
    assert_eq!(template.topology.joint_count(), 18);
}
