use std::path::PathBuf;

use gdsr_core::config::ExperimentConfig;
use gdsr_core::verify::toy_sr_config;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_toy_config_matches_the_acceptance_config() {
    let mut file = ExperimentConfig::load(configs_dir().join("toy_sr.toml")).unwrap();
    let expected = toy_sr_config(0);
    file.out_dir = expected.out_dir.clone();
    assert_eq!(file, expected);
}

#[test]
fn every_shipped_config_validates() {
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
        }
    }
}

#[test]
fn toml_round_trip_preserves_config_and_hash() {
    let cfg = toy_sr_config(9);
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}
