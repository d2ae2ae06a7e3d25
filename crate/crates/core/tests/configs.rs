use std::path::Path;

use vesselseg::training::TrainConfig;

fn shipped(name: &str) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    TrainConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_scale_config_matches_the_defaults() {
    let cfg = shipped("full_scale.conf");
    let defaults = TrainConfig::default();
    assert_eq!(cfg.network(), defaults.network());
    assert_eq!(cfg.weights(), defaults.weights());
    assert_eq!(
        cfg.digest(),
        TrainConfig {
            class_weights: cfg.class_weights.clone(),
            ..defaults
        }
        .digest()
    );
}

#[test]
fn synthetic_config_uses_the_reduced_network() {
    let cfg = shipped("synthetic.conf");
    assert_eq!(cfg.net.channels, [8, 16, 32, 64]);
    assert_eq!(cfg.epochs, 20);
}

#[test]
fn written_configs_parse_back() {
    let cfg = shipped("full_scale.conf");
    assert_eq!(
        TrainConfig::parse(&cfg.to_text()).unwrap().to_text(),
        cfg.to_text()
    );
}
