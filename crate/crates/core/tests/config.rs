use duon::config::{ExperimentConfig, PRESETS};

#[test]
fn documented_config_matches_the_preset() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config1.json");
    let doc = ExperimentConfig::load(path).unwrap();
    assert_eq!(doc, ExperimentConfig::preset("config1").unwrap());
}

#[test]
fn presets_round_trip_through_json() {
    for name in PRESETS {
        let p = ExperimentConfig::preset(name).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&p.to_json()).unwrap(), p, "{name}");
        p.to_sim().unwrap();
    }
}

#[test]
fn sizes_accept_units() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config1.json"))
        .unwrap()
        .replace("1073741824", "\"1GiB\"")
        .replace("17179869184", "\"16GiB\"");
    let c = ExperimentConfig::from_json_str(&text).unwrap();
    assert_eq!(c.geometry.fast, 1 << 30);
    assert_eq!(c.geometry.slow, 16 << 30);
}

#[test]
fn unknown_fields_are_rejected_with_their_path() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config1.json"))
        .unwrap()
        .replace("\"threshold\": 64", "\"threshold\": 64, \"thresold\": 3");
    let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
    assert!(err.contains("policy"), "{err}");
}
