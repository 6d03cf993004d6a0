use splatnav::{Error, SimConfig};

fn override_with(json: &str) -> splatnav::Result<SimConfig> {
    SimConfig::from_json(json)
}

#[test]
fn defaults_round_trip_through_json() {
    let cfg = SimConfig::default();
    cfg.validate().unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(override_with(&text).unwrap(), cfg);
}

#[test]
fn each_section_rejects_out_of_range_values() {
    let bad = [
        r#"{"scene": {"voxel_resolution": 0}}"#,
        r#"{"robot": {"v_max": -1}}"#,
        r#"{"robot": {"camera": {"hfov_deg": 180}}}"#,
        r#"{"human": {"count": 3}}"#,
        r#"{"human": {"walk_speed": [1.2, 0.8]}}"#,
        r#"{"human": {"crossing_probability": 1.5}}"#,
        r#"{"human": {"parallel_offset": [2.0, 0.5]}}"#,
        r#"{"planner": {"w_len": 0}}"#,
        r#"{"planner": {"replan_period": 0}}"#,
        r#"{"planner": {"theta_bins": 0}}"#,
        r#"{"planner": {"primitive_duration": 0.95}}"#,
        r#"{"dataset": {"observation_interval": 0.25}}"#,
        r#"{"dataset": {"goal_tolerance": -0.1}}"#,
    ];
    for text in bad {
        match override_with(text) {
            Err(Error::InvalidParameter(_)) => {}
            other => panic!("{text} gave {other:?}"),
        }
    }
}

#[test]
fn partial_overrides_keep_the_other_defaults() {
    let cfg = override_with(r#"{"human": {"count": 2}, "dataset": {"control_dt": 0.05}}"#).unwrap();
    let def = SimConfig::default();
    assert_eq!(cfg.human.count, 2);
    assert_eq!(cfg.dataset.control_dt, 0.05);
    assert_eq!(cfg.robot, def.robot);
    assert_eq!(cfg.planner, def.planner);
    assert_eq!(cfg.ticks_per_observation(), 10);
}

#[test]
fn load_reports_missing_files_with_their_path() {
    let err = SimConfig::load("no/such/config.json").unwrap_err();
    assert!(err.to_string().contains("no/such/config.json"), "{err}");
}
