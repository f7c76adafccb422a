use std::path::Path;

use compdiff::config::{load_run_config, ScaffoldSource};
use compdiff::pipeline::HarmonizationMode;
use compdiff::{Error, SigmaMode};

fn setup(config: &str) -> (tempfile::TempDir, Result<compdiff::config::RunConfig, Error>) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("split.txt"), "1 1 2 2\n1 1 2 2\n3 3 3 3\n3 3 3 3\n").unwrap();
    std::fs::write(dir.path().join("ctrl.txt"), "0 0 1 1\n0 0 1 1\n0 0 0 0\n0 0 0 0\n").unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let cfg = load_run_config(&dir.path().join("run.toml"));
    (dir, cfg)
}

const SEGMENTS: &str = r#"
[[segments]]
id = 1
tokens = ["stripes-red"]

[[segments]]
id = 2
tokens = ["dots-blue"]
control = "ctrl.txt"

[[segments]]
id = 3
tokens = ["plain-yellow", "checker-green"]
"#;

fn config_key(e: Error) -> String {
    match e {
        Error::Config { key, .. } => key,
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn minimal_config_gets_documented_defaults() {
    let (dir, cfg) = setup(&format!("layout = \"split.txt\"\n{SEGMENTS}"));
    let cfg = cfg.unwrap();
    assert_eq!(cfg.schedule.total_steps, 1000);
    assert_eq!(cfg.sampler.num_steps, 50);
    assert_eq!(cfg.sampler.sigma_mode, SigmaMode::Deterministic);
    assert_eq!(cfg.kappa, 40.0);
    assert_eq!(cfg.guidance, 3.0);
    assert_eq!(cfg.scaffold, ScaffoldSource::Gray);
    assert_eq!(cfg.harmonization, HarmonizationMode::PerSegment);
    assert_eq!(cfg.layout, dir.path().join("split.txt"));
    assert_eq!(cfg.segments[1].control.as_deref(), Some(dir.path().join("ctrl.txt").as_path()));

    let scene = cfg.load_scene().unwrap();
    assert_eq!(scene.specs.len(), 3);
    assert_eq!(scene.specs[2].tokens, vec![3, 2]);
    assert!(scene.specs[1].control_map.is_some());
}

#[test]
fn resolved_dump_reloads_to_the_same_config() {
    let (dir, cfg) = setup(&format!("layout = \"split.txt\"\nkappa = 25\nseed = 7\n{SEGMENTS}"));
    let cfg = cfg.unwrap();
    let dump = dir.path().join("sub");
    std::fs::create_dir(&dump).unwrap();
    std::fs::write(dump.join("resolved.toml"), cfg.to_toml_string()).unwrap();
    assert_eq!(load_run_config(&dump.join("resolved.toml")).unwrap(), cfg);
}

#[test]
fn unassigned_segment_is_named() {
    let partial = SEGMENTS.split("[[segments]]").take(3).collect::<Vec<_>>().join("[[segments]]");
    let (_dir, cfg) = setup(&format!("layout = \"split.txt\"\n{partial}"));
    let err = cfg.unwrap_err();
    assert!(err.to_string().contains("unassigned segment 3"), "{err}");
}

#[test]
fn distinct_errors_carry_key_paths() {
    let cases = [
        (format!("layout = \"split.txt\"\nkappa = 101\n{SEGMENTS}"), "kappa"),
        (format!("layout = \"split.txt\"\ncolour = 1\n{SEGMENTS}"), "colour"),
        (format!("layout = \"missing.txt\"\n{SEGMENTS}"), "layout"),
        (format!("layout = \"split.txt\"\n{}", SEGMENTS.replace("id = 3", "id = 4")), "segments[2].id"),
        (format!("layout = \"split.txt\"\n{}", SEGMENTS.replace("ctrl.txt", "nope.txt")), "segments[1].control"),
        (format!("layout = \"split.txt\"\n{}", SEGMENTS.replace("dots-blue", "dots-purple")), "segments[1].tokens"),
        (format!("layout = \"split.txt\"\n[sampler]\nnum_steps = 0\n{SEGMENTS}"), "sampler.num_steps"),
    ];
    for (text, key) in cases {
        let (_dir, cfg) = setup(&text);
        let err = cfg.unwrap_err();
        assert!(err.is_configuration());
        assert_eq!(config_key(err), key);
    }
    assert_eq!(config_key(load_run_config(Path::new("/nonexistent/run.toml")).unwrap_err()), "config");
}
