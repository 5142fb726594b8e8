mod common;

use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tilefuse::segmenter::{
    apply_rule, segment_external, PluginManifest, TileRule, TileTask, MANIFEST_NAME, PROTOCOL_VERSION,
};
use tilefuse::tiling::{extract_tile, make_lattice};
use tilefuse::volume::{store_nifti, Grid, LabelVolume, Volume};
use tilefuse::Error;

fn task(seed: u64) -> TileTask {
    let g = Grid::with_spacing([20, 18, 16], [1.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Volume::new(g.clone(), (0..g.len()).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap();
    let lat = make_lattice([20, 18, 16], [2, 2, 2], [12, 10, 9]).unwrap();
    let tile = lat.tiles[5].clone();
    TileTask::new(tile.clone(), extract_tile(&v, &tile).unwrap(), 7, lat.canonical_dims).unwrap()
}

const TIMEOUT: Duration = Duration::from_secs(60);

#[test]
fn quantile_plugin_matches_in_process_rule_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let t = task(seed);
        let external = segment_external(&t, &common::plugin_cmd("quantile"), TIMEOUT, dir.path()).unwrap();
        let local = apply_rule(TileRule::Quantile, &t.intensity, 7).unwrap();
        assert_eq!(external.data(), local.data());
        assert_eq!(external.grid(), t.intensity.grid());
    }
    // the tile directory holds the protocol files
    let tile_dir = dir.path().join("tile_006");
    let m: PluginManifest =
        serde_json::from_str(&std::fs::read_to_string(tile_dir.join(MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(m.protocol_version, PROTOCOL_VERSION);
    assert!(tile_dir.join(&m.input_volume).exists() && tile_dir.join(&m.output_volume).exists());
}

#[test]
fn failing_plugin_reports_tile_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(1);
    let err = segment_external(&t, "sh -c 'echo boom >&2; exit 1'", TIMEOUT, dir.path()).unwrap_err();
    match err {
        Error::PluginFailure {
            tile_index,
            exit_code,
            stderr,
        } => {
            assert_eq!(tile_index, 6);
            assert_eq!(exit_code, Some(1));
            assert!(stderr.contains("boom"));
        }
        other => panic!("unexpected {other}"),
    }
    let err = segment_external(&t, "/definitely/not/a/plugin", TIMEOUT, dir.path()).unwrap_err();
    assert!(matches!(err, Error::PluginFailure { exit_code: None, .. }));
}

#[test]
fn wrong_or_missing_output_is_a_protocol_violation() {
    let dir = tempfile::tempdir().unwrap();
    let wrong = dir.path().join("wrong.nii");
    let g = Grid::with_spacing([3, 3, 3], [1.0; 3]).unwrap();
    store_nifti(&LabelVolume::zeros(g, 7).unwrap(), &wrong).unwrap();
    let t = task(2);
    let cmd = format!("sh -c 'cp {} output.nii'", wrong.display());
    let err = segment_external(&t, &cmd, TIMEOUT, &dir.path().join("work")).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation { tile_index: 6, .. }), "{err}");
    let err = segment_external(&t, "true", TIMEOUT, &dir.path().join("work")).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation { .. }), "{err}");
}

#[test]
fn slow_plugin_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let err = segment_external(&task(3), "sh -c 'sleep 10'", Duration::from_millis(300), dir.path()).unwrap_err();
    assert!(matches!(err, Error::PluginTimeout { tile_index: 6, .. }), "{err}");
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn plugin_side_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(4);
    store_nifti(&t.intensity, &dir.path().join("input.nii")).unwrap();
    let manifest = |version: u32| PluginManifest {
        protocol_version: version,
        tile_index: 6,
        corner: t.tile.corner,
        size: t.tile.size,
        label_count: 7,
        input_volume: "input.nii".into(),
        output_volume: "output.nii".into(),
        canonical_dims: t.canonical_dims,
    };
    let run = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        Command::new(common::bin())
            .args(["plugin", "quantile"])
            .arg(&p)
            .env("TILEFUSE_LOG", "off")
            .stderr(Stdio::null())
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(run("ok.json", &serde_json::to_string(&manifest(1)).unwrap()), Some(0));
    assert!(dir.path().join("output.nii").exists());
    assert_eq!(run("v2.json", &serde_json::to_string(&manifest(2)).unwrap()), Some(2));
    assert_eq!(run("bad.json", "{not json"), Some(2));
    let mut missing = manifest(1);
    missing.input_volume = "absent.nii".into();
    assert_eq!(run("io.json", &serde_json::to_string(&missing).unwrap()), Some(3));
}
