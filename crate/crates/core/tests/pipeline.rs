mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tilefuse::metrics::{evaluate_labels, LabelNames};
use tilefuse::pipeline::{
    cmd_batch, cmd_evaluate, cmd_segment, fit_model, AtlasInput, Evaluation, Model, PipelineConfig,
    BATCH_SUMMARY, CONFIDENCE_FILE, INTERMEDIATES_DIR, LABELS_FILE, SLICE_FILES, SUMMARY_FILE, TRANSFORM_FILE,
};
use tilefuse::registration::RegistrationConfig;
use tilefuse::segmenter::{apply_rule, SegmenterSpec, TileRule};
use tilefuse::tiling::{extract_tile, LatticeSpec, Preset};
use tilefuse::volume::{load_labels, load_volume, store_nifti};
use tilefuse::Error;

const DIMS: usize = 40;

fn config(model: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        model_dir: Some(model.to_path_buf()),
        output_dir: Some(out.to_path_buf()),
        segmenter: SegmenterSpec::Prior { n_atlases: 1 },
        ..Default::default()
    }
}

fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), common::read(&p));
            }
        }
    }
    out
}

fn cli(args: &[&str]) -> Output {
    Command::new(common::bin())
        .args(args)
        .env("TILEFUSE_LOG", "error")
        .stdin(Stdio::null())
        .output()
        .unwrap()
}

#[test]
fn fit_writes_a_verifiable_reproducible_model() {
    let root = tempfile::tempdir().unwrap();
    let (model, atlases) = common::fit_phantom_model(root.path(), DIMS, 5);
    let m = Model::load(&model).unwrap();
    assert_eq!(m.atlases.len(), 5);
    assert_eq!(m.label_count(), 6);
    assert_eq!(m.manifest.checksums.len(), 4 + 2 * 5);

    let inputs: Vec<AtlasInput> = atlases
        .iter()
        .map(|f| AtlasInput::from_paths(&f.intensity, &f.labels))
        .collect();
    let again = root.path().join("again");
    fit_model(&inputs, None, None, &RegistrationConfig::default(), &again).unwrap();
    assert_eq!(files_in(&model), files_in(&again));

    // any modified byte is caught
    let victim = again.join("atlases/atlas2_labels.nii");
    let mut bytes = common::read(&victim);
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(Model::load(&again), Err(Error::Model(_))));
}

#[test]
fn fit_rejects_bad_atlas_sets() {
    let root = tempfile::tempdir().unwrap();
    let a = common::write_phantom(root.path(), "solo", &common::spec(24, 0));
    let one = [AtlasInput::from_paths(&a.intensity, &a.labels)];
    let err = fit_model(&one, None, None, &RegistrationConfig::default(), &root.path().join("m1")).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(_)), "{err}");

    let small = common::write_phantom(root.path(), "small", &common::spec(20, 1));
    let mixed = [
        AtlasInput::from_paths(&a.intensity, &a.labels),
        AtlasInput::from_paths(&small.intensity, &a.labels),
    ];
    let err = fit_model(&mixed, None, None, &RegistrationConfig::default(), &root.path().join("m2")).unwrap_err();
    match err {
        Error::GeometryMismatch(msg) => assert!(msg.contains("small"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn segment_round_trip_outputs_and_report() {
    let root = tempfile::tempdir().unwrap();
    let (model, atlases) = common::fit_phantom_model(root.path(), DIMS, 3);
    let out = root.path().join("out");
    let mut cfg = config(&model, &out);
    cfg.segmenter = SegmenterSpec::Prior { n_atlases: 15 };
    let r = cmd_segment(
        &atlases[0].intensity,
        &cfg,
        &Evaluation {
            truth: Some(atlases[0].labels.clone()),
            names: LabelNames::default(),
        },
    )
    .unwrap();

    assert_eq!(r.tile_invocations, 27);
    let scan = load_volume(&atlases[0].intensity).unwrap();
    let labels = load_labels(&out.join(LABELS_FILE), None).unwrap();
    assert_eq!(labels.grid(), scan.grid());
    assert_eq!(r.labels.grid(), scan.grid());
    assert!(out.join(CONFIDENCE_FILE).exists() && out.join(TRANSFORM_FILE).exists());
    assert!(out.join(INTERMEDIATES_DIR).join("harmonized.nii").exists());
    assert_eq!(std::fs::read_dir(out.join(INTERMEDIATES_DIR).join("tiles")).unwrap().count(), 27);

    let report: Vec<String> = std::fs::read_dir(out.join("report"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(report.len(), 4);
    for f in SLICE_FILES.iter().chain([&SUMMARY_FILE]) {
        assert!(report.iter().any(|r| r == f), "missing {f}");
    }
    let stage_sum = r.stages.total();
    assert!((stage_sum - r.wall_seconds).abs() <= 0.05 * r.wall_seconds, "{stage_sum} vs {}", r.wall_seconds);
    // 15 atlases were requested from a 3-atlas model
    let text = std::fs::read_to_string(out.join("report").join(SUMMARY_FILE)).unwrap();
    let warnings = text.split("[warnings]").nth(1).unwrap();
    assert!(warnings.contains("15 atlases requested"), "{warnings}");
    assert!(r.metrics.unwrap().rows.iter().all(|row| row.dsc.unwrap() >= 0.99));
}

#[test]
fn missing_model_dir_fails_before_any_work() {
    let root = tempfile::tempdir().unwrap();
    let scan = common::write_phantom(root.path(), "scan", &common::spec(16, 0));
    let out = root.path().join("out");
    let cfg = config(&root.path().join("nope"), &out);
    let err = cmd_segment(&scan.intensity, &cfg, &Evaluation::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn stage_errors_name_stage_and_tile_and_keep_partial_outputs() {
    let root = tempfile::tempdir().unwrap();
    let (model, atlases) = common::fit_phantom_model(root.path(), 24, 2);
    let out = root.path().join("out");
    let mut cfg = config(&model, &out);
    cfg.lattice = LatticeSpec::Preset(Preset::Slant8);
    cfg.jobs = 1;
    cfg.segmenter = SegmenterSpec::External {
        command: "sh -c 'echo broken >&2; exit 4'".into(),
        timeout_seconds: 60.0,
    };
    let err = cmd_segment(&atlases[0].intensity, &cfg, &Evaluation::default()).unwrap_err();
    match &err {
        Error::Stage { stage, tile, source } => {
            assert_eq!(*stage, "segment");
            assert_eq!(*tile, Some(1));
            assert!(matches!(**source, Error::PluginFailure { exit_code: Some(4), .. }));
        }
        other => panic!("unexpected {other}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("tile 1") && msg.contains("exit code 4"), "{msg}");
    assert!(out.join(INTERMEDIATES_DIR).join("canonical.nii").exists());

    cfg.segmenter = SegmenterSpec::Prior { n_atlases: 1 };
    cfg.pre_hook = Some("false".into());
    let err = cmd_segment(&atlases[0].intensity, &cfg, &Evaluation::default()).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "pre_hook", tile: None, .. }), "{err}");
}

#[test]
fn pre_hook_and_purge() {
    let root = tempfile::tempdir().unwrap();
    let (model, atlases) = common::fit_phantom_model(root.path(), 24, 2);
    let plain = root.path().join("plain");
    let mut cfg = config(&model, &plain);
    cfg.lattice = LatticeSpec::Preset(Preset::Slant8);
    cmd_segment(&atlases[1].intensity, &cfg, &Evaluation::default()).unwrap();

    let hooked = root.path().join("hooked");
    cfg.output_dir = Some(hooked.clone());
    cfg.pre_hook = Some("cp".into());
    cfg.keep_intermediates = false;
    cmd_segment(&atlases[1].intensity, &cfg, &Evaluation::default()).unwrap();
    assert_eq!(common::read(&plain.join(LABELS_FILE)), common::read(&hooked.join(LABELS_FILE)));
    assert!(!hooked.join(INTERMEDIATES_DIR).exists());
    let echoed: PipelineConfig =
        serde_json::from_str(&std::fs::read_to_string(hooked.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn external_quantile_plugin_matches_in_process_rule() {
    let root = tempfile::tempdir().unwrap();
    let (model, atlases) = common::fit_phantom_model(root.path(), 24, 2);
    let out = root.path().join("out");
    let mut cfg = config(&model, &out);
    cfg.lattice = LatticeSpec::Preset(Preset::Slant8);
    cfg.segmenter = SegmenterSpec::External {
        command: common::plugin_cmd("quantile"),
        timeout_seconds: 60.0,
    };
    let r = cmd_segment(&atlases[0].intensity, &cfg, &Evaluation::default()).unwrap();
    assert_eq!(r.tile_invocations, 8);
    let labels = common::spec(24, 0).label_count;
    let harmonized = load_volume(&out.join(INTERMEDIATES_DIR).join("harmonized.nii")).unwrap();
    for tile in &r.lattice.tiles {
        let local = apply_rule(TileRule::Quantile, &extract_tile(&harmonized, tile).unwrap(), labels).unwrap();
        let path = out.join(INTERMEDIATES_DIR).join(format!("tiles/tile_{:03}.nii", tile.index));
        assert_eq!(load_labels(&path, Some(labels)).unwrap().data(), local.data(), "tile {}", tile.index);
    }
}

#[test]
fn batch_continues_past_failures_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (model, _) = common::fit_phantom_model(root.path(), 24, 2);
    let scans: Vec<PathBuf> = (0..3)
        .map(|s| common::write_phantom(&root.path().join("scans"), &format!("scan{s}"), &common::misaligned(24, 10 + s)).intensity)
        .collect();
    let corrupt = root.path().join("scans/corrupt.nii");
    std::fs::write(&corrupt, b"definitely not nifti").unwrap();
    let mut all = scans.clone();
    all.insert(1, corrupt);

    let run = |out: &Path| {
        let mut cfg = config(&model, out);
        cfg.lattice = LatticeSpec::Preset(Preset::Slant8);
        cmd_batch(&all, &cfg).unwrap()
    };
    let a = root.path().join("a");
    let rows = run(&a);
    assert_eq!(rows.iter().filter(|r| r.ok).count(), 3);
    assert!(!rows[1].ok);
    let tsv = std::fs::read_to_string(a.join(BATCH_SUMMARY)).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    assert!(tsv.lines().nth(2).unwrap().contains("\tfailed\t"));

    let b = root.path().join("b");
    run(&b);
    for s in 0..3 {
        let name = format!("scan{s}/{LABELS_FILE}");
        assert_eq!(common::read(&a.join(&name)), common::read(&b.join(&name)));
    }

    // the CLI turns a per-scan failure into exit status 1
    let mut args = vec![
        "batch".to_string(),
        "--model-dir".into(),
        model.display().to_string(),
        "--lattice".into(),
        "slant8".into(),
        "--n-atlases".into(),
        "1".into(),
        "--output-dir".into(),
        root.path().join("c").display().to_string(),
        "--inputs".into(),
    ];
    args.extend(all.iter().map(|p| p.display().to_string()));
    let out = cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_reports_and_summaries() {
    let root = tempfile::tempdir().unwrap();
    let truth = common::write_phantom(root.path(), "truth", &common::spec(32, 0));
    let t = load_labels(&truth.labels, None).unwrap();

    // drop the outermost label from a copy: present in truth only
    let top = common::spec(32, 0).label_count as u16 - 1;
    let mut data = t.data().to_vec();
    for l in data.iter_mut() {
        if *l == top {
            *l = top - 1;
        }
    }
    let damaged = tilefuse::volume::LabelVolume::new(t.grid().clone(), data, top as usize + 1).unwrap();
    let damaged_path = root.path().join("damaged.nii");
    store_nifti(&damaged, &damaged_path).unwrap();

    let out = root.path().join("eval");
    let reports = cmd_evaluate(
        &[truth.labels.clone(), damaged_path],
        &truth.labels,
        &LabelNames::default(),
        None,
        &out,
    )
    .unwrap();
    for row in &reports[0].rows {
        assert_eq!((row.dsc, row.msd, row.hd), (Some(1.0), Some(0.0), Some(0.0)));
    }
    let missing: Vec<_> = reports[1].rows.iter().filter(|r| r.is_missing()).map(|r| r.label).collect();
    assert_eq!(missing, vec![top]);
    assert!(out.join("best_within_delta.tsv").exists());

    // recompute the summary from the CSV alone
    let csv = std::fs::read_to_string(out.join("damaged.csv")).unwrap();
    let dsc: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(2).and_then(|v| v.parse().ok()))
        .collect();
    assert_eq!(dsc.len(), 4);
    let mean = dsc.iter().sum::<f64>() / dsc.len() as f64;
    let mut sorted = dsc.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[1] + sorted[2]) / 2.0;
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("damaged_summary.json")).unwrap()).unwrap();
    assert!((summary["dsc"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((summary["dsc"]["median"].as_f64().unwrap() - median).abs() < 1e-12);

    let other = common::write_phantom(root.path(), "other", &common::spec(20, 0));
    let err = cmd_evaluate(&[other.labels], &truth.labels, &LabelNames::default(), None, &out).unwrap_err();
    assert!(matches!(err, Error::GeometryMismatch(_)));
    // evaluation of a self-segmentation through the library matches the CLI path
    let direct = evaluate_labels(&t, &t, &LabelNames::default()).unwrap();
    assert_eq!(direct, reports[0]);
}

#[test]
fn cli_phantom_determinism_and_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().display().to_string();
    for name in ["a", "b"] {
        let out = cli(&["phantom", "--dims", "20,20,20", "--labels", "3", "--seed", "7", "--output-dir", &dir, "--name", name]);
        assert!(out.status.success());
    }
    assert_eq!(common::read(&root.path().join("a.nii")), common::read(&root.path().join("b.nii")));
    assert_eq!(common::read(&root.path().join("a_labels.nii")), common::read(&root.path().join("b_labels.nii")));

    let bad = cli(&["phantom", "--dims", "8,8,8", "--labels", "60", "--output-dir", &dir]);
    assert_eq!(bad.status.code(), Some(2));
    let no_model = cli(&[
        "segment",
        "--input",
        &root.path().join("a.nii").display().to_string(),
        "--model-dir",
        &root.path().join("missing").display().to_string(),
        "--output-dir",
        &root.path().join("out").display().to_string(),
    ]);
    assert_eq!(no_model.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_model.stderr).contains("model directory"));
    assert_eq!(cli(&["segment", "--bogus"]).status.code(), Some(2));
    let custom_without_sizes = cli(&[
        "segment",
        "--input",
        "x.nii",
        "--lattice",
        "custom",
        "--output-dir",
        &dir,
    ]);
    assert_eq!(custom_without_sizes.status.code(), Some(2));
}

#[test]
fn cli_failing_plugin_surfaces_tile_and_exit_code() {
    let root = tempfile::tempdir().unwrap();
    let (model, atlases) = common::fit_phantom_model(root.path(), 24, 2);
    let out = cli(&[
        "segment",
        "--input",
        &atlases[0].intensity.display().to_string(),
        "--model-dir",
        &model.display().to_string(),
        "--lattice",
        "slant8",
        "--jobs",
        "1",
        "--segmenter",
        "external",
        "--plugin-cmd",
        "sh -c 'exit 7'",
        "--output-dir",
        &root.path().join("out").display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tile 1"), "{stderr}");
    assert!(stderr.contains("Some(7)") || stderr.contains("code 7"), "{stderr}");
}
