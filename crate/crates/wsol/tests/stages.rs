//! Stage-level integration tests on a miniature configuration: prereq
//! errors, artifact counts, eval delegation, and the equivalence between
//! the one-shot pipeline and stage-by-stage execution.

use std::fs;

use wsol::config::Config;
use wsol::error::WsolError;
use wsol::localization::Metrics;
use wsol::pipeline::{run_pipeline, run_stage, Layout, Stage};

fn tiny_cfg() -> Config {
    let mut cfg = Config::default();
    cfg.image_size = 32;
    cfg.train_count = 48;
    cfg.test_count = 12;
    cfg.epochs_cam = 2;
    cfg.epochs_seg = 2;
    cfg.epochs_cls = 2;
    cfg
}

#[test]
fn train_seg_without_pseudo_artifacts_names_the_pseudo_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let err = run_stage(Stage::TrainSeg, &cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage(), Some("train-seg"));
    let text = err.to_string();
    let pseudo = Layout::new(dir.path()).pseudo_dir();
    assert!(
        text.contains(pseudo.to_str().unwrap()),
        "error does not name the pseudo dir: {text}"
    );
}

#[test]
fn infer_without_models_lists_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let err = run_stage(Stage::Infer, &cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage(), Some("infer"));
    let text = err.to_string();
    assert!(text.contains("cls"), "missing cls checkpoint not listed: {text}");
    assert!(text.contains("net2"), "missing net2 checkpoint not listed: {text}");
}

#[test]
fn make_pseudo_writes_one_label_per_unskipped_training_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    for stage in [Stage::GenData, Stage::TrainCam, Stage::MakePseudo] {
        run_stage(stage, &cfg, dir.path()).unwrap();
    }
    let lay = Layout::new(dir.path());
    let skipped_text = fs::read_to_string(lay.skipped()).unwrap();
    let skipped = skipped_text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count();
    let labels = fs::read_dir(lay.pseudo_dir())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("label_"))
        .count();
    assert_eq!(labels + skipped, cfg.train_count);
    // The header records the same count as the body.
    assert!(skipped_text.starts_with(&format!(
        "# images skipped for empty activation maps: {skipped}"
    )));
    // CAM dumps cover every training image regardless of skips.
    let cams = fs::read_dir(lay.cams_dir()).unwrap().count();
    assert_eq!(cams, 2 * cfg.train_count); // dense-array + png per image
}

#[test]
fn eval_reproduces_handwritten_record_examples() {
    // The same examples the localization module pins down, fed through the
    // on-disk records path: IoU 0.51-equivalent pass, strict-0.5 failure,
    // and a rank-3 class among identical boxes.
    let dir = tempfile::tempdir().unwrap();
    let lay = Layout::new(dir.path());
    fs::create_dir_all(lay.records().parent().unwrap()).unwrap();
    let records = "\
# index pred_box class_ranks gt_box gt_class
0 0,0,9,12 0;1;2;3 0,0,9,9 0
1 0,0,19,9 0;1;2;3 0,0,9,9 0
2 0,0,9,9 1;2;0;3 0,0,9,9 0
";
    fs::write(lay.records(), records).unwrap();
    run_stage(Stage::Eval, &tiny_cfg(), dir.path()).unwrap();
    let metrics: Metrics =
        serde_json::from_str(&fs::read_to_string(lay.report()).unwrap()).unwrap();
    // Record 0: IoU 100/130 > 0.5, top-1 correct -> counts everywhere.
    // Record 1: IoU exactly 0.5 -> fails everywhere (strict threshold).
    // Record 2: IoU 1.0 but true class at rank 3 -> top-5/gt-known only.
    assert_eq!(metrics.n_images, 3);
    assert!((metrics.top1_loc - 1.0 / 3.0).abs() < 1e-12);
    assert!((metrics.top5_loc - 2.0 / 3.0).abs() < 1e-12);
    assert!((metrics.gt_known_loc - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn eval_rejects_an_empty_record_file() {
    let dir = tempfile::tempdir().unwrap();
    let lay = Layout::new(dir.path());
    fs::create_dir_all(lay.records().parent().unwrap()).unwrap();
    fs::write(lay.records(), "# only a header\n").unwrap();
    let err = run_stage(Stage::Eval, &tiny_cfg(), dir.path()).unwrap_err();
    assert!(matches!(
        err,
        WsolError::Stage { source, .. } if matches!(*source, WsolError::EmptyRecords)
    ));
}

#[test]
fn pipeline_equals_stage_composition() {
    let cfg = tiny_cfg();
    let whole = tempfile::tempdir().unwrap();
    let metrics = run_pipeline(&cfg, whole.path()).unwrap();

    let stepped = tempfile::tempdir().unwrap();
    for stage in Stage::ALL {
        run_stage(stage, &cfg, stepped.path()).unwrap();
    }
    let report_a = fs::read(Layout::new(whole.path()).report()).unwrap();
    let report_b = fs::read(Layout::new(stepped.path()).report()).unwrap();
    assert_eq!(report_a, report_b);
    assert_eq!(metrics.n_images, cfg.test_count);
}

#[test]
fn disabling_segmentation_skips_its_stages_but_still_evaluates() {
    let mut cfg = tiny_cfg();
    cfg.seg = false;
    let dir = tempfile::tempdir().unwrap();
    let metrics = run_pipeline(&cfg, dir.path()).unwrap();
    let lay = Layout::new(dir.path());
    assert!(!lay.net2_dir().exists());
    assert!(!lay.pseudo_dir().exists());
    assert_eq!(metrics.n_images, cfg.test_count);
}
