use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::process::Command;

use tubelet_cli::experiment::{eval_split, ABLATION_HEADER, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, PREDICTIONS_FILE, TRAIN_LOG_FILE};
use tubelet_cli::{ablate, run_eval, run_experiment, run_train, AblationAxis, ExperimentConfig};
use tubelet_core::linking::{write_predictions, PredictionRecord};
use tubelet_core::model::Model;
use tubelet_core::AnnotationSet;

/// Toy model with a handful of steps: exercises the plumbing, not accuracy.
fn quick(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "quick".into(),
        output_dir: dir.to_path_buf(),
        ..Default::default()
    };
    cfg.data.train_videos = 2;
    cfg.optim.steps = 3;
    cfg.optim.batch_size = 1;
    cfg.optim.warmup_steps = 0;
    cfg.eval.render_videos = 0;
    cfg
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn oracle_records(ann: &AnnotationSet, classes: usize) -> Vec<PredictionRecord> {
    ann.tubes
        .iter()
        .enumerate()
        .map(|(slot, tube)| PredictionRecord {
            video_id: ann.video_id.clone(),
            frame_start: 0,
            frame_end: ann.frames_total,
            boxes: (0..ann.frames_total).map(|t| tube.present[t].then_some(tube.boxes[t])).collect(),
            class_probs: (0..ann.frames_total)
                .map(|t| {
                    tube.present[t].then(|| {
                        let mut p = vec![0.0; classes + 1];
                        tube.class_ids[t].iter().for_each(|&c| p[c] = 1.0);
                        p
                    })
                })
                .collect(),
            confidence: 1.0,
            slot,
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_checkpoint_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.optim.lr = 0.0;
    let report = run_train(&cfg).unwrap();
    let init = Model::new(cfg.model.clone()).unwrap().init_params(cfg.seed);
    assert_eq!(report.params.values, init.values);
    let saved = tubelet_core::model::checkpoint::load_params(&report.checkpoint).unwrap();
    assert_eq!(saved.values, init.values);
    assert!(dir.path().join(TRAIN_LOG_FILE).exists());
    assert_eq!(ExperimentConfig::load(Some(&dir.path().join(CONFIG_FILE)), &[]).unwrap(), cfg);
}

#[test]
fn small_step_size_decreases_single_sample_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    // one video exactly one clip long and no augmentation: every step sees the same sample
    cfg.data.train_videos = 1;
    cfg.optim.lr = 1e-4;
    cfg.optim.steps = 50;
    let log = run_train(&cfg).unwrap().log;
    let totals: Vec<f64> = log.iter().map(|l| l.total).collect();
    let rises = totals.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "{rises} increases in {totals:?}");
    assert!(totals[49] < totals[0]);
}

#[test]
fn oracle_predictions_score_perfectly_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(&dir.path().join("run"));
    cfg.data.eval_videos = 3;
    let ann_dir = dir.path().join("ann");
    std::fs::create_dir_all(&ann_dir).unwrap();
    let mut records = Vec::new();
    for (_, ann) in eval_split(&cfg).unwrap() {
        ann.save(&ann_dir.join(format!("{}.json", ann.video_id))).unwrap();
        records.extend(oracle_records(&ann, cfg.model.classes));
    }
    let preds = dir.path().join("oracle.jsonl");
    write_predictions(&records, BufWriter::new(File::create(&preds).unwrap())).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tubelet"))
        .args(["eval", "--set", "data.eval_videos=3", "--output-dir"])
        .arg(&cfg.output_dir)
        .arg("--predictions")
        .arg(&preds)
        .arg("--annotations")
        .arg(&ann_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&cfg.output_dir.join(METRICS_FILE));
    let col = |name: &str| rows[1][rows[0].iter().position(|h| h == name).unwrap()].clone();
    assert_eq!(col("frame_map"), "1.000000");
    assert_eq!(col("vap20"), "1.000000");
    assert_eq!(col("vap50"), "1.000000");
    assert_eq!(col("vap50_95"), "1.000000");
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.eval.render_videos = 1;
    let s = run_experiment(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&s.frame_map()));
    for f in [CONFIG_FILE, CHECKPOINT_FILE, TRAIN_LOG_FILE, PREDICTIONS_FILE, METRICS_FILE, "frame_ap.csv", "video_ap.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let overlays: Vec<_> = std::fs::read_dir(dir.path().join("overlays/train-0000")).unwrap().collect();
    assert_eq!(overlays.len(), cfg.data.scene.frames);
    assert_eq!(read_csv(&dir.path().join(TRAIN_LOG_FILE)).len(), 1 + cfg.optim.steps);
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let err = run_eval(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("missing checkpoint"), "{err}");
    assert!(run_eval(&cfg, Some(&dir.path().join("nowhere.ckpt"))).is_err());
}

#[test]
fn invalid_configuration_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [["--set", "model.heads=5"], ["--set", "data.scene.width=48"], ["--supervision", "every_0"], ["--matching", "greedy"]] {
        let status = Command::new(env!("CARGO_BIN_EXE_tubelet"))
            .arg("train")
            .args(bad)
            .arg("--output-dir")
            .arg(dir.path())
            .output()
            .unwrap()
            .status;
        assert!(!status.success(), "{bad:?}");
    }
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
    let status = Command::new(env!("CARGO_BIN_EXE_tubelet"))
        .args(["ablate", "--axis", "heads"])
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
}

#[test]
fn matching_sweep_rows_share_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let axis = AblationAxis::MatchingMode;
    let rows = ablate(&cfg, axis, &axis.default_values()).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), ["per_frame", "tubelet"]);
    let table = read_csv(&dir.path().join("ablation_matching_mode.csv"));
    assert_eq!(table[0], ABLATION_HEADER);
    assert_eq!(table.len(), 3);
    assert!(table.iter().all(|r| r.len() == ABLATION_HEADER.len()));
    for v in ["per_frame", "tubelet"] {
        assert!(dir.path().join("ablate-matching_mode").join(v).join(METRICS_FILE).is_file());
    }
}

#[test]
fn supervision_sweep_has_one_row_per_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.data.scene.frames = 48;
    let axis = AblationAxis::Supervision;
    let rows = ablate(&cfg, axis, &axis.default_values()).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["all", "every_12", "every_24", "one_per_video"]);
    // same architecture in every arm
    assert!(rows.windows(2).all(|w| w[0].params == w[1].params && w[0].gflops_per_layer == w[1].gflops_per_layer));
}

#[test]
fn decoder_depth_sweep_includes_zero_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let axis = AblationAxis::DecoderLayers;
    let rows = ablate(&cfg, axis, &axis.default_values()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].setting, "0");
    assert!(rows.windows(2).all(|w| w[0].params < w[1].params));
    assert_eq!(read_csv(&dir.path().join("ablation_decoder_layers.csv")).len(), 5);
}

#[test]
fn attention_sweep_reports_flops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let axis = AblationAxis::AttentionMode;
    let rows = ablate(&cfg, axis, &axis.default_values()).unwrap();
    assert_eq!(rows[0].setting, "full");
    assert!(rows[1].gflops_per_layer < rows[0].gflops_per_layer);
    assert!(rows.iter().all(|r| r.gflops_per_layer > 0.0));
    let table = read_csv(&dir.path().join("ablation_attention_mode.csv"));
    let col = table[0].iter().position(|h| h == "gflops_per_layer").unwrap();
    assert_eq!(table[1][col].parse::<f64>().unwrap(), (rows[0].gflops_per_layer * 1e9).round() / 1e9);
}

#[test]
fn query_mode_sweep_covers_the_action_binding_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let axis = AblationAxis::QueryMode;
    let rows = ablate(&cfg, axis, &axis.default_values()).unwrap();
    assert_eq!(rows.len(), 3);
    // independent queries carry a full [T, S, d] table instead of S + T rows
    assert!(rows[1].params > rows[0].params);
}

#[test]
fn identical_settings_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = quick(&dir.path().join("a"));
    a.optim.steps = 5;
    let b = ExperimentConfig {
        output_dir: dir.path().join("b"),
        ..a.clone()
    };
    let axis = AblationAxis::MatchingMode;
    let values = vec!["tubelet".to_string()];
    assert_eq!(ablate(&a, axis, &values).unwrap(), ablate(&b, axis, &values).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a/ablation_matching_mode.csv")).unwrap(),
        std::fs::read(dir.path().join("b/ablation_matching_mode.csv")).unwrap()
    );
}
