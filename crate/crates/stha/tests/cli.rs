use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use stha::checkpoint::Checkpoint;
use stha::commands::{
    eval, gen_data, score, train, EvalArgs, GenDataArgs, ScoreArgs, TrainArgs, CHECKPOINT_FILE,
    PERIODIC_CHECKPOINT_FILE,
};
use stha::config::{config_hash, load_run, named_config, RunConfig, NAMED_CONFIGS};
use stha::dataset::{read_dataset, read_frame, write_frame};
use stha::report::{read_scores, write_scores, Summary};
use stha::CliError;
use stha_core::data::Frame;
use stha_core::evaluate::{auc_of, VideoScores};
use stha_core::hierarchy::Model;
use stha_core::scoring::ScoreSeries;
use stha_core::Tensor;
use tempfile::TempDir;

const GEN: &str = r#"{"canvas":{"height":32,"width":32},"n_videos":{"train":2,"test":2},
"frames_per_video":22,"degrees":3,"seed":0}"#;

const RUN: &str = r#"{"preset":"toy","base_width":2,"loss":{"epochs":2,"learning_rate":0.001},
"schedule":[{"degree":1,"train_stacks":[0]},{"degree":2,"train_stacks":[1],"epochs":1},
{"degree":3,"train_stacks":[2],"epochs":1}]}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn dataset(tmp: &TempDir) -> PathBuf {
    let out = tmp.path().join("data");
    gen_data(&GenDataArgs {
        config: Some(write(tmp.path(), "gen.json", GEN)),
        out: out.clone(),
        seed: Some(5),
    })
    .unwrap();
    out
}

fn train_args(tmp: &TempDir, data: &Path, degrees: Option<Vec<u32>>) -> TrainArgs {
    TrainArgs {
        config: Some(write(tmp.path(), "run.json", RUN)),
        data: data.to_path_buf(),
        out: tmp.path().join("run"),
        seed: Some(1),
        preset: None,
        degrees,
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_dataset_trees() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ta = tree(&dataset(&a));
    let tb = tree(&dataset(&b));
    assert!(ta.len() > 100);
    assert_eq!(ta, tb);
}

#[test]
fn dataset_metadata_lists_every_degree_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let ds = read_dataset(&root).unwrap();
    assert_eq!(ds.meta.degrees, vec![1, 2, 3]);
    assert_eq!(ds.train.len(), 6);
    assert_eq!(ds.test.len(), 2);
    let generated =
        stha_core::data::generate_synthetic(&serde_json::from_str(GEN).unwrap(), 5).unwrap();
    for (disk, mem) in ds.test.iter().zip(&generated.test) {
        assert_eq!(disk.labels(2).unwrap().unwrap(), mem.labels(2).unwrap());
        for (f, g) in disk.frames.iter().zip(&mem.frames) {
            assert!(f
                .pixels()
                .iter()
                .zip(g.pixels())
                .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
}

#[test]
fn frames_survive_png_quantization() {
    let tmp = TempDir::new().unwrap();
    let px: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let f = Frame::new(3, 4, px).unwrap();
    let p = tmp.path().join("f.png");
    write_frame(&p, &f).unwrap();
    let g = read_frame(&p).unwrap();
    assert_eq!((g.height(), g.width()), (3, 4));
    assert!(f
        .pixels()
        .iter()
        .zip(g.pixels())
        .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
}

#[test]
fn missing_config_exits_with_code_two_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere.json");
    let out = Command::new(env!("CARGO_BIN_EXE_stha"))
        .args(["gen-data", "--config"])
        .arg(&missing)
        .arg("--out")
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_config");
    assert!(err["message"].as_str().unwrap().contains("nowhere.json"));
}

#[test]
fn bundled_configs_parse_and_ped2_has_two_small_blocks() {
    for (name, _) in NAMED_CONFIGS {
        assert!(named_config(name).is_some(), "{name}");
    }
    let cfg = load_run(Some(Path::new("ped2"))).unwrap();
    let arch = cfg.architecture(None, 64, 64).unwrap();
    assert_eq!(arch.stack_count(), 1);
    assert_eq!(arch.streams[0].stacks[0].blocks.len(), 2);
    assert!(arch.streams[0].stacks[0]
        .blocks
        .iter()
        .all(|b| b.size_class == stha_core::block::SizeClass::Small));
    assert_eq!(arch.total_patterns(0), 100);
    let toy = RunConfig::default()
        .architecture(Some("toy"), 64, 64)
        .unwrap();
    assert_eq!(toy.stack_count(), 3);
    assert!(RunConfig::default()
        .architecture(Some("nope"), 64, 64)
        .is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let arch = RunConfig {
        base_width: Some(2),
        ..RunConfig::default()
    }
    .architecture(Some("toy"), 32, 32)
    .unwrap();
    let mut model = Model::new(arch, 3).unwrap();
    for id in model.store().ids().collect::<Vec<_>>() {
        let t = model.store_mut().get_mut(id);
        let n = t.len();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i * 7 + n) % 13) as f64 / 13.0;
        }
    }
    let ck = Checkpoint {
        model: model.clone(),
        seed: 3,
        history: Vec::new(),
    };
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("m.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let probe = Tensor::from_vec(
        &[2, 4, 32, 32],
        (0..2 * 4 * 32 * 32)
            .map(|i| (i % 17) as f64 / 17.0)
            .collect(),
    )
    .unwrap();
    for s in 0..2 {
        let a = model.predict(s, probe.clone()).unwrap();
        let b = back.model.predict(s, probe.clone()).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    let mut bytes = ck.to_bytes();
    bytes[8] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes, &path),
        Err(CliError::CheckpointVersion { found: 9, .. })
    ));
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all", &path).is_err());
    let full = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&full[..full.len() - 8], &path).is_err());
}

#[test]
fn degrees_flag_runs_phases_in_order() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let out = train(&train_args(&tmp, &data, Some(vec![1, 3])), &mut |_, _| {
        Ok(())
    })
    .unwrap();
    let degrees: Vec<u32> = out.phases.iter().map(|p| p.phase.degree).collect();
    assert_eq!(degrees, vec![1, 3]);
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(ck.history, out.phases);
    let metrics = fs::read_to_string(&out.metrics).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 + 1);
    assert!(metrics.starts_with("phase,degree,epoch,total,prediction,diversity,siamese"));

    let bad = train(&train_args(&tmp, &data, Some(vec![4])), &mut |_, _| Ok(()));
    assert!(matches!(
        bad,
        Err(CliError::Core(stha_core::Error::UnknownDegree { .. }))
    ));
}

#[test]
fn interrupted_run_leaves_a_loadable_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let args = train_args(&tmp, &data, None);
    let res = train(&args, &mut |phase, epoch| {
        if phase == 1 && epoch == 0 {
            Err(CliError::Usage("stopped".into()))
        } else {
            Ok(())
        }
    });
    assert!(matches!(res, Err(CliError::Usage(ref m)) if m == "stopped"));
    assert!(!args.out.join(CHECKPOINT_FILE).exists());
    let ck = Checkpoint::load(&args.out.join(PERIODIC_CHECKPOINT_FILE)).unwrap();
    let shape: Vec<(u32, usize)> = ck
        .history
        .iter()
        .map(|p| (p.phase.degree, p.report.epochs.len()))
        .collect();
    assert_eq!(shape, vec![(1, 2), (2, 1)]);
}

#[test]
fn eval_records_activation_per_tolerance_and_writes_plots() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let trained = train(&train_args(&tmp, &data, None), &mut |_, _| Ok(())).unwrap();
    let run_eval = |d: u32, out: &str| -> Summary {
        eval(&EvalArgs {
            checkpoint: trained.checkpoint.clone(),
            data: data.clone(),
            out: tmp.path().join(out),
            tolerance: Some(d),
            config: None,
        })
        .unwrap()
    };
    let one = run_eval(1, "e1");
    let two = run_eval(2, "e2");
    assert_eq!(one.evaluations[0].active_stacks, vec![vec![0], vec![0]]);
    assert_eq!(
        two.evaluations[0].active_stacks,
        vec![vec![0, 1], vec![0, 1]]
    );
    assert_eq!(one.config_hash, two.config_hash);
    assert_eq!(one.config_hash, trained.config_hash);
    let on_disk: Summary =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e2/summary.json")).unwrap())
            .unwrap();
    assert_eq!(on_disk, two);

    let plots: Vec<String> = fs::read_dir(tmp.path().join("e1/degree-1/plots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    assert_eq!(plots, vec!["test-000.png", "test-001.png"]);
    let again = run_eval(1, "e1b");
    assert_eq!(
        again,
        Summary {
            checkpoint: again.checkpoint.clone(),
            ..one.clone()
        }
    );
    assert_eq!(
        tree(&tmp.path().join("e1/degree-1")),
        tree(&tmp.path().join("e1b/degree-1"))
    );

    let rows = read_scores(&tmp.path().join("e1/degree-1/scores/test-000.csv")).unwrap();
    assert_eq!(rows.len(), one.evaluations[0].videos[0].frames);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.anomaly_score)));

    let all = eval(&EvalArgs {
        checkpoint: trained.checkpoint.clone(),
        data: data.clone(),
        out: tmp.path().join("eall"),
        tolerance: None,
        config: None,
    })
    .unwrap();
    assert_eq!(all.evaluations.len(), 3);

    let unknown = eval(&EvalArgs {
        checkpoint: trained.checkpoint.clone(),
        data: data.clone(),
        out: tmp.path().join("ebad"),
        tolerance: Some(7),
        config: None,
    });
    match unknown {
        Err(e @ CliError::Core(stha_core::Error::UnknownDegree { .. })) => {
            let j: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
            assert_eq!(j["available_degrees"], serde_json::json!([1, 2, 3]));
        }
        other => panic!("unexpected {other:?}"),
    }

    let single = score(&ScoreArgs {
        checkpoint: trained.checkpoint.clone(),
        data: data.join("test/test-001"),
        out: tmp.path().join("single"),
        tolerance: Some(3),
        config: None,
    })
    .unwrap();
    assert_eq!(single.degree, 3);
    assert_eq!(single.active_stacks, vec![vec![0, 2], vec![0, 2]]);
    assert!(single.plot.exists() && single.scores.exists());
}

#[test]
fn command_errors_are_json_on_stderr() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stha"))
        .args(["eval", "--checkpoint"])
        .arg(tmp.path().join("missing.bin"))
        .arg("--data")
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["path"].as_str().unwrap().ends_with("missing.bin"));
}

#[test]
fn non_finite_training_aborts_with_diagnostics() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let cfg = write(
        tmp.path(),
        "boom.json",
        r#"{"preset":"ped2","base_width":2,"loss":{"epochs":3,"learning_rate":1e300}}"#,
    );
    let res = train(
        &TrainArgs {
            config: Some(cfg),
            data,
            out: tmp.path().join("boom"),
            seed: Some(0),
            preset: None,
            degrees: None,
        },
        &mut |_, _| Ok(()),
    );
    match res {
        Err(e @ CliError::Core(stha_core::Error::NonFiniteLoss { .. })) => {
            assert_eq!(e.kind(), "non_finite_loss");
            assert!(e.to_string().contains("largest"), "{e}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn perfectly_separated_scores_give_unit_auc_and_csv_round_trips() {
    let frames: Vec<usize> = (4..12).collect();
    let labels: Vec<bool> = frames.iter().map(|&f| f >= 8).collect();
    let psnr: Vec<f64> = labels
        .iter()
        .map(|&l| if l { 10.0 } else { 30.0 })
        .collect();
    let series = ScoreSeries::new("v".into(), frames.clone(), psnr, labels.clone()).unwrap();
    let scores = VideoScores {
        video_id: "v".into(),
        frames,
        labels,
        fused: series.anomaly.clone(),
        streams: vec![series],
    };
    let ev = auc_of(vec![scores.clone()]).unwrap();
    assert_eq!(ev.auc, 1.0);
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("v.csv");
    write_scores(&p, &scores).unwrap();
    let rows = read_scores(&p).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0].frame_index, 4);
    assert_eq!(rows[7].label, 1);
    assert_eq!(rows[7].anomaly_score, 1.0);
}

#[test]
fn config_hash_ignores_tolerance_masks() {
    let arch = RunConfig::default()
        .architecture(Some("toy"), 64, 64)
        .unwrap();
    let two = arch.set_tolerance(2).unwrap();
    assert_ne!(arch, two);
    assert_eq!(config_hash(&arch), config_hash(&two));
    let other = RunConfig::default()
        .architecture(Some("ped2"), 64, 64)
        .unwrap();
    assert_ne!(config_hash(&arch), config_hash(&other));
}
