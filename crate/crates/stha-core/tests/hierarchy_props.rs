use std::collections::BTreeMap;

use stha_core::block::ForwardOptions;
use stha_core::graph::Graph;
use stha_core::hierarchy::{fuse_streams, ArchitectureConfig, Model, Preset};
use stha_core::loss::LossConfig;
use stha_core::train::{compute_step, train_progressive, Phase, StackSelection, TrainData};
use stha_core::{Error, Tensor};

mod common;
use common::{copy_params, perturb, random_tensor, tiny_config, SIDE, WINDOW};

fn probe() -> Tensor {
    random_tensor(&[3, WINDOW, SIDE, SIDE], 42)
}

#[test]
fn residual_chain_telescopes_and_predictions_integrate() {
    let mut model = Model::new(tiny_config(&[3]), 1).unwrap();
    perturb(&mut model, 1);
    let x = probe();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = model
        .stream_forward(&mut g, 0, xv, &|_| false, ForwardOptions::default())
        .unwrap();
    assert_eq!(out.blocks.len(), 3);

    let mut expected = x.clone();
    for (_, b) in &out.blocks {
        expected = expected.zip_map(g.value(b.reconstruction), |a, r| a - r);
    }
    assert!(g.value(out.final_residual).max_abs_diff(&expected) < 1e-5);
    assert!(
        g.value(out.final_residual).max_abs_diff(&x) > 1e-3,
        "reconstructions are not trivial"
    );

    let mut sum = g.value(out.blocks[0].1.prediction).clone();
    for (_, b) in &out.blocks[1..] {
        sum.add_assign(g.value(b.prediction));
    }
    assert_eq!(g.value(out.prediction).data(), sum.data());
}

#[test]
fn masked_stack_equals_model_without_it() {
    let mut cfg = tiny_config(&[2, 1, 1]);
    cfg.streams[0].stacks[1].masked = true;
    let mut full = Model::new(cfg, 3).unwrap();
    perturb(&mut full, 3);

    let mut reduced_cfg = tiny_config(&[2, 1]);
    reduced_cfg.degrees.clear();
    let mut reduced = Model::new(reduced_cfg, 99).unwrap();
    let copied = copy_params(&full, &mut reduced, |name| {
        if name.contains(".t1.") {
            None
        } else {
            Some(name.replace(".t2.", ".t1."))
        }
    });
    assert_eq!(copied, reduced.store().len());

    let x = probe();
    let a = full.predict(0, x.clone()).unwrap();
    let b = reduced.predict(0, x).unwrap();
    assert_eq!(a.max_abs_diff(&b), 0.0);
}

#[test]
fn zero_output_stack_is_neutral() {
    let mut base = Model::new(tiny_config(&[2]), 5).unwrap();
    perturb(&mut base, 5);
    // a freshly built stack predicts and reconstructs exactly zero
    let mut extended = Model::new(tiny_config(&[2, 1]), 6).unwrap();
    copy_params(&base, &mut extended, |n| Some(n.to_string()));
    let x = probe();
    assert_eq!(
        base.predict(0, x.clone())
            .unwrap()
            .max_abs_diff(&extended.predict(0, x).unwrap()),
        0.0
    );
}

#[test]
fn first_stack_contribution_is_independent_of_later_stacks() {
    let mut model = Model::new(tiny_config(&[1, 1]), 8).unwrap();
    perturb(&mut model, 8);
    let x = probe();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = model
        .stream_forward(&mut g, 0, xv, &|_| false, ForwardOptions::default())
        .unwrap();
    let (s0, s1) = (out.stack_predictions[0].1, out.stack_predictions[1].1);
    let sum = g.value(s0).zip_map(g.value(s1), |a, b| a + b);
    assert_eq!(sum.data(), g.value(out.prediction).data());
    let first = g.value(s0).clone();
    drop(g);

    model.set_tolerance(1).unwrap();
    let alone = model.predict(0, x).unwrap();
    assert_eq!(alone.data(), first.data());
}

#[test]
fn reconstruction_ignores_skip_connections() {
    let mut model = Model::new(tiny_config(&[1]), 9).unwrap();
    perturb(&mut model, 9);
    let run = |zero_skips| {
        let mut g = Graph::new();
        let xv = g.input(probe());
        let out = model
            .stream_forward(
                &mut g,
                0,
                xv,
                &|_| false,
                ForwardOptions {
                    siamese: false,
                    zero_skips,
                },
            )
            .unwrap();
        let b = &out.blocks[0].1;
        (
            g.value(b.reconstruction).clone(),
            g.value(b.prediction).clone(),
        )
    };
    let (r0, p0) = run(false);
    let (r1, p1) = run(true);
    assert_eq!(r0.max_abs_diff(&r1), 0.0);
    assert!(p0.max_abs_diff(&p1) > 0.0);
}

#[test]
fn frozen_stacks_get_no_gradient() {
    let mut model = Model::new(tiny_config(&[1, 1]), 10).unwrap();
    perturb(&mut model, 10);
    let x = probe();
    let y = random_tensor(&[3, 1, SIDE, SIDE], 7);
    let mut g = Graph::new();
    let loss = stha_core::train::stream_loss(
        &model,
        &mut g,
        0,
        x.clone(),
        y.clone(),
        &LossConfig::default(),
        &|s| s == 1,
    )
    .unwrap();
    let grads = g.backward(loss.total).unwrap();
    for id in model.stack_param_ids(0) {
        assert!(grads
            .param(id)
            .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }
    assert!(model
        .stack_param_ids(1)
        .iter()
        .any(|&id| grads.param(id).is_some()));

    let step = compute_step(
        &model,
        0,
        x,
        y,
        &LossConfig::default(),
        &StackSelection::Only(vec![1]),
    )
    .unwrap();
    let frozen = model.stack_param_ids(0);
    assert!(step.gradients.iter().all(|(id, _)| !frozen.contains(id)));
    assert!(step
        .memory_writes
        .iter()
        .all(|(id, _)| !frozen.contains(id)));
}

fn moving_bar_videos(n: usize, frames: usize, seed: u64) -> Vec<Vec<stha_core::data::Frame>> {
    (0..n)
        .map(|v| {
            (0..frames)
                .map(|t| {
                    let mut px = vec![0.1; SIDE * SIDE];
                    let col = (t + v + seed as usize) % SIDE;
                    for r in 0..SIDE {
                        px[r * SIDE + col] = 0.9;
                    }
                    stha_core::data::Frame::new(SIDE, SIDE, px).unwrap()
                })
                .collect()
        })
        .collect()
}

#[test]
fn progressive_phase_leaves_earlier_stacks_bitwise_unchanged() {
    let cfg = tiny_config(&[1, 1]);
    let mut model = Model::new(cfg.clone(), 12).unwrap();
    let v1 = moving_bar_videos(2, 6, 0);
    let v2 = moving_bar_videos(2, 6, 5);
    let r1: Vec<&[_]> = v1.iter().map(Vec::as_slice).collect();
    let r2: Vec<&[_]> = v2.iter().map(Vec::as_slice).collect();
    let mut sets = BTreeMap::new();
    sets.insert(1, TrainData::new(&cfg, &r1).unwrap());
    sets.insert(2, TrainData::new(&cfg, &r2).unwrap());
    let loss = LossConfig {
        epochs: 1,
        learning_rate: 1e-3,
        ..LossConfig::default()
    };
    let phase1 = [Phase::new(1, vec![0])];
    train_progressive(&mut model, &sets, &phase1, &loss, 0, &mut |_, _, _, _| {
        Ok(())
    })
    .unwrap();
    let snapshot = model.clone();
    let phase2 = [Phase::new(2, vec![1])];
    train_progressive(&mut model, &sets, &phase2, &loss, 0, &mut |_, _, _, _| {
        Ok(())
    })
    .unwrap();
    for id in model.stack_param_ids(0) {
        assert_eq!(model.store().get(id), snapshot.store().get(id));
    }
    let bank = model.block(0, 1, 0).patterns_id();
    assert_ne!(model.store().get(bank), snapshot.store().get(bank));

    let bad = [Phase::new(7, vec![1])];
    assert!(matches!(
        train_progressive(&mut model, &sets, &bad, &loss, 0, &mut |_, _, _, _| Ok(())),
        Err(Error::UnknownDegree { .. })
    ));
}

#[test]
fn tolerance_degrees_follow_the_toy_activation_table() {
    let cfg = ArchitectureConfig::preset(Preset::Toy, 64, 64, 4);
    assert_eq!(cfg.activation(1).unwrap(), &[0]);
    assert_eq!(cfg.activation(2).unwrap(), &[0, 1]);
    assert_eq!(cfg.activation(3).unwrap(), &[0, 2]);
    let d2 = cfg.set_tolerance(2).unwrap();
    assert_eq!(d2.set_tolerance(2).unwrap(), d2);
    assert_eq!(d2.active_stacks(), vec![0, 1]);
    assert_eq!(cfg.set_tolerance(3).unwrap().active_stacks(), vec![0, 2]);
    match cfg.set_tolerance(4) {
        Err(Error::UnknownDegree {
            degree: 4,
            available,
        }) => assert_eq!(available, vec![1, 2, 3]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn presets_have_documented_sizes() {
    for (preset, blocks, patterns) in [
        (Preset::Ped2, 2, 100),
        (Preset::Avenue, 3, 150),
        (Preset::ShanghaiTech, 3, 250),
    ] {
        let cfg = ArchitectureConfig::preset(preset, 64, 64, 4);
        assert_eq!(cfg.streams.len(), 2);
        assert_eq!(cfg.stack_count(), 1);
        assert_eq!(cfg.streams[0].stacks[0].blocks.len(), blocks);
        assert_eq!(cfg.total_patterns(0), patterns);
        assert_eq!(cfg.total_patterns(1), patterns);
    }
}

#[test]
fn masking_every_stack_is_rejected() {
    let mut cfg = tiny_config(&[1]);
    cfg.streams[0].stacks[0].masked = true;
    assert!(matches!(
        Model::new(cfg, 0),
        Err(Error::AllStacksMasked { stream: 0 })
    ));
}

#[test]
fn stream_fusion_is_convex() {
    assert_eq!(
        fuse_streams(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(),
        vec![0.5, 0.5]
    );
    assert_eq!(
        fuse_streams(&[0.2, 0.8], &[0.6, 0.4], 1.0).unwrap(),
        vec![0.2, 0.8]
    );
    assert!(matches!(
        fuse_streams(&[0.1], &[0.1, 0.2], 0.5),
        Err(Error::MisalignedSeries { .. })
    ));
    assert!(fuse_streams(&[0.1], &[0.2], 1.5).is_err());
}
