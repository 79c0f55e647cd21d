use std::collections::BTreeMap;
use std::time::Instant;

use stha_core::data::{generate_synthetic, GeneratorConfig, ObjectClass};
use stha_core::evaluate::{evaluate_videos, score_video};
use stha_core::hierarchy::{ArchitectureConfig, Model, Preset};
use stha_core::loss::LossConfig;
use stha_core::scoring::PeakMode;
use stha_core::train::{default_schedule, train_progressive, TrainData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let train_videos: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(20);
    let mut gen = GeneratorConfig::default();
    gen.n_videos.train = train_videos;
    let ds = generate_synthetic(&gen, 7).unwrap();
    let cfg =
        ArchitectureConfig::preset(Preset::Toy, 64, 64, 4).map_blocks(|b| b.base_width = width);
    let mut model = Model::new(cfg.clone(), 1).unwrap();
    let mut sets = BTreeMap::new();
    for d in 1..=3 {
        let vids: Vec<&[_]> = ds
            .train_split(d)
            .iter()
            .map(|v| v.frames.as_slice())
            .collect();
        sets.insert(d, TrainData::new(&cfg, &vids).unwrap());
    }
    let loss = LossConfig {
        learning_rate: lr,
        epochs,
        ..LossConfig::default()
    };
    let t0 = Instant::now();
    let later: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(epochs);
    let mut schedule = default_schedule(&cfg).unwrap();
    for p in schedule.iter_mut().skip(1) {
        p.epochs = Some(later);
        p.learning_rate = args.get(6).map(|s| s.parse().unwrap());
    }
    println!("{schedule:?}");
    train_progressive(&mut model, &sets, &schedule, &loss, 3, &mut |p, e, l, _| {
        println!(
            "degree {} epoch {e}: {:.3} at {:?}",
            p.degree,
            l.total,
            t0.elapsed()
        );
        Ok(())
    })
    .unwrap();
    let test: Vec<_> = ds.test.iter().collect();
    for d in 1..=3 {
        model.set_tolerance(d).unwrap();
        let ev = evaluate_videos(&model, &test, d, PeakMode::MaxPrediction, 16).unwrap();
        println!(
            "tolerance {d}: auc {:.4} streams {:?}",
            ev.auc, ev.stream_auc
        );
    }
    let (mut hi_norm, mut hi_raw, mut n) = (0, 0, 0);
    for v in &test {
        model.set_tolerance(1).unwrap();
        let a = score_video(&model, &v.id, &v.frames, None, PeakMode::MaxPrediction, 16).unwrap();
        model.set_tolerance(2).unwrap();
        let b = score_video(&model, &v.id, &v.frames, None, PeakMode::MaxPrediction, 16).unwrap();
        for (i, &f) in a.frames.iter().enumerate() {
            let p = v.presence[f];
            if p.contains(ObjectClass::Circle) && !p.contains(ObjectClass::Triangle) {
                n += 1;
                if a.fused[i] > b.fused[i] {
                    hi_norm += 1;
                }
                let ra: f64 = a.streams.iter().map(|s| s.raw_psnr[i]).sum();
                let rb: f64 = b.streams.iter().map(|s| s.raw_psnr[i]).sum();
                if ra < rb {
                    hi_raw += 1;
                }
            }
        }
    }
    for tol in 1..=3 {
        model.set_tolerance(tol).unwrap();
        let mut acc = std::collections::BTreeMap::<&str, (f64, f64, f64, usize)>::new();
        for v in &test {
            let sc =
                score_video(&model, &v.id, &v.frames, None, PeakMode::MaxPrediction, 16).unwrap();
            for (i, &f) in sc.frames.iter().enumerate() {
                let p = v.presence[f];
                let key = if p.contains(ObjectClass::Triangle) {
                    "triangle"
                } else if p.contains(ObjectClass::Circle) {
                    "circle"
                } else {
                    "squares"
                };
                let e = acc.entry(key).or_default();
                e.0 += sc.fused[i];
                e.1 += sc.streams[0].raw_psnr[i];
                e.2 += sc.streams[1].raw_psnr[i];
                e.3 += 1;
            }
        }
        for (k, (a, b, c, n)) in acc {
            let n = n as f64;
            println!(
                "tol {tol} {k}: fused {:.3} psnr app {:.2} mot {:.2}",
                a / n,
                b / n,
                c / n
            );
        }
    }
    println!("circle frames {n}: normalized higher {hi_norm}, raw psnr lower {hi_raw}");
}
