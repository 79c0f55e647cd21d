use std::time::Instant;

use stha_core::data::{generate_synthetic, GeneratorConfig};
use stha_core::evaluate::evaluate_videos;
use stha_core::hierarchy::{ArchitectureConfig, Model, Preset};
use stha_core::loss::LossConfig;
use stha_core::scoring::PeakMode;
use stha_core::train::{train_with, StackSelection, TrainData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let gen = GeneratorConfig {
        degrees: 1,
        ..GeneratorConfig::default()
    };
    let ds = generate_synthetic(&gen, 7).unwrap();
    let cfg =
        ArchitectureConfig::preset(Preset::Ped2, 64, 64, 4).map_blocks(|b| b.base_width = width);
    let mut model = Model::new(cfg.clone(), 1).unwrap();
    let vids: Vec<&[_]> = ds
        .train_split(1)
        .iter()
        .map(|v| v.frames.as_slice())
        .collect();
    let data = TrainData::new(&cfg, &vids).unwrap();
    let loss = LossConfig {
        learning_rate: lr,
        epochs: 1,
        ..LossConfig::default()
    };
    let test: Vec<_> = ds.test.iter().collect();
    let t0 = Instant::now();
    for e in 0..epochs {
        train_with(
            &mut model,
            &data,
            &loss,
            e as u64,
            &StackSelection::Active,
            &mut |_, l, _| {
                println!("epoch {e}: {l:?} at {:?}", t0.elapsed());
                Ok(())
            },
        )
        .unwrap();
        let ev = evaluate_videos(&model, &test, 1, PeakMode::MaxPrediction, 16).unwrap();
        println!("  auc fused {:.4} streams {:?}", ev.auc, ev.stream_auc);
    }
}
