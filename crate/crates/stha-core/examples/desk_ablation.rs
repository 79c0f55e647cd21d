use std::time::Instant;

use stha_core::data::{generate_synthetic, GeneratorConfig};
use stha_core::evaluate::evaluate_videos;
use stha_core::hierarchy::{ArchitectureConfig, Model, Preset};
use stha_core::loss::LossConfig;
use stha_core::scoring::PeakMode;
use stha_core::train::{train, TrainData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let gen = GeneratorConfig {
        degrees: 1,
        ..GeneratorConfig::default()
    };
    let ds = generate_synthetic(&gen, 7).unwrap();
    let test: Vec<_> = ds.test.iter().collect();
    let t0 = Instant::now();
    for (name, memory, ld, ls) in [
        ("no siamese", true, 0.13, 0.0),
        ("no patterns", false, 0.13, 0.28),
        ("no diversity", true, 0.0, 0.28),
        ("full", true, 0.13, 0.28),
    ] {
        let cfg = ArchitectureConfig::preset(Preset::Ped2, 64, 64, 4).map_blocks(|b| {
            b.base_width = 8;
            b.memory_enabled = memory;
        });
        let mut model = Model::new(cfg.clone(), seed).unwrap();
        let vids: Vec<&[_]> = ds
            .train_split(1)
            .iter()
            .map(|v| v.frames.as_slice())
            .collect();
        let data = TrainData::new(&cfg, &vids).unwrap();
        let loss = LossConfig {
            lambda_diversity: ld,
            lambda_siamese: ls,
            epochs,
            ..LossConfig::default()
        };
        train(&mut model, &data, &loss, seed).unwrap();
        let ev = evaluate_videos(&model, &test, 1, PeakMode::MaxPrediction, 16).unwrap();
        println!(
            "{name}: auc {:.4} streams {:?} at {:?}",
            ev.auc,
            ev.stream_auc,
            t0.elapsed()
        );
    }
}
