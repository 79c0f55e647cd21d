use std::time::Instant;

use stha_core::block::ForwardOptions;
use stha_core::graph::Graph;
use stha_core::hierarchy::{ArchitectureConfig, Model, Preset};
use stha_core::Tensor;

fn main() {
    let width: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(32);
    let cfg =
        ArchitectureConfig::preset(Preset::Ped2, 64, 64, 4).map_blocks(|b| b.base_width = width);
    let model = Model::new(cfg, 1).unwrap();
    println!("params: {}", model.store().scalar_count());
    let x = Tensor::full(&[8, 4, 64, 64], 0.3);
    let t0 = Instant::now();
    for _ in 0..3 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = model
            .stream_forward(
                &mut g,
                0,
                xv,
                &|_| true,
                ForwardOptions {
                    siamese: true,
                    zero_skips: false,
                },
            )
            .unwrap();
        let l = g.row_norm_sum(out.prediction);
        let t1 = Instant::now();
        let grads = g.backward(l).unwrap();
        println!("backward {:?}", t1.elapsed());
        std::hint::black_box(grads);
    }
    println!(
        "per batch of 8 (one stream, 2 blocks): {:?}",
        t0.elapsed() / 3
    );
}
