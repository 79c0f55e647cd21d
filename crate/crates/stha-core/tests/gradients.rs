use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stha_core::graph::{DiversityMode, Graph, ParamId};
use stha_core::hierarchy::Model;
use stha_core::loss::{diversity_loss, LossConfig};
use stha_core::memory::{self, AttentionKernel};
use stha_core::train::stream_loss;
use stha_core::Tensor;

mod common;
use common::{perturb, random_tensor, tiny_config, SIDE, WINDOW};

fn total_loss(model: &Model, x: &Tensor, y: &Tensor, cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    stream_loss(model, &mut g, 0, x.clone(), y.clone(), cfg, &|_| true)
        .unwrap()
        .breakdown
        .total
}

fn relative_error(a: f64, b: f64) -> f64 {
    // absolute 1e-8 scale below 1e-4
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[test]
fn total_loss_gradient_matches_central_differences() {
    let mut model = Model::new(tiny_config(&[2]), 11).unwrap();
    // zero biases put ReLU inputs exactly on the kink where the input patch is zero
    perturb(&mut model, 3);
    let x = random_tensor(&[2, WINDOW, SIDE, SIDE], 1);
    let y = random_tensor(&[2, 1, SIDE, SIDE], 2);
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let loss = stream_loss(&model, &mut g, 0, x.clone(), y.clone(), &cfg, &|_| true).unwrap();
    let grads = g.backward(loss.total).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<_> = model.store().ids().collect();
    let mut probe = model.clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &id in &ids {
        let analytic = grads
            .param(id)
            .unwrap_or_else(|| Tensor::zeros(model.store().get(id).shape()));
        let picks = 8.min(analytic.len());
        for _ in 0..picks {
            let i = rng.gen_range(0..analytic.len());
            let orig = probe.store().get(id)[i];
            probe.store_mut().get_mut(id)[i] = orig + h;
            let up = total_loss(&probe, &x, &y, &cfg);
            probe.store_mut().get_mut(id)[i] = orig - h;
            let down = total_loss(&probe, &x, &y, &cfg);
            probe.store_mut().get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let re = relative_error(analytic[i], numeric);
            worst = worst.max(re);
            checked += 1;
        }
    }
    assert!(checked >= 200, "only {checked} entries checked");
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn memory_read_gradient_matches_central_differences() {
    for kernel in [
        AttentionKernel::StudentTDistance,
        AttentionKernel::LiteralDot,
    ] {
        let q = random_tensor(&[3, 4], 3);
        let k = random_tensor(&[5, 4], 4);
        let w = random_tensor(&[3, 4], 5);
        let f = |q: &Tensor, k: &Tensor| -> f64 {
            let (r, _) = memory::read(k, q, kernel).unwrap();
            r.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (gq, gk) = memory::read_backward(&k, &q, kernel, &w).unwrap();
        let h = 1e-5;
        for (target, grad, is_q) in [(&q, &gq, true), (&k, &gk, false)] {
            for i in 0..target.len() {
                let mut plus = target.clone();
                let mut minus = target.clone();
                plus[i] += h;
                minus[i] -= h;
                let numeric = if is_q {
                    (f(&plus, &k) - f(&minus, &k)) / (2.0 * h)
                } else {
                    (f(&q, &plus) - f(&q, &minus)) / (2.0 * h)
                };
                assert!(
                    relative_error(grad[i], numeric) < 1e-4,
                    "{kernel:?} entry {i}"
                );
            }
        }
    }
}

#[test]
fn far_pattern_gets_negligible_gradient_under_literal_kernel() {
    let q = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
    let k = Tensor::from_vec(&[2, 2], vec![0.1, 0.1, 1e6, 1e6]).unwrap();
    let w = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
    let (_, gk) = memory::read_backward(&k, &q, AttentionKernel::LiteralDot, &w).unwrap();
    assert!(gk.row(1).iter().all(|g| g.abs() < 1e-5));
}

#[test]
fn hinge_diversity_step_separates_close_patterns() {
    let a = Tensor::from_vec(&[1, 2], vec![0.4, 0.5]).unwrap();
    let b = Tensor::from_vec(&[1, 2], vec![0.5, 0.6]).unwrap();
    let dist = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| (x - y).powi(2)).sum().sqrt();
    let before = dist(&a, &b);
    let mut g = Graph::new();
    let (pa, pb) = (
        g.param_owned(ParamId(0), a.clone()),
        g.param_owned(ParamId(1), b.clone()),
    );
    let d = g
        .diversity(&[pa, pb], 1.0, DiversityMode::HingeNegative)
        .unwrap();
    assert!(
        (g.value(d).item() - diversity_loss(&[&a, &b], 1.0, DiversityMode::HingeNegative).unwrap())
            .abs()
            < 1e-12
    );
    let grads = g.backward(d).unwrap();
    let step = |t: &Tensor, gr: Tensor| t.zip_map(&gr, |v, g| v - 0.05 * g);
    let a2 = step(&a, grads.param(ParamId(0)).unwrap());
    let b2 = step(&b, grads.param(ParamId(1)).unwrap());
    assert!(dist(&a2, &b2) > before);
}
