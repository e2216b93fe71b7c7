//! Analytic versus central finite-difference gradient comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, TrainExample};
use crate::autograd::Grads;

const STEP: f64 = 1e-4;
const SAMPLE_FRACTION: f64 = 0.01;
/// Denominator floor so that near-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Checks the model's own backward pass on a random 1% of parameters.
pub fn grad_check(model: &Model, ex: &TrainExample, seed: u64) -> GradCheckReport {
    let mut g = Grads::zeros_like(&model.params);
    model.example_loss(ex, 1.0, Some(&mut g));
    grad_check_against(model, ex, &g, seed)
}

/// Checks every parameter; meant for small models.
pub fn grad_check_full(model: &Model, ex: &TrainExample) -> GradCheckReport {
    let mut g = Grads::zeros_like(&model.params);
    model.example_loss(ex, 1.0, Some(&mut g));
    check(model, ex, &g, 0, 1.0)
}

/// Compares `analytic` with central differences of the example loss.
pub fn grad_check_against(model: &Model, ex: &TrainExample, analytic: &Grads, seed: u64) -> GradCheckReport {
    check(model, ex, analytic, seed, SAMPLE_FRACTION)
}

fn check(model: &Model, ex: &TrainExample, analytic: &Grads, seed: u64, fraction: f64) -> GradCheckReport {
    let offsets: Vec<usize> = model
        .params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total = model.num_params();
    let n = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for flat in sample(&mut rng, total, n).into_iter() {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[pi];
        let orig = probe.params[pi].data[j];
        probe.params[pi].data[j] = orig + STEP;
        let up = probe.example_loss(ex, 1.0, None);
        probe.params[pi].data[j] = orig - STEP;
        let down = probe.example_loss(ex, 1.0, None);
        probe.params[pi].data[j] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.tensors[pi].data[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((model.names[pi].clone(), j));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::EOS;

    fn small(cls: bool) -> Model {
        let mut c = ModelConfig::new(24);
        c.d_model = 8;
        c.heads = 2;
        c.ff_dim = 12;
        c.layers = 1;
        c.max_len = 8;
        c.has_classifier_head = cls;
        c.seed = 11;
        let mut m = Model::new(c).unwrap();
        // Non-zero classifier head so its gradient path is exercised.
        if let Some((w, _)) = m.layout.cls {
            for (i, v) in m.params[w].data.iter_mut().enumerate() {
                *v = ((i % 7) as f64 - 3.0) * 0.05;
            }
        }
        m
    }

    #[test]
    fn analytic_gradients_agree() {
        let m = small(true);
        assert!(m.num_params() <= 10_000);
        let ex = TrainExample::labelled(vec![21, 22, 23], vec![22, 21, EOS], true);
        for seed in 0..5 {
            let r = grad_check(&m, &ex, seed);
            assert!(r.checked >= 1);
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let m = small(false);
        let ex = TrainExample::new(vec![21, 22], vec![23, EOS]);
        let mut g = Grads::zeros_like(&m.params);
        m.example_loss(&ex, 1.0, Some(&mut g));
        for t in &mut g.tensors {
            t.data.iter_mut().for_each(|v| *v = -*v * 1.5 + 0.01);
        }
        let r = grad_check_against(&m, &ex, &g, 0);
        assert!(r.max_rel_error > 1e-1, "{r:?}");
    }

    #[test]
    fn certain_prediction_has_near_zero_gradient() {
        // With zero weights and a huge EOS bias the target has probability ~1.
        let mut m = small(false);
        m.params.iter_mut().for_each(|p| p.fill(0.0));
        let bias = m.layout.lm_bias;
        m.params[bias].data[EOS] = 60.0;
        let ex = TrainExample::new(vec![21], vec![EOS]);
        let mut g = Grads::zeros_like(&m.params);
        let loss = m.example_loss(&ex, 1.0, Some(&mut g));
        assert!(loss < 1e-20);
        assert!(g.norm() < 1e-20);
    }
}
