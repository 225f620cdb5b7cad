mod support;

use semco::Alpha;
use support::{encoder_distill_check, encoder_sem_check, projection_distill_check, summarize};

fn alphas() -> [Alpha; 4] {
    [Alpha::SOFTMAX, Alpha::new(1.25).unwrap(), Alpha::ENTMAX15, Alpha::SPARSEMAX]
}

#[test]
fn encoder_gradients_under_sem_loss() {
    for alpha in alphas() {
        for tau in [0.3, 1.0] {
            let checks = encoder_sem_check(alpha, tau);
            assert!(checks.len() >= 10);
            let (worst, failing) = summarize(&checks);
            assert!(failing.is_empty(), "alpha {} tau {tau}: {failing:?}", alpha.value());
            eprintln!("sem alpha {} tau {tau}: worst rel err {worst:.2e}", alpha.value());
        }
    }
}

#[test]
fn projection_gradients_under_total_loss() {
    for alpha in alphas() {
        let checks = projection_distill_check(alpha, 0.4, 0.5);
        let (_, failing) = summarize(&checks);
        assert!(failing.is_empty(), "alpha {}: {failing:?}", alpha.value());
    }
}

#[test]
fn encoder_gradients_under_distillation() {
    for alpha in alphas() {
        let checks = encoder_distill_check(alpha, 0.7);
        let (_, failing) = summarize(&checks);
        assert!(failing.is_empty(), "alpha {}: {failing:?}", alpha.value());
    }
}

#[test]
fn pre_norm_biases_have_zero_gradient() {
    // Batch norm removes any constant shift, so these are the tensors the
    // absolute floor exists for.
    let checks = encoder_sem_check(Alpha::ENTMAX15, 0.5);
    let floor = support::abs_floor(&checks);
    for c in checks.iter().filter(|c| c.name.starts_with("mode") && c.name.ends_with(".linear.bias")) {
        assert!(c.numeric_norm < floor, "{}: {}", c.name, c.numeric_norm);
    }
}

