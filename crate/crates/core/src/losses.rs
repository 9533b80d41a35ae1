//! Scalar training objectives, built from tape primitives so every one of
//! them is differentiable end to end. All logs go through `safe_log` and all
//! reductions are batch means.

use crate::diffcore::{Tape, TensorValue, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-7;

fn check_labels(labels: &[usize], classes: usize, op: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "{op}: label {bad} out of range for {classes} source classes"
        )));
    }
    Ok(())
}

fn check_rows(tape: &Tape, probs: Var, n: usize, op: &'static str) -> Result<()> {
    let rows = tape.value(probs).rows();
    if rows != n {
        return Err(Error::dim(op, format!("{rows} probability rows for {n} labels")));
    }
    Ok(())
}

/// `P(unknown | x)`: the last column of the domain classifier output.
pub fn p_unknown(tape: &mut Tape, gc1_probs: Var) -> Result<Var> {
    let cols = tape.value(gc1_probs).cols();
    tape.column(gc1_probs, cols - 1)
}

/// Source cross-entropy of the domain classifier:
/// `-(1/n_s) sum_i log p_i[y_i]`, with `y_i < N` for `N + 1` output columns.
pub fn loss_source_ce(tape: &mut Tape, gc1_probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let cols = tape.value(gc1_probs).cols();
    check_labels(labels, cols.saturating_sub(1), "loss_source_ce")?;
    check_rows(tape, gc1_probs, labels.len(), "loss_source_ce")?;
    let picked = tape.gather(gc1_probs, labels)?;
    let logs = tape.safe_log(picked, eps)?;
    let mean = tape.mean(logs)?;
    tape.scale_shift(mean, -1.0, 0.0)
}

/// Weighted adversarial binary cross-entropy on target samples:
/// `-(1/n_t) sum_j [w_j log p_j + (1 - w_j) log(1 - p_j)]`.
///
/// The weights are plain numbers, so no gradient can flow into whatever
/// produced them.
pub fn loss_adv_weighted(tape: &mut Tape, p_unknown: Var, weights: &[f64], eps: f64) -> Result<Var> {
    let n = tape.value(p_unknown).len();
    if weights.len() != n {
        return Err(Error::dim(
            "loss_adv_weighted",
            format!("{} weights for {n} target samples", weights.len()),
        ));
    }
    if let Some(bad) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Contract(format!("adversarial weight {bad} outside [0, 1]")));
    }
    let w = tape.constant(TensorValue::vector(weights.to_vec()))?;
    let w_rest = tape.constant(TensorValue::vector(weights.iter().map(|w| 1.0 - w).collect()))?;
    let log_p = tape.safe_log(p_unknown, eps)?;
    let q = tape.scale_shift(p_unknown, -1.0, 1.0)?;
    let log_q = tape.safe_log(q, eps)?;
    let a = tape.mul(w, log_p)?;
    let b = tape.mul(w_rest, log_q)?;
    let sum = tape.add(a, b)?;
    let mean = tape.mean(sum)?;
    tape.scale_shift(mean, -1.0, 0.0)
}

/// Fixed-threshold adversarial loss: [`loss_adv_weighted`] with every weight `t`.
pub fn loss_adv_fixed_t(tape: &mut Tape, p_unknown: Var, t: f64, eps: f64) -> Result<Var> {
    let n = tape.value(p_unknown).len();
    loss_adv_weighted(tape, p_unknown, &vec![t; n], eps)
}

/// One-vs-rest binary loss of the supplementary classifier on source samples:
/// `-(1/n_s) sum_i [log p_i[y_i] + sum_{k != y_i} log(1 - p_i[k])]`.
pub fn loss_supplementary_ovr(tape: &mut Tape, gc2_probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let k = tape.value(gc2_probs).cols();
    check_labels(labels, k, "loss_supplementary_ovr")?;
    check_rows(tape, gc2_probs, labels.len(), "loss_supplementary_ovr")?;
    let mut onehot = vec![0.0; labels.len() * k];
    for (r, &y) in labels.iter().enumerate() {
        onehot[r * k + y] = 1.0;
    }
    let rest = onehot.iter().map(|y| 1.0 - y).collect();
    let y = tape.constant(TensorValue::matrix(labels.len(), k, onehot)?)?;
    let y_rest = tape.constant(TensorValue::matrix(labels.len(), k, rest)?)?;
    let log_p = tape.safe_log(gc2_probs, eps)?;
    let q = tape.scale_shift(gc2_probs, -1.0, 1.0)?;
    let log_q = tape.safe_log(q, eps)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(y_rest, log_q)?;
    let sum = tape.add(a, b)?;
    let per_sample = tape.row_sum(sum)?;
    let mean = tape.mean(per_sample)?;
    tape.scale_shift(mean, -1.0, 0.0)
}

/// Source-vs-target discrimination loss on the composite similarity:
/// `-(1/n_s) sum log G_D(x_s) - (1/n_t) sum log(1 - G_D(x_t))`.
pub fn loss_domain_disc(tape: &mut Tape, gd_source: Var, gd_target: Var, eps: f64) -> Result<Var> {
    let log_s = tape.safe_log(gd_source, eps)?;
    let mean_s = tape.mean(log_s)?;
    let q = tape.scale_shift(gd_target, -1.0, 1.0)?;
    let log_t = tape.safe_log(q, eps)?;
    let mean_t = tape.mean(log_t)?;
    let sum = tape.add(mean_s, mean_t)?;
    tape.scale_shift(sum, -1.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = DEFAULT_EPS;

    fn probs(t: &mut Tape, rows: &[&[f64]]) -> Var {
        t.leaf(TensorValue::from_rows(rows).unwrap()).unwrap()
    }

    fn vector(t: &mut Tape, v: &[f64]) -> Var {
        t.leaf(TensorValue::vector(v.to_vec())).unwrap()
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn source_ce_values() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.25, 0.5, 0.25]]);
        let l = loss_source_ce(&mut t, p, &[0], EPS).unwrap();
        close(t.value(l).item(), 4f64.ln());

        let p = probs(&mut t, &[&[0.5, 0.2, 0.3], &[0.25, 0.25, 0.5]]);
        let l = loss_source_ce(&mut t, p, &[0, 1], EPS).unwrap();
        close(t.value(l).item(), 1.5 * 2f64.ln());

        // A certain prediction costs only the clamp floor.
        let p = probs(&mut t, &[&[1.0, 0.0, 0.0]]);
        let l = loss_source_ce(&mut t, p, &[0], EPS).unwrap();
        close(t.value(l).item(), -(1.0 - EPS).ln());
    }

    #[test]
    fn source_ce_rejects_unknown_column_label() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.2, 0.3, 0.5]]);
        let err = loss_source_ce(&mut t, p, &[2], EPS).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn adversarial_values() {
        let mut t = Tape::new();
        let p = vector(&mut t, &[0.5]);
        let l = loss_adv_weighted(&mut t, p, &[0.5], EPS).unwrap();
        close(t.value(l).item(), 2f64.ln());

        let p = vector(&mut t, &[0.9]);
        let l = loss_adv_weighted(&mut t, p, &[1.0], EPS).unwrap();
        close(t.value(l).item(), -(0.9f64).ln());
        let l = loss_adv_fixed_t(&mut t, p, 0.5, EPS).unwrap();
        close(t.value(l).item(), -(0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln()));

        let p = vector(&mut t, &[0.1]);
        let l = loss_adv_weighted(&mut t, p, &[0.0], EPS).unwrap();
        close(t.value(l).item(), -(0.9f64).ln());

        let p = vector(&mut t, &[0.5]);
        let l = loss_adv_fixed_t(&mut t, p, 0.5, EPS).unwrap();
        close(t.value(l).item(), 2f64.ln());
    }

    #[test]
    fn adversarial_rejects_bad_weights() {
        let mut t = Tape::new();
        let p = vector(&mut t, &[0.5, 0.5]);
        assert!(loss_adv_weighted(&mut t, p, &[0.5], EPS).is_err());
        assert!(loss_adv_weighted(&mut t, p, &[0.5, 1.5], EPS).is_err());
    }

    #[test]
    fn ovr_values() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.25, 0.25]]);
        let l = loss_supplementary_ovr(&mut t, p, &[0], EPS).unwrap();
        close(t.value(l).item(), -(0.25f64.ln()) - 0.75f64.ln());

        let p = probs(&mut t, &[&[0.5]]);
        let l = loss_supplementary_ovr(&mut t, p, &[0], EPS).unwrap();
        close(t.value(l).item(), 2f64.ln());

        let p = probs(&mut t, &[&[0.05; 10]]);
        let l = loss_supplementary_ovr(&mut t, p, &[3], EPS).unwrap();
        close(t.value(l).item(), -(0.05f64.ln()) - 9.0 * 0.95f64.ln());

        let p = probs(&mut t, &[&[0.25, 0.25]]);
        assert!(loss_supplementary_ovr(&mut t, p, &[2], EPS).is_err());
    }

    #[test]
    fn domain_disc_values() {
        let mut t = Tape::new();
        let s = vector(&mut t, &[0.8]);
        let g = vector(&mut t, &[0.3]);
        let l = loss_domain_disc(&mut t, s, g, EPS).unwrap();
        close(t.value(l).item(), -(0.8f64.ln()) - 0.7f64.ln());

        let s = vector(&mut t, &[0.5]);
        let l = loss_domain_disc(&mut t, s, s, EPS).unwrap();
        close(t.value(l).item(), 2.0 * 2f64.ln());

        let s = vector(&mut t, &[1.0]);
        let g = vector(&mut t, &[0.0]);
        let l = loss_domain_disc(&mut t, s, g, EPS).unwrap();
        close(t.value(l).item(), -2.0 * (1.0 - EPS).ln());
        assert!(t.value(l).item() < 2.1e-7);
    }

    #[test]
    fn weighted_loss_is_stationary_at_its_weight() {
        for &w in &[0.05, 0.3, 0.5, 0.77, 0.95] {
            let mut t = Tape::new();
            let p = vector(&mut t, &[w]);
            let l = loss_adv_weighted(&mut t, p, &[w], EPS).unwrap();
            let g = t.backward(l).unwrap();
            assert!(g.get(p).unwrap().item().abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            ps in prop::collection::vec(0.0f64..=1.0, 1..8),
            ws in prop::collection::vec(0.0f64..=1.0, 8),
        ) {
            let mut t = Tape::new();
            let n = ps.len();
            let p = t.constant(TensorValue::vector(ps.clone())).unwrap();
            let l = loss_adv_weighted(&mut t, p, &ws[..n], EPS).unwrap();
            prop_assert!(t.value(l).item() >= 0.0);
            let l = loss_domain_disc(&mut t, p, p, EPS).unwrap();
            prop_assert!(t.value(l).item() >= 0.0);
        }

        #[test]
        fn constant_weight_matches_fixed_threshold_bitwise(
            ps in prop::collection::vec(0.0f64..=1.0, 1..16),
            thr in 0.0f64..=1.0,
        ) {
            let mut t = Tape::new();
            let p = t.leaf(TensorValue::vector(ps.clone())).unwrap();
            let a = loss_adv_weighted(&mut t, p, &vec![thr; ps.len()], EPS).unwrap();
            let b = loss_adv_fixed_t(&mut t, p, thr, EPS).unwrap();
            prop_assert_eq!(t.value(a).item().to_bits(), t.value(b).item().to_bits());
            let ga = t.backward(a).unwrap().get(p).unwrap().clone();
            let gb = t.backward(b).unwrap().get(p).unwrap().clone();
            prop_assert_eq!(ga, gb);
        }
    }
}
