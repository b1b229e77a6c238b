//! Loss terms and explicit state integration: the squared-Frobenius
//! prediction loss on rates of change, the Kirchhoff-law residual that
//! penalizes physically infeasible predicted states, and the explicit Euler
//! step that turns predicted rates into predicted states.
//!
//! Each piece exists in two forms: plain `f64` functions (the reference
//! surface used by the simulator and the metrics) and tape-based builders
//! used inside the training loop. Tests pin the two forms to each other.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Indices of the measurable features within a 6-vector bus state.
pub const P: usize = 0;
pub const Q: usize = 1;
pub const RE_V: usize = 2;
pub const IM_V: usize = 3;
pub const RE_I: usize = 4;
pub const IM_I: usize = 5;

/// One evaluated loss: `total = l1 + nu·l2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub nu: f64,
    pub total: f64,
}

/// Combines the two loss terms with penalty weight ν (ν = 1 weights them
/// equally; ν = 0 disables the physics term).
pub fn total_loss(l1: f64, l2: f64, nu: f64) -> Result<LossBreakdown> {
    if !(l1 >= 0.0 && l2 >= 0.0 && nu >= 0.0) {
        return Err(Error::argument("loss terms and nu must be nonnegative"));
    }
    let total = l1 + nu * l2;
    if !total.is_finite() {
        return Err(Error::numerical("non-finite total loss"));
    }
    Ok(LossBreakdown { l1, l2, nu, total })
}

/// `Σ_k ‖pred^(k) − true^(k)‖_F²` over a sequence of rate matrices.
pub fn prediction_loss(pred_rates: &[Vec<f64>], true_rates: &[Vec<f64>]) -> Result<f64> {
    if pred_rates.len() != true_rates.len() {
        return Err(Error::argument("rate sequences differ in length"));
    }
    let mut total = 0.0;
    for (p, t) in pred_rates.iter().zip(true_rates) {
        if p.len() != t.len() {
            return Err(Error::argument("rate matrices differ in shape"));
        }
        for (a, b) in p.iter().zip(t) {
            let d = a - b;
            total += d * d;
        }
    }
    Ok(total)
}

/// Squared Kirchhoff residual of one bus state `[P,Q,ReV,ImV,ReI,ImI]`:
/// `|(P + iQ) − V·conj(I)|²`, expanded to real arithmetic as
/// `(P − (ReV·ReI + ImV·ImI))² + (Q − (ImV·ReI − ReV·ImI))²`.
pub fn kirchhoff_residual(state: &[f64]) -> f64 {
    debug_assert!(state.len() >= 6);
    let re_s = state[RE_V] * state[RE_I] + state[IM_V] * state[IM_I];
    let im_s = state[IM_V] * state[RE_I] - state[RE_V] * state[IM_I];
    let dp = state[P] - re_s;
    let dq = state[Q] - im_s;
    dp * dp + dq * dq
}

/// Sum of per-bus residuals over a sequence of predicted `[N×6]` states.
pub fn kirchhoff_loss(pred_states: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for step in pred_states {
        for bus in step.chunks_exact(6) {
            total += kirchhoff_residual(bus);
        }
    }
    total
}

/// Explicit Euler step: `X + dt·Ẋ` elementwise.
pub fn integrate_state(state: &[f64], rates: &[f64], dt: f64) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(Error::argument("dt must be positive"));
    }
    if state.len() != rates.len() {
        return Err(Error::argument("state/rate shape mismatch"));
    }
    Ok(state.iter().zip(rates).map(|(x, r)| x + dt * r).collect())
}

/// Tape form of the prediction loss for one step: `‖pred − target‖_F²` with
/// `target` a constant.
pub fn prediction_loss_on_tape(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(&diff)?;
    tape.sum(&sq)
}

/// Tape form of the summed Kirchhoff residual of an `[N×6]` state tensor.
pub fn kirchhoff_loss_on_tape(tape: &mut Tape, states: &Tensor) -> Result<Tensor> {
    if states.shape().len() != 2 || states.shape()[1] != 6 {
        return Err(Error::argument("kirchhoff loss expects an [N×6] tensor"));
    }
    let p = tape.col_slice(states, P)?;
    let q = tape.col_slice(states, Q)?;
    let re_v = tape.col_slice(states, RE_V)?;
    let im_v = tape.col_slice(states, IM_V)?;
    let re_i = tape.col_slice(states, RE_I)?;
    let im_i = tape.col_slice(states, IM_I)?;

    let t1 = tape.hadamard(&re_v, &re_i)?;
    let t2 = tape.hadamard(&im_v, &im_i)?;
    let re_s = tape.add(&t1, &t2)?;
    let t3 = tape.hadamard(&im_v, &re_i)?;
    let t4 = tape.hadamard(&re_v, &im_i)?;
    let im_s = tape.sub(&t3, &t4)?;

    let dp = tape.sub(&p, &re_s)?;
    let dq = tape.sub(&q, &im_s)?;
    let dp2 = tape.square(&dp)?;
    let dq2 = tape.square(&dq)?;
    let sum_p = tape.sum(&dp2)?;
    let sum_q = tape.sum(&dq2)?;
    tape.add(&sum_p, &sum_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn total_loss_weighting() {
        // ν = 1 weights both terms equally.
        let b = total_loss(1.0, 2.0, 1.0).unwrap();
        assert_eq!(b.total, 3.0);
        // ν = 0 disables the physics term (the PI-loss ablation).
        let b = total_loss(0.7, 123.0, 0.0).unwrap();
        assert_eq!(b.total, 0.7);
        let b = total_loss(0.0, 0.0, 1.0).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(total_loss(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn prediction_loss_values() {
        let a = vec![vec![1.0; 6]];
        assert_eq!(prediction_loss(&a, &a).unwrap(), 0.0);

        // Single step, single bus, all six entries differ by 1 → 6.
        let zero = vec![vec![0.0; 6]];
        assert_eq!(prediction_loss(&a, &zero).unwrap(), 6.0);

        // Doubling every error entry quadruples the loss.
        let two = vec![vec![2.0; 6]];
        assert_eq!(prediction_loss(&two, &zero).unwrap(), 24.0);

        let short = vec![vec![0.0; 5]];
        assert!(prediction_loss(&a, &short).is_err());
        assert!(prediction_loss(&a, &[]).is_err());
    }

    #[test]
    fn kirchhoff_residual_consistent_flows() {
        // V = 1+0i, I = 1+0i, S = 1 + 0i.
        assert_eq!(kirchhoff_residual(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), 0.0);
        // V = 1+0i, I = −i: S = V·conj(I) = i, so P = 0, Q = 1 is exact.
        let r = kirchhoff_residual(&[0.0, 1.0, 1.0, 0.0, 0.0, -1.0]);
        assert!(r.abs() < 1e-30);
        // P off by 0.1: residual 0.01.
        let r = kirchhoff_residual(&[0.9, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((r - 0.01).abs() < 1e-15);
    }

    #[test]
    fn kirchhoff_residual_matches_complex_oracle() {
        // Random states checked against num-complex arithmetic.
        let cases = [
            [0.4, -0.2, 1.01, 0.05, 0.38, -0.21],
            [-0.7, 0.3, 0.97, -0.12, -0.72, 0.35],
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        ];
        for s in &cases {
            let v = Complex64::new(s[RE_V], s[IM_V]);
            let i = Complex64::new(s[RE_I], s[IM_I]);
            let sp = Complex64::new(s[P], s[Q]);
            let expect = (sp - v * i.conj()).norm_sqr();
            let got = kirchhoff_residual(s);
            assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
        }
    }

    #[test]
    fn kirchhoff_residual_phase_rotation_invariant() {
        // Rotating V and I by the same angle leaves S = V·conj(I) unchanged.
        let base = [0.4, -0.2, 1.01, 0.05, 0.38, -0.21];
        let r0 = kirchhoff_residual(&base);
        for k in 1..8 {
            let ang = k as f64 * 0.77;
            let rot = Complex64::new(ang.cos(), ang.sin());
            let v = Complex64::new(base[RE_V], base[IM_V]) * rot;
            let i = Complex64::new(base[RE_I], base[IM_I]) * rot;
            let s = [base[P], base[Q], v.re, v.im, i.re, i.im];
            assert!((kirchhoff_residual(&s) - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn kirchhoff_loss_sums_bus_steps() {
        let consistent = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let off = [0.9, 0.0, 1.0, 0.0, 1.0, 0.0]; // residual 0.01
        // All consistent → 0.
        let steps = vec![[consistent, consistent].concat(); 3];
        assert_eq!(kirchhoff_loss(&steps), 0.0);
        // One inconsistent bus-step with residual r → r.
        let one = vec![[consistent, off].concat()];
        assert!((kirchhoff_loss(&one) - 0.01).abs() < 1e-15);
        // 2 steps × 2 buses each residual 0.01 → 0.04.
        let four = vec![[off, off].concat(), [off, off].concat()];
        assert!((kirchhoff_loss(&four) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn integrate_state_euler() {
        let x = vec![1.0, 2.0];
        let same = integrate_state(&x, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(same, x);
        let moved = integrate_state(&[1.0], &[2.0], 0.001).unwrap();
        assert!((moved[0] - 1.002).abs() < 1e-15);
        assert!(integrate_state(&x, &[0.0, 0.0], 0.0).is_err());
        assert!(integrate_state(&x, &[0.0, 0.0], -1.0).is_err());
        assert!(integrate_state(&x, &[0.0], 0.1).is_err());
    }

    #[test]
    fn taped_losses_match_plain_forms() {
        let pred = vec![
            0.3, -0.2, 0.9, 0.1, 0.25, -0.4, 0.0, 0.5, 1.1, -0.1, 0.3, 0.2,
        ];
        let target = vec![
            0.1, 0.0, 1.0, 0.0, 0.3, -0.3, 0.1, 0.4, 1.0, 0.0, 0.35, 0.1,
        ];
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone(), vec![2, 6]).unwrap();
        let t = tape.leaf(target.clone(), vec![2, 6]).unwrap();
        let l1 = prediction_loss_on_tape(&mut tape, &p, &t).unwrap();
        let plain = prediction_loss(&[pred.clone()], &[target.clone()]).unwrap();
        assert!((l1.item() - plain).abs() < 1e-14);

        let l2 = kirchhoff_loss_on_tape(&mut tape, &p).unwrap();
        let plain2 = kirchhoff_loss(&[pred.clone()]);
        assert!((l2.item() - plain2).abs() < 1e-14);
    }

    #[test]
    fn taped_kirchhoff_gradcheck() {
        use crate::oracles::finite_difference_gradient;
        use crate::tensor::Parameter;
        let s0 = vec![
            0.4, -0.2, 1.01, 0.05, 0.38, -0.21, -0.7, 0.3, 0.97, -0.12, -0.72, 0.35,
        ];
        let p = Parameter::new("s", vec![2, 6], s0.clone());
        let mut tape = Tape::new();
        let s = tape.param(&p).unwrap();
        let l = kirchhoff_loss_on_tape(&mut tape, &s).unwrap();
        let grads = tape.backward(&l).unwrap();
        let fd = finite_difference_gradient(
            |x| x.chunks_exact(6).map(kirchhoff_residual).sum(),
            &s0,
            1e-6,
        );
        for (a, b) in grads.get("s").unwrap().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-8);
        }
    }
}
