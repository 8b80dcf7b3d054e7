//! Adam with decaying step sizes and optional product-form bias correction.
//!
//! One step with gradient `g` and step size `η_t`:
//!
//! ```text
//! m ← (1 − τ1 η_t) m + τ1 η_t g
//! v ← (1 − τ2 η_t) v + τ2 η_t g ⊙ g
//! θ ← θ − η_t (ρ_v |v| + ε)^(−1/2) ⊙ ρ_m m
//! ```
//!
//! with `η_t = η0 (1 + t)^(−κ)`, `κ ∈ (0, 1]`, capped at `0.5 / max(τ1, τ2)`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Tape};
use crate::error::{check_len, Error, Result};
use crate::linalg::{norm2, norm_inf};
use crate::scalar::Scalar;

/// Hyperparameters. Construct through [`AdamConfig::new`] so that
/// `τ2 ≤ 4 τ1` and the schedule contract are checked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig<T> {
    tau1: T,
    tau2: T,
    eps: T,
    eta0: T,
    step_exponent: T,
    bias_correction: bool,
    norm_cap: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn new(
        tau1: T,
        tau2: T,
        eps: T,
        eta0: T,
        step_exponent: T,
        bias_correction: bool,
    ) -> Result<Self> {
        let positive = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Input(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("tau1", tau1)?;
        positive("tau2", tau2)?;
        positive("eps", eps)?;
        positive("eta0", eta0)?;
        if tau2 > T::lit(4.0) * tau1 {
            return Err(Error::Input(format!(
                "tau2 = {tau2} exceeds 4 * tau1 = {}",
                T::lit(4.0) * tau1
            )));
        }
        // Σ η_t diverges and η_t log t → 0 exactly when κ ∈ (0, 1]
        if !(step_exponent > T::zero() && step_exponent <= T::one()) {
            return Err(Error::Input(format!(
                "step_exponent must lie in (0, 1], got {step_exponent}"
            )));
        }
        Ok(Self {
            tau1,
            tau2,
            eps,
            eta0,
            step_exponent,
            bias_correction,
            norm_cap: T::lit(1e6),
        })
    }

    pub fn with_norm_cap(mut self, cap: T) -> Result<Self> {
        if !(cap > T::zero()) {
            return Err(Error::Input("norm cap must be positive".into()));
        }
        self.norm_cap = cap;
        Ok(self)
    }

    pub fn tau1(&self) -> T {
        self.tau1
    }

    pub fn tau2(&self) -> T {
        self.tau2
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn eta0(&self) -> T {
        self.eta0
    }

    pub fn step_exponent(&self) -> T {
        self.step_exponent
    }

    pub fn bias_correction(&self) -> bool {
        self.bias_correction
    }

    pub fn norm_cap(&self) -> T {
        self.norm_cap
    }

    /// `η_t`, capped so that `τ η_t < 1`.
    pub fn eta(&self, t: u64) -> T {
        let raw = self.eta0 * (T::one() + T::from_u64(t).unwrap()).powf(-self.step_exponent);
        raw.min(T::lit(0.5) / self.tau1.max(self.tau2))
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    /// `τ1 = 10, τ2 = 1, ε = 1e-8, η0 = 3e-2, κ = 0.6`, bias correction on.
    fn default() -> Self {
        Self::new(
            T::lit(10.0),
            T::lit(1.0),
            T::lit(1e-8),
            T::lit(3e-2),
            T::lit(0.6),
            true,
        )
        .expect("default config is valid")
    }
}

/// `(ρ_m, ρ_v)` for the update producing step `t + 1`.
///
/// Recomputes the products `Π_{s≤t}(1 − τ η_s)` from scratch; the training
/// loop keeps them incrementally in [`AdamState`].
pub fn scaling_params<T: Scalar>(t: u64, cfg: &AdamConfig<T>) -> (T, T) {
    if !cfg.bias_correction {
        return (T::one(), T::one());
    }
    let (mut pm, mut pv) = (T::one(), T::one());
    for s in 0..=t {
        let eta = cfg.eta(s);
        pm *= T::one() - cfg.tau1 * eta;
        pv *= T::one() - cfg.tau2 * eta;
    }
    (T::one() / (T::one() - pm), T::one() / (T::one() - pv))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub theta: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    prod_m: T,
    prod_v: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(theta: Vec<T>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("initial parameters must be finite".into()));
        }
        let p = theta.len();
        Ok(Self {
            theta,
            m: vec![T::zero(); p],
            v: vec![T::zero(); p],
            t: 0,
            prod_m: T::one(),
            prod_v: T::one(),
        })
    }
}

/// Advances `state` by one step and returns the step size that was used.
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, g: &[T], cfg: &AdamConfig<T>) -> Result<T> {
    check_len("gradient", state.theta.len(), g.len())?;
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::Input(format!("non-finite gradient entry {i}")));
    }
    let eta = cfg.eta(state.t);
    let (a1, a2) = (cfg.tau1 * eta, cfg.tau2 * eta);
    let (rho_m, rho_v) = if cfg.bias_correction {
        state.prod_m *= T::one() - a1;
        state.prod_v *= T::one() - a2;
        (
            T::one() / (T::one() - state.prod_m),
            T::one() / (T::one() - state.prod_v),
        )
    } else {
        (T::one(), T::one())
    };
    for i in 0..g.len() {
        state.m[i] = (T::one() - a1) * state.m[i] + a1 * g[i];
        state.v[i] = (T::one() - a2) * state.v[i] + a2 * g[i] * g[i];
        let denom = (rho_v * state.v[i].abs() + cfg.eps).sqrt();
        state.theta[i] -= eta * rho_m * state.m[i] / denom;
    }
    state.t += 1;
    Ok(eta)
}

/// Settings of a training run.
#[derive(Clone, Debug)]
pub struct TrainConfig<T> {
    pub adam: AdamConfig<T>,
    pub steps: usize,
    /// Samples per step; `0` means the whole dataset (deterministic order).
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Largest `v_all` over every projection output evaluated in the step.
    pub feas_violation_max: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn max_feasibility_violation(&self) -> f64 {
        self.rows
            .iter()
            .fold(0.0, |m, r| m.max(r.feas_violation_max))
    }

    /// Trailing mean of the loss over `window` steps (shorter at the start).
    pub fn running_mean(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.rows.len());
        let mut acc = 0.0;
        for (i, r) in self.rows.iter().enumerate() {
            acc += r.loss;
            if i >= window {
                acc -= self.rows[i - window].loss;
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }

    /// `max − min` of the running mean over the last `fraction` of steps.
    pub fn final_oscillation(&self, fraction: f64, window: usize) -> f64 {
        let rm = self.running_mean(window);
        let start = ((1.0 - fraction) * rm.len() as f64).floor() as usize;
        let tail = &rm[start.min(rm.len())..];
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if tail.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    /// CSV with header `step,loss,grad_norm,feas_violation_max,eta`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "loss", "grad_norm", "feas_violation_max", "eta"])?;
        for r in &self.rows {
            wr.write_record(&[
                r.step.to_string(),
                format!("{:e}", r.loss),
                format!("{:e}", r.grad_norm),
                format!("{:e}", r.feas_violation_max),
                format!("{:e}", r.eta),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    pub trace: Trace,
    pub state: AdamState<T>,
}

/// Largest `v_all` among the projection nodes of a forwarded tape.
pub fn projection_violation<T: Scalar>(tape: &Tape<T>) -> f64 {
    tape.nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Projection(p) => p
                .feasibility_violation(&n.value)
                .ok()
                .map(|r| r.v_all.as_f64()),
            _ => None,
        })
        .fold(0.0, f64::max)
}

/// Loss and gradient averaged over `indices`, plus the feasibility maximum.
pub fn batch_gradient<T: Scalar>(
    tapes: &mut [Tape<T>],
    indices: &[usize],
    theta: &[T],
) -> Result<(T, Vec<T>, f64)> {
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); theta.len()];
    let mut feas = 0.0f64;
    for &i in indices {
        let tape = &mut tapes[i];
        loss += tape.forward(theta)?;
        for (g, d) in grad.iter_mut().zip(tape.reverse()?) {
            *g += d;
        }
        feas = feas.max(projection_violation(tape));
    }
    let k = T::from_usize(indices.len()).unwrap();
    grad.iter_mut().for_each(|g| *g /= k);
    Ok((loss / k, grad, feas))
}

/// Minimizes the mean loss of `tapes` (one tape per sample, sharing the
/// parameter vector) starting from `theta0`.
///
/// Each step draws `batch_size` indices uniformly with replacement from a
/// generator seeded by `seed`, averages the per-sample gradients and takes
/// one [`adam_step`]. Errors carry the step index.
pub fn train<T: Scalar>(
    tapes: &mut [Tape<T>],
    theta0: Vec<T>,
    cfg: &TrainConfig<T>,
) -> Result<TrainResult<T>> {
    if tapes.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    for t in tapes.iter() {
        check_len("parameter vector", t.param_count(), theta0.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(theta0)?;
    let mut trace = Trace::default();
    let all: Vec<usize> = (0..tapes.len()).collect();
    let mut batch = Vec::new();
    for step in 0..cfg.steps {
        let indices = if cfg.batch_size == 0 {
            &all
        } else {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| rng.random_range(0..tapes.len())));
            &batch
        };
        let (loss, grad, feas) =
            batch_gradient(tapes, indices, &state.theta).map_err(|e| Error::Step {
                step,
                source: Box::new(e),
            })?;
        let eta = adam_step(&mut state, &grad, &cfg.adam).map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        trace.rows.push(TraceRow {
            step,
            loss: loss.as_f64(),
            grad_norm: norm2(&grad).as_f64(),
            feas_violation_max: feas,
            eta: eta.as_f64(),
        });
        let size = norm_inf(&state.theta);
        if !(size <= cfg.adam.norm_cap) {
            return Err(Error::Divergence {
                step,
                norm: size.as_f64(),
                cap: cfg.adam.norm_cap.as_f64(),
            });
        }
    }
    Ok(TrainResult { trace, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(tau1: f64, tau2: f64, eta0: f64) -> AdamConfig<f64> {
        AdamConfig::new(tau1, tau2, 1e-8, eta0, 0.6, false).unwrap()
    }

    #[test]
    fn hand_derived_step() {
        let cfg = plain(1.0, 1.0, 0.1);
        let mut s = AdamState::new(vec![1.0]).unwrap();
        let eta = adam_step(&mut s, &[2.0], &cfg).unwrap();
        assert_eq!(eta, 0.1);
        let expected = 1.0 - 0.1 * 0.2 / (0.4f64 + 1e-8).sqrt();
        assert!((s.m[0] - 0.2).abs() <= 1e-15 * 0.2);
        assert!((s.v[0] - 0.4).abs() <= 1e-15 * 0.4);
        assert!((s.theta[0] - expected).abs() <= 1e-15 * expected);
        assert!((s.theta[0] - 0.9683772).abs() < 1e-7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_state() {
        let cfg = AdamConfig::<f64>::default();
        let mut s = AdamState::new(vec![0.5, -2.0]).unwrap();
        adam_step(&mut s, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(s.theta, vec![0.5, -2.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
        assert_eq!(s.v, vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::new(1.0, 5.0, 1e-8, 0.1, 0.6, true).is_err());
        assert!(AdamConfig::new(1.0, 4.0, 1e-8, 0.1, 0.6, true).is_ok());
        assert!(AdamConfig::new(1.0, 1.0, 1e-8, 0.1, 0.0, true).is_err());
        assert!(AdamConfig::new(1.0, 1.0, 1e-8, 0.1, 1.5, true).is_err());
        assert!(AdamConfig::new(1.0, 1.0, 0.0, 0.1, 0.6, true).is_err());
        assert!(AdamConfig::new(-1.0, 1.0, 1e-8, 0.1, 0.6, true).is_err());
        let mut s = AdamState::new(vec![0.0]).unwrap();
        let cfg = AdamConfig::<f64>::default();
        assert!(adam_step(&mut s, &[f64::NAN], &cfg).is_err());
        assert!(adam_step(&mut s, &[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn eta_is_capped() {
        let cfg = AdamConfig::new(4.0, 1.0, 1e-8, 1.0, 0.6, true).unwrap();
        assert_eq!(cfg.eta(0), 0.125);
        assert!(cfg.eta(1_000_000) < 0.125);
    }

    #[test]
    fn scaling_params_examples() {
        let off = plain(1.0, 1.0, 0.1);
        for t in [0, 5, 1000] {
            assert_eq!(scaling_params(t, &off), (1.0, 1.0));
        }
        let on = AdamConfig::<f64>::new(1.0, 1.0, 1e-8, 0.1, 0.6, true).unwrap();
        let (rm, rv) = scaling_params(0, &on);
        assert!((rm - 10.0).abs() < 1e-12 && (rv - 10.0).abs() < 1e-12);
        // Σ η_s ≈ 14 by t = 5e4, so Π(1 − η_s) < 1e-6
        let (rm, rv) = scaling_params(50_000, &on);
        assert!((rm - 1.0).abs() < 1e-6 && (rv - 1.0).abs() < 1e-6);
    }

    #[test]
    fn incremental_products_match_scaling_params() {
        let cfg = AdamConfig::new(2.0, 3.0, 1e-8, 0.05, 0.6, true).unwrap();
        let mut s = AdamState::new(vec![0.0]).unwrap();
        for t in 0..50u64 {
            adam_step(&mut s, &[1.0], &cfg).unwrap();
            let (rm, rv) = scaling_params(t, &cfg);
            assert_eq!(1.0 / (1.0 - s.prod_m), rm);
            assert_eq!(1.0 / (1.0 - s.prod_v), rv);
        }
    }

    #[test]
    fn schedule_contract() {
        let cfg = AdamConfig::<f64>::default();
        let f = |t: u64| cfg.eta(t) * ((t + 2) as f64).ln();
        for t in 10..5000 {
            assert!(f(t + 1) < f(t));
        }
        assert!(f(1_000_000) < 1e-3);
        assert!(f(10u64.pow(12)) < f(1_000_000) * 1e-3);
    }

    #[test]
    fn v_stays_nonnegative() {
        let cfg = AdamConfig::<f64>::default();
        let mut s = AdamState::new(vec![0.0; 3]).unwrap();
        for k in 0..100 {
            let g = [(k as f64).sin(), -(k as f64), 1e-3];
            adam_step(&mut s, &g, &cfg).unwrap();
            assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }

    fn quadratic_tape() -> Tape<f64> {
        let mut t = Tape::new(1);
        let a = t.parameter(0, 1).unwrap();
        let one = t.constant(vec![1.0]);
        let mse = t.mse_loss(a, one).unwrap();
        t.set_output(mse).unwrap();
        t
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut tapes = vec![quadratic_tape(), quadratic_tape()];
        let cfg = TrainConfig {
            adam: AdamConfig::new(10.0, 1.0, 1e-8, 0.05, 0.6, true).unwrap(),
            steps: 2000,
            batch_size: 1,
            seed: 3,
        };
        let res = train(&mut tapes, vec![0.0], &cfg).unwrap();
        assert!(
            (res.state.theta[0] - 1.0).abs() <= 1e-2,
            "{}",
            res.state.theta[0]
        );
        assert_eq!(res.trace.rows.len(), 2000);
        assert_eq!(res.trace.max_feasibility_violation(), 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            adam: AdamConfig::default(),
            steps: 50,
            batch_size: 2,
            seed: 11,
        };
        let run = || {
            let mut tapes = vec![quadratic_tape(), quadratic_tape(), quadratic_tape()];
            let r = train(&mut tapes, vec![0.3], &cfg).unwrap();
            let mut buf = Vec::new();
            r.trace.write_csv(&mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("step,loss,grad_norm,feas_violation_max,eta\n"));
        assert_eq!(text.lines().count(), 51);
    }

    #[test]
    fn divergence_is_reported() {
        let mut tapes = vec![quadratic_tape()];
        let cfg = TrainConfig {
            adam: AdamConfig::new(1.0, 1.0, 1e-8, 0.4, 0.6, false)
                .unwrap()
                .with_norm_cap(0.5)
                .unwrap(),
            steps: 50,
            batch_size: 0,
            seed: 0,
        };
        match train(&mut tapes, vec![0.0], &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(train(&mut [], vec![0.0], &cfg).is_err());
    }

    #[test]
    fn running_mean_and_oscillation() {
        let trace = Trace {
            rows: (0..10)
                .map(|i| TraceRow {
                    step: i,
                    loss: i as f64,
                    grad_norm: 0.0,
                    feas_violation_max: 0.0,
                    eta: 0.0,
                })
                .collect(),
        };
        let rm = trace.running_mean(2);
        assert_eq!(rm[0], 0.0);
        assert_eq!(rm[1], 0.5);
        assert_eq!(rm[9], 8.5);
        assert_eq!(trace.final_oscillation(0.2, 2), 1.0);
    }
}
