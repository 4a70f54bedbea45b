//! Variance schedule for the forward (noising) and reverse (denoising) chains.
//!
//! A schedule is the table of per-step noise variances `beta_t` for
//! `t = 1..=t_max`, together with the quantities derived from it:
//!
//! * `alpha_t = 1 - beta_t`
//! * `alpha_bar_t = alpha_1 * alpha_2 * ... * alpha_t` (with `alpha_bar_0 = 1`)
//! * the reverse-chain posterior variance
//!   `beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`
//!
//! All tables are computed and stored in `f64`; the sampling loop downcasts
//! at the point of use. Steps are 1-indexed throughout, matching the usual
//! notation where `t = 0` is the clean image.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Serializable recipe for a [`NoiseSchedule`], kept small so checkpoints can
/// embed it and rebuild the exact tables on load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_max: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Precomputed linear variance schedule.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Reverse-chain posterior variance for one step. Exposed as a free function
/// so tests can compare the precomputed table against the formula directly.
pub fn posterior_variance_formula(alpha_bar_prev: f64, alpha_bar: f64, beta: f64) -> f64 {
    (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
}

impl NoiseSchedule {
    /// Build a linear schedule: `beta_t` interpolates from `beta_start` at
    /// `t = 1` to `beta_end` at `t = t_max`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidSchedule("t_max must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "betas must lie in (0, 1); got start {beta_start}, end {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidSchedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        if t_max > 1 && beta_start == beta_end {
            return Err(Error::InvalidSchedule(
                "betas must increase strictly; start and end coincide".into(),
            ));
        }

        let mut betas = Vec::with_capacity(t_max);
        if t_max == 1 {
            betas.push(beta_start);
        } else {
            let step = (beta_end - beta_start) / (t_max - 1) as f64;
            for i in 0..t_max {
                betas.push(beta_start + step * i as f64);
            }
            // Pin the endpoint exactly rather than trusting accumulated
            // interpolation arithmetic.
            betas[t_max - 1] = beta_end;
        }

        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut running = 1.0_f64;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        let mut posterior_vars = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
            posterior_vars.push(posterior_variance_formula(prev, alpha_bars[t - 1], betas[t - 1]));
        }

        Ok(NoiseSchedule {
            config: ScheduleConfig { t_max, beta_start, beta_end },
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    /// The conventional 1000-step schedule from `1e-4` to `0.02`.
    pub fn default_linear() -> Self {
        ScheduleConfig::default().build().expect("default schedule parameters are valid")
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    /// Validate a step index for Result-style callers (CLI input paths).
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.t_max() {
            Ok(())
        } else {
            Err(Error::StepOutOfRange { t, t_max: self.t_max() })
        }
    }

    #[inline]
    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.t_max(), "step {t} outside 1..={}", self.t_max());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    /// `alpha_bar_{t-1}`, defining `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        let i = self.idx(t);
        if i == 0 { 1.0 } else { self.alpha_bars[i - 1] }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Reverse-chain posterior variance `beta_tilde_t`; exactly 0 at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_vars[self.idx(t)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Frozen product of the default schedule's alphas, computed once with
    /// 50-digit decimal arithmetic and rounded to the nearest f64.
    const DEFAULT_ALPHA_BAR_FINAL: f64 = 4.0358297653756835e-5;

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.t_max(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
    }

    #[test]
    fn default_schedule_final_alpha_bar_matches_frozen_value() {
        let s = NoiseSchedule::default_linear();
        let got = s.alpha_bar(1000);
        let rel = ((got - DEFAULT_ALPHA_BAR_FINAL) / DEFAULT_ALPHA_BAR_FINAL).abs();
        assert!(rel < 1e-12, "alpha_bar(1000) = {got:e}, rel err {rel:e}");
    }

    #[test]
    fn alpha_bar_matches_log_domain_recomputation() {
        // Same quantity through an independent route: sum logs, then exp.
        let s = NoiseSchedule::default_linear();
        for &t in &[1usize, 2, 10, 500, 1000] {
            let log_sum: f64 = (1..=t).map(|k| s.alpha(k).ln()).sum();
            let expect = log_sum.exp();
            let got = s.alpha_bar(t);
            assert!(
                ((got - expect) / expect).abs() < 1e-10,
                "t={t}: product {got:e} vs log-domain {expect:e}"
            );
        }
    }

    #[test]
    fn two_step_posterior_variance_hand_value() {
        // linear(2, 0.1, 0.2): alpha_bar_1 = 0.9, alpha_bar_2 = 0.72, so
        // beta_tilde_2 = (1 - 0.9) / (1 - 0.72) * 0.2 = 1/14.
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.posterior_variance(2) - 1.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn first_step_posterior_variance_is_exactly_zero() {
        for &t_max in &[1usize, 2, 200, 1000] {
            let s = NoiseSchedule::linear(t_max, 1e-4, 0.02).unwrap();
            assert_eq!(s.posterior_variance(1), 0.0);
        }
    }

    #[test]
    fn posterior_table_equals_formula_exactly() {
        let s = NoiseSchedule::default_linear();
        for t in 1..=s.t_max() {
            let direct =
                posterior_variance_formula(s.alpha_bar_prev(t), s.alpha_bar(t), s.beta(t));
            assert_eq!(s.posterior_variance(t), direct, "t={t}");
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 0.01).is_err());
        // A single step with one beta has nothing to increase toward.
        assert!(NoiseSchedule::linear(1, 0.01, 0.01).is_ok());
    }

    #[test]
    fn check_step_bounds() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(1).is_ok());
        assert!(s.check_step(10).is_ok());
        assert!(s.check_step(11).is_err());
    }

    proptest! {
        #[test]
        fn invariants_hold_for_arbitrary_linear_schedules(
            t_max in 1usize..=256,
            beta_start in 1e-6f64..0.5,
            spread in 1e-6f64..0.4,
        ) {
            let beta_end = (beta_start + spread).min(0.999);
            let s = NoiseSchedule::linear(t_max, beta_start, beta_end).unwrap();
            let mut prev_beta = 0.0;
            let mut prev_bar = 1.0;
            for t in 1..=t_max {
                let beta = s.beta(t);
                prop_assert!(beta > 0.0 && beta < 1.0);
                prop_assert!(beta > prev_beta);
                prev_beta = beta;

                let bar = s.alpha_bar(t);
                prop_assert!(bar > 0.0 && bar < 1.0);
                prop_assert!(bar < prev_bar, "alpha_bar must decrease strictly");
                prop_assert!((s.alpha_bar_prev(t) - prev_bar).abs() == 0.0);
                prev_bar = bar;

                let var = s.posterior_variance(t);
                prop_assert!(var >= 0.0);
                // Equality is reachable: for aggressive schedules alpha_bar
                // saturates so close to zero that both numerator and
                // denominator of the variance ratio round to 1.0.
                prop_assert!(var <= beta, "posterior variance never exceeds beta_t");

                let sq = s.sqrt_alpha_bar(t);
                prop_assert!((sq * sq - bar).abs() <= 1e-15_f64.max(bar * 1e-14));
            }
        }
    }
}
