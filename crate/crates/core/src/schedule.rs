//! Discrete variance-preserving noise schedules.
//!
//! Step `n ∈ 1..=N` sits at time `t_n = n / N`, so `t_min = 1/N` and `T = 1`.
//! Between grid points `log ᾱ` is interpolated linearly in `t`, which keeps
//! `α(t)` and `σ(t)` continuous and exact on the grid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance when checking that a time lies inside `[t_min, T]`.
const TIME_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `β` linear in the step index.
    Linear,
    /// `√β` linear in the step index.
    ScaledLinear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled_linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "scaled_linear" => Ok(ScheduleKind::ScaledLinear),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_lo: f64,
    beta_hi: f64,
    betas: Vec<f64>,
    /// `ᾱ_n` for `n = 1..=N`, stored at index `n - 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_lo: f64, beta_hi: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs N >= 2, got {steps}"
            )));
        }
        if !(0.0 < beta_lo && beta_lo < beta_hi && beta_hi < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_lo < beta_hi < 1, got {beta_lo} and {beta_hi}"
            )));
        }
        let denom = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = i as f64 / denom;
                match kind {
                    ScheduleKind::Linear => beta_lo + f * (beta_hi - beta_lo),
                    ScheduleKind::ScaledLinear => {
                        let s = beta_lo.sqrt() + f * (beta_hi.sqrt() - beta_lo.sqrt());
                        s * s
                    }
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            kind,
            beta_lo,
            beta_hi,
            betas,
            alpha_bar,
        })
    }

    /// Schedule from explicit cumulative products `ᾱ_1 > ᾱ_2 > ... > 0`.
    /// `ᾱ_1 = 1` is allowed, which gives `σ(t_min) = 0`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("need at least two grid points"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alpha_bar entries must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        let mut prev = 1.0;
        let betas = alpha_bar
            .iter()
            .map(|&a| {
                let b = 1.0 - a / prev;
                prev = a;
                b
            })
            .collect();
        Ok(NoiseSchedule {
            kind: ScheduleKind::Linear,
            beta_lo: f64::NAN,
            beta_hi: f64::NAN,
            betas,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_lo, self.beta_hi)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `ᾱ_n` for `n = 1..=N`.
    pub fn alpha_bar_grid(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn t_min(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    pub fn t_max(&self) -> f64 {
        1.0
    }

    /// Grid time of step `n ∈ 1..=N`.
    pub fn time_of(&self, n: usize) -> f64 {
        n as f64 / self.steps() as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (1..=self.steps()).map(|n| self.time_of(n)).collect()
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.t_min() - TIME_EPS && t <= self.t_max() + TIME_EPS) {
            return Err(Error::invalid(format!(
                "time {t} outside [{}, {}]",
                self.t_min(),
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Nearest grid step index `n ∈ 1..=N`.
    pub fn nearest_step(&self, t: f64) -> usize {
        let n = (t * self.steps() as f64).round() as i64;
        n.clamp(1, self.steps() as i64) as usize
    }

    pub fn snap(&self, t: f64) -> f64 {
        self.time_of(self.nearest_step(t))
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        let n = self.steps() as f64;
        let pos = (t * n).clamp(1.0, n);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 || lo == self.steps() {
            return self.alpha_bar[lo - 1];
        }
        let a = self.alpha_bar[lo - 1].ln();
        let b = self.alpha_bar[lo].ln();
        (a + frac * (b - a)).exp()
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (1.0 - self.alpha_bar(t)).max(0.0).sqrt()
    }

    /// `α(t)·x0 + σ(t)·noise`
    pub fn forward_marginal(&self, x0: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
        self.check_time(t)?;
        if x0.shape() != noise.shape() {
            return Err(Error::shape(format!(
                "forward marginal: data {:?} with noise {:?}",
                x0.shape(),
                noise.shape()
            )));
        }
        let (a, s) = (self.alpha(t), self.sigma(t));
        x0.zip_with(noise, "forward marginal", |x, e| a * x + s * e)
    }

    /// Per-row version of [`forward_marginal`](Self::forward_marginal).
    pub fn forward_marginal_rows(
        &self,
        x0: &Tensor,
        times: &[f64],
        noise: &Tensor,
    ) -> Result<Tensor> {
        if x0.shape() != noise.shape() || times.len() != x0.rows() {
            return Err(Error::shape("forward marginal: batch mismatch"));
        }
        let w = x0.cols();
        let mut out = x0.clone();
        for (r, &t) in times.iter().enumerate() {
            self.check_time(t)?;
            let (a, s) = (self.alpha(t), self.sigma(t));
            let e = noise.row(r);
            for (o, &ei) in out.row_mut(r).iter_mut().zip(e) {
                *o = a * *o + s * ei;
            }
            debug_assert_eq!(e.len(), w);
        }
        Ok(out)
    }

    pub fn boundary_coeffs(&self, t: f64, sigma_data: f64) -> (f64, f64) {
        boundary_coeffs(t, self.t_min(), sigma_data)
    }
}

/// Consistency-model skip/output weights. Exactly `(1, 0)` at `t = t_min`.
pub fn boundary_coeffs(t: f64, t_min: f64, sigma_data: f64) -> (f64, f64) {
    let d = t - t_min;
    let sd2 = sigma_data * sigma_data;
    let denom = d * d + sd2;
    (sd2 / denom, d / denom.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn matches_hand_rolled_product() {
        let s = default_schedule();
        let mut acc = 1.0;
        for n in 1..=1000 {
            let beta = 1e-4 + (n - 1) as f64 / 999.0 * (2e-2 - 1e-4);
            acc *= 1.0 - beta;
            let t = s.time_of(n);
            assert!((s.alpha(t) - acc.sqrt()).abs() < 1e-13);
            assert!((s.sigma(t) - (1.0 - acc).sqrt()).abs() < 1e-13);
        }
        assert!((s.alpha(s.t_min()) - 0.99995).abs() < 1e-6);
    }

    #[test]
    fn invariants_hold() {
        for s in [
            default_schedule(),
            NoiseSchedule::new(ScheduleKind::ScaledLinear, 1000, 8.5e-4, 1.2e-2).unwrap(),
            NoiseSchedule::new(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap(),
        ] {
            let grid = s.grid();
            for w in grid.windows(2) {
                assert!(s.alpha(w[1]) < s.alpha(w[0]));
                assert!(s.sigma(w[1]) > s.sigma(w[0]));
                let snr = |t: f64| s.alpha(t).powi(2) / s.sigma(t).powi(2);
                assert!(snr(w[1]) < snr(w[0]));
            }
            for &t in &grid {
                assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
            }
        }
        let s = default_schedule();
        assert!(s.alpha(s.t_min()) >= 1.0 - 1e-4);
        assert!(s.sigma(s.t_min()) <= 1e-2);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 2e-2, 1e-4).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_marginal_substitution() {
        // α = 0.8 ⇒ σ = 0.6
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.64, 0.1]).unwrap();
        let t = s.time_of(2);
        assert!((s.alpha(t) - 0.8).abs() < 1e-15);
        let out = s
            .forward_marginal(&Tensor::scalar(1.0), t, &Tensor::scalar(0.5))
            .unwrap();
        assert!((out.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn forward_marginal_near_identity_at_t_min() {
        let s = default_schedule();
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.0]);
        let noise = Tensor::vector(vec![1.0, -1.0, 0.5]);
        let out = s.forward_marginal(&x0, s.t_min(), &noise).unwrap();
        let bound = s.sigma(s.t_min()) * noise.sq_norm().sqrt() + (1.0 - s.alpha(s.t_min()));
        assert!(out.sub(&x0).unwrap().sq_norm().sqrt() <= bound);
    }

    #[test]
    fn forward_marginal_rejects_out_of_range() {
        let s = default_schedule();
        let x = Tensor::scalar(0.0);
        assert!(s.forward_marginal(&x, 0.0, &x).is_err());
        assert!(s.forward_marginal(&x, 1.5, &x).is_err());
    }

    #[test]
    fn boundary_coefficients() {
        assert_eq!(boundary_coeffs(0.002, 0.002, 0.5), (1.0, 0.0));
        let (skip, _) = boundary_coeffs(0.5, 0.002, 0.5);
        assert!((skip - 0.25 / 0.498004).abs() < 1e-12);
        assert!((skip - 0.50200).abs() < 1e-5);
        let (skip, out) = boundary_coeffs(1e6, 0.002, 0.5);
        assert!(skip < 1e-12 && (out - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_coefficients_differentiable_on_grid() {
        let s = default_schedule();
        let h = 1e-6;
        for &t in s.grid().iter().step_by(97) {
            let fd =
                (s.boundary_coeffs(t + h, 0.5).0 - s.boundary_coeffs(t - h, 0.5).0) / (2.0 * h);
            let d = t - s.t_min();
            let analytic = -2.0 * 0.25 * d / (d * d + 0.25).powi(2);
            assert!((fd - analytic).abs() < 1e-6, "t={t}: {fd} vs {analytic}");
        }
    }
}
