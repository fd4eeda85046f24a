//! Closed-form DDPM mathematics: the forward corruption chain, its
//! marginal, the true posterior, and the ancestral reverse step.
//!
//! Timesteps are 0-based: `t` in `[0, T)`. After `t + 1` forward steps the
//! signal coefficient is `sqrt(alpha_bar[t])`. The state "before" step 0 is
//! the clean sample, so the posterior tables use `alpha_bar_prev(0) = 1`.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Linear-beta schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Desk-scale default: 200 steps, beta from 1e-4 to 0.02.
    pub fn desk() -> Self {
        ScheduleConfig {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// The conventional 1000-step DDPM schedule.
    pub fn ddpm_1000() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            ..ScheduleConfig::desk()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::desk()
    }
}

/// Mean coefficients and variance of `q(x_{t-1} | x_t, x_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_x0: Vec<f64>,
    pub coef_xt: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sqrt_alpha_bar: Vec<f64>,
    pub sqrt_one_minus_alpha_bar: Vec<f64>,
    pub posterior: PosteriorCoeffs,
}

impl NoiseSchedule {
    /// Betas linearly spaced over `[beta_start, beta_end]`, both inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::param(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let last = (timesteps - 1) as f64;
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
            .collect();
        Ok(NoiseSchedule::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let n = beta.len();
        let mut posterior = PosteriorCoeffs {
            coef_x0: Vec::with_capacity(n),
            coef_xt: Vec::with_capacity(n),
            variance: Vec::with_capacity(n),
        };
        for t in 0..n {
            let ab = alpha_bar[t];
            let ab_prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
            posterior.coef_x0.push(ab_prev.sqrt() * beta[t] / (1.0 - ab));
            posterior.coef_xt.push(alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
            posterior.variance.push(beta[t] * (1.0 - ab_prev) / (1.0 - ab));
        }
        NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            posterior,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::param(format!(
                "timestep {t} out of range [0, {})",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// Closed-form marginal: `sqrt(ab_t)·x0 + sqrt(1-ab_t)·eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, b) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus_alpha_bar[t]);
        x0.zip_with(eps, |x, e| a * x + b * e)
    }

    /// Noiseless part of [`q_sample`](Self::q_sample): `sqrt(ab_t)·x0`.
    pub fn q_mean(&self, x0: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        Ok(x0.scale(self.sqrt_alpha_bar[t]))
    }

    /// Runs the single-step transition `t + 1` times with fresh noise.
    /// Only useful as an oracle for the closed form.
    pub fn q_sample_iterative(&self, x0: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_t(t)?;
        let mut x = x0.clone();
        let mut noise = vec![0.0; x.numel()];
        for s in 0..=t {
            rng.fill_normal(&mut noise);
            let (keep, sd) = (self.alpha[s].sqrt(), self.beta[s].sqrt());
            x.data_mut()
                .iter_mut()
                .zip(&noise)
                .for_each(|(v, n)| *v = keep * *v + sd * n);
        }
        Ok(x)
    }

    /// Invert the marginal given a noise estimate.
    pub fn predict_x0_from_eps(
        &self,
        xt: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        clip: bool,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, b) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus_alpha_bar[t]);
        let x0 = xt.zip_with(eps_hat, |x, e| (x - b * e) / a)?;
        Ok(if clip { x0.map(|v| v.clamp(-1.0, 1.0)) } else { x0 })
    }

    /// Mean and variance of `q(x_{t-1} | x_t, x_0)` for `t >= 1`.
    pub fn posterior(&self, x0: &Tensor, xt: &Tensor, t: usize) -> Result<(Tensor, f64)> {
        self.check_t(t)?;
        if t == 0 {
            return Err(Error::param(
                "posterior is defined for t >= 1; t = 0 is the terminal sampler step",
            ));
        }
        Ok((self.posterior_mean(x0, xt, t)?, self.posterior.variance[t]))
    }

    fn posterior_mean(&self, x0: &Tensor, xt: &Tensor, t: usize) -> Result<Tensor> {
        let (c0, ct) = (self.posterior.coef_x0[t], self.posterior.coef_xt[t]);
        x0.zip_with(xt, |a, b| c0 * a + ct * b)
    }

    /// One reverse step with caller-supplied standard-normal `noise`.
    /// At `t == 0` the noise is ignored and the mean is returned.
    pub fn ancestral_step_with_noise(
        &self,
        xt: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        noise: &Tensor,
    ) -> Result<Tensor> {
        xt.same_shape(eps_hat, "ancestral_step")?;
        let x0_hat = self.predict_x0_from_eps(xt, t, eps_hat, true)?;
        let mean = self.posterior_mean(&x0_hat, xt, t)?;
        if t == 0 {
            return Ok(mean);
        }
        let sd = self.posterior.variance[t].sqrt();
        mean.zip_with(noise, |m, n| m + sd * n)
    }

    /// One reverse step `x_t -> x_{t-1}` drawing fresh noise from `rng`
    /// (nothing is drawn at `t == 0`).
    pub fn ancestral_step(
        &self,
        xt: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        let noise = if t == 0 {
            Tensor::zeros(xt.shape())
        } else {
            Tensor::randn(rng, xt.shape())
        };
        self.ancestral_step_with_noise(xt, t, eps_hat, &noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> NoiseSchedule {
        ScheduleConfig::desk().build().unwrap()
    }

    #[test]
    fn two_step_hand_computation() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.beta[0] - 0.1).abs() < 1e-15 && (s.beta[1] - 0.3).abs() < 1e-15);
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_rejected() {
        for (t, a, b) in [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.3, 0.2), (10, 0.1, 1.0)] {
            assert!(matches!(NoiseSchedule::linear(t, a, b), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn table_invariants() {
        let s = desk();
        assert_eq!(s.alpha_bar[0], 1.0 - s.beta[0]);
        let mut prod = 1.0;
        for t in 0..s.timesteps() {
            assert!(s.beta[t] > 0.0 && s.beta[t] < 1.0);
            if t > 0 {
                assert!(s.beta[t] >= s.beta[t - 1]);
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            }
            prod *= 1.0 - s.beta[t];
            assert!((s.alpha_bar[t] - prod).abs() < 1e-12);
            assert!((s.sqrt_alpha_bar[t] - s.alpha_bar[t].sqrt()).abs() < 1e-12);
            assert!((s.sqrt_one_minus_alpha_bar[t] - (1.0 - s.alpha_bar[t]).sqrt()).abs() < 1e-12);
            assert!(s.posterior.variance[t] >= 0.0);
        }
    }

    #[test]
    fn desk_schedule_final_alpha_bar() {
        // Independent evaluation: log ab_T = sum log(1 - beta_i).
        let n = 200;
        let log_ab: f64 = (0..n)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0)).ln())
            .sum();
        let s = desk();
        assert!((s.alpha_bar[n - 1] - log_ab.exp()).abs() < 1e-12);
        assert!(s.alpha_bar[n - 1] < 0.15, "{}", s.alpha_bar[n - 1]);
    }

    #[test]
    fn q_sample_degenerate_inputs() {
        let s = desk();
        let x0 = Tensor::randn(&mut Rng::new(1), &[3, 4]);
        let eps = Tensor::randn(&mut Rng::new(2), &[3, 4]);
        let zero = Tensor::zeros(&[3, 4]);
        let t = 57;
        let a = s.q_sample(&zero, t, &eps).unwrap();
        assert_eq!(a, eps.scale(s.sqrt_one_minus_alpha_bar[t]));
        let b = s.q_sample(&x0, t, &zero).unwrap();
        assert_eq!(b, x0.scale(s.sqrt_alpha_bar[t]));
        assert!(matches!(s.q_sample(&x0, 200, &eps), Err(Error::Parameter(_))));
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = desk();
        let x0 = Tensor::randn(&mut Rng::new(3), &[16]);
        let eps = Tensor::randn(&mut Rng::new(4), &[16]);
        for t in [0, 50, 199] {
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.predict_x0_from_eps(&xt, t, &eps, false).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-10);
            let zero = Tensor::zeros(&[16]);
            let no_eps = s.predict_x0_from_eps(&xt, t, &zero, false).unwrap();
            assert!(no_eps.max_abs_diff(&xt.scale(1.0 / s.sqrt_alpha_bar[t])).unwrap() < 1e-12);
        }
        // clamp definition: reconstructed 1.7 -> 1.0
        let t = 10;
        let xt = Tensor::from_vec(vec![1.7 * s.sqrt_alpha_bar[t]]);
        let clipped = s
            .predict_x0_from_eps(&xt, t, &Tensor::zeros(&[1]), true)
            .unwrap();
        assert_eq!(clipped.data(), &[1.0]);
    }

    #[test]
    fn posterior_edge_cases() {
        let s = desk();
        // First step uses the clean state as "previous".
        assert!((s.posterior.coef_x0[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.posterior.coef_xt[0], 0.0);
        assert_eq!(s.posterior.variance[0], 0.0);
        let x = Tensor::randn(&mut Rng::new(5), &[4]);
        assert!(matches!(s.posterior(&x, &x, 0), Err(Error::Parameter(_))));
        let t = 30;
        let (mean, _) = s.posterior(&x, &x, t).unwrap();
        let c = s.posterior.coef_x0[t] + s.posterior.coef_xt[t];
        assert!(mean.max_abs_diff(&x.scale(c)).unwrap() < 1e-14);
    }

    #[test]
    fn posterior_telescopes() {
        let s = desk();
        let x0 = Tensor::randn(&mut Rng::new(6), &[8]);
        for t in 1..s.timesteps() {
            let xt = s.q_mean(&x0, t).unwrap();
            let (mean, _) = s.posterior(&x0, &xt, t).unwrap();
            let expect = s.q_mean(&x0, t - 1).unwrap();
            assert!(mean.max_abs_diff(&expect).unwrap() < 1e-10, "t={t}");
        }
    }

    /// Brute-force Bayes on a 1-D grid: prior x_{t-1} ~ N(sqrt(ab_{t-1}) x0, 1-ab_{t-1}),
    /// likelihood x_t | x_{t-1} ~ N(sqrt(a_t) x_{t-1}, b_t).
    #[test]
    fn posterior_matches_grid_bayes() {
        let s = desk();
        for &(t, x0, xt) in &[(5usize, 0.7, -0.2), (60, -0.4, 1.1), (150, 0.3, 0.5)] {
            let ab_prev = s.alpha_bar[t - 1];
            let (pm, pv) = (ab_prev.sqrt() * x0, 1.0 - ab_prev);
            let (a, b) = (s.alpha[t].sqrt(), s.beta[t]);
            let n = 400_001;
            let (lo, hi) = (-8.0, 8.0);
            let dx = (hi - lo) / (n - 1) as f64;
            let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = lo + i as f64 * dx;
                let w = (-(x - pm).powi(2) / (2.0 * pv) - (xt - a * x).powi(2) / (2.0 * b)).exp();
                z += w;
                m1 += w * x;
                m2 += w * x * x;
            }
            let mean = m1 / z;
            let var = m2 / z - mean * mean;
            let x0t = Tensor::from_vec(vec![x0]);
            let xtt = Tensor::from_vec(vec![xt]);
            let (m, v) = s.posterior(&x0t, &xtt, t).unwrap();
            assert!((m.data()[0] - mean).abs() < 1e-6, "t={t}: {} vs {mean}", m.data()[0]);
            assert!((v - var).abs() < 1e-6, "t={t}: {v} vs {var}");
        }
    }

    #[test]
    fn ancestral_step_terminal_and_composition() {
        let s = desk();
        let mut rng = Rng::new(7);
        let x0 = Tensor::randn(&mut rng, &[4]).map(|v| v.clamp(-0.9, 0.9));
        let eps = Tensor::randn(&mut rng, &[4]);
        // t = 0: deterministic, equals x0_hat
        let x1 = s.q_sample(&x0, 0, &eps).unwrap();
        let a = s.ancestral_step(&x1, 0, &eps, &mut Rng::new(1)).unwrap();
        let b = s.ancestral_step(&x1, 0, &eps, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&x0).unwrap() < 1e-10);
        // perfect eps: zero-noise step equals the true posterior mean
        let t = 80;
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let step = s
            .ancestral_step_with_noise(&xt, t, &eps, &Tensor::zeros(&[4]))
            .unwrap();
        let (mean, _) = s.posterior(&x0, &xt, t).unwrap();
        assert!(step.max_abs_diff(&mean).unwrap() < 1e-12);
        // determinism given rng state
        let r1 = s.ancestral_step(&xt, t, &eps, &mut Rng::new(11)).unwrap();
        let r2 = s.ancestral_step(&xt, t, &eps, &mut Rng::new(11)).unwrap();
        assert_eq!(r1, r2);
        assert!(s.ancestral_step(&xt, t, &Tensor::zeros(&[5]), &mut rng).is_err());
    }
}
