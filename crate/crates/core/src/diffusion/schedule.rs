use crate::error::{invalid, Result};

/// Per-timestep coefficients of the forward noising chain.
///
/// Timesteps are 0-based: `beta[0]` is the first forward step and
/// `alpha_bar[t] = Π_{s≤t} (1 − beta[s])`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// Linear schedule whose endpoints are the 1000-step defaults (1e-4, 0.02)
    /// rescaled by `1000 / steps`, so short chains still end near pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let (start, end) = scaled_beta_range(steps);
        Self::linear(steps, start, end)
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(invalid(format!("timestep {t} out of range [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// `(beta_start, beta_end)` for [`NoiseSchedule::scaled_linear`].
pub fn scaled_beta_range(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    ((1e-4 * scale).min(0.5), (0.02 * scale).min(0.999))
}
