use crate::error::{Error, Result};
use crate::numerics::Sampler;

/// Linear-beta forward noising process.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!("invalid linear schedule ({steps}, {beta_start}, {beta_end})")));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Schedule(format!("timestep {t} outside 0..={}", self.steps())))
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn noisy_latent(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let ab = self.alpha_bar(t)?;
        if eps.len() != x0.len() {
            return Err(Error::Dimension {
                op: "noisy_latent",
                left: vec![x0.len()],
                right: vec![eps.len()],
            });
        }
        if t == 0 {
            return Ok(x0.to_vec());
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Uniform timestep in `1..=T`.
    pub fn sample_t(&self, rng: &mut Sampler) -> usize {
        1 + rng.below(self.steps())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bars_strictly_decrease_from_one() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=1000 {
            let (a, b) = (s.alpha_bar(t - 1).unwrap(), s.alpha_bar(t).unwrap());
            assert!(b < a && b > 0.0);
        }
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn closed_forms() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.2, 0.9];
        assert_eq!(s.noisy_latent(&x0, 0, &[5.0, 5.0, 5.0]).unwrap(), x0.to_vec());
        let a = s.alpha_bar(100).unwrap().sqrt();
        let xt = s.noisy_latent(&x0, 100, &[0.0; 3]).unwrap();
        for (u, v) in xt.iter().zip(x0) {
            assert_eq!(*u, a * v);
        }
        assert!(matches!(s.noisy_latent(&x0, 2000, &[0.0; 3]), Err(Error::Schedule(_))));
    }

    #[test]
    fn monte_carlo_noise_variance() {
        let s = NoiseSchedule::default();
        let t = 100;
        let ab = s.alpha_bar(t).unwrap();
        let n = 100_000;
        let mut rng = Sampler::new(11);
        let x0 = vec![0.5; n];
        let eps = rng.gaussian_vec(n, 1.0);
        let xt = s.noisy_latent(&x0, t, &eps).unwrap();
        let resid: Vec<f64> = xt.iter().map(|v| v - ab.sqrt() * 0.5).collect();
        let mean = resid.iter().sum::<f64>() / n as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "var {var} vs {}", 1.0 - ab);
    }
}
