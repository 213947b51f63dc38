//! Diagonal Gaussians over latent codes: closed-form KL, log-density, the
//! two reparameterized samplers, and a Monte-Carlo KL estimator.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Prng;

/// Range that log-variances are clamped to.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and log-variance, both `[batch, d]`, recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiagGaussian {
    pub mu: Var,
    pub logvar: Var,
}

impl DiagGaussian {
    pub fn new(tape: &Tape, mu: Var, logvar: Var) -> Result<Self> {
        let (sm, sl) = (tape.shape(mu), tape.shape(logvar));
        if sm != sl || sm.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                lhs: sm.to_vec(),
                rhs: sl.to_vec(),
            });
        }
        Ok(Self { mu, logvar })
    }

    /// Build from an unconstrained log-variance, clamping it to
    /// [`LOGVAR_MIN`, `LOGVAR_MAX`].
    pub fn clamped(tape: &mut Tape, mu: Var, raw_logvar: Var) -> Result<Self> {
        let logvar = tape.clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Self::new(tape, mu, logvar)
    }

    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape(self.mu)[0]
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mu)[1]
    }

    pub fn variance(&self, tape: &mut Tape) -> Result<Var> {
        tape.exp(self.logvar)
    }
}

fn check_same(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// `KL(q ‖ p)` per sample, summed over dimensions:
/// `½ Σ [log σp²/σq² + (σq² + (μq − μp)²)/σp² − 1]`.
pub fn gaussian_kl(tape: &mut Tape, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    check_same(tape, "gaussian_kl", q.mu, p.mu)?;
    let log_ratio = tape.sub(p.logvar, q.logvar)?;
    let neg_log_ratio = tape.neg(log_ratio)?;
    let var_ratio = tape.exp(neg_log_ratio)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let diff2 = tape.square(diff)?;
    let neg_lvp = tape.neg(p.logvar)?;
    let inv_vp = tape.exp(neg_lvp)?;
    let mahal = tape.mul(diff2, inv_vp)?;
    let t = tape.add(log_ratio, var_ratio)?;
    let t = tape.add(t, mahal)?;
    let t = tape.add_scalar(t, -1.0)?;
    let per_dim = tape.scale(t, 0.5)?;
    tape.sum_axis(per_dim, 1)
}

/// `log N(z; μ, σ²)` per sample: `−½ Σ [log 2πσ² + (z − μ)²/σ²]`.
pub fn gaussian_log_density(tape: &mut Tape, z: Var, p: &DiagGaussian) -> Result<Var> {
    check_same(tape, "gaussian_log_density", z, p.mu)?;
    let diff = tape.sub(z, p.mu)?;
    let diff2 = tape.square(diff)?;
    let neg_lv = tape.neg(p.logvar)?;
    let inv_var = tape.exp(neg_lv)?;
    let mahal = tape.mul(diff2, inv_var)?;
    let t = tape.add(p.logvar, mahal)?;
    let t = tape.add_scalar(t, LN_2PI)?;
    let per_dim = tape.scale(t, -0.5)?;
    tape.sum_axis(per_dim, 1)
}

/// Reparameterization used to draw latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// `z = μ + σ²·|ε|`.
    #[default]
    HalfNormal,
    /// `z = μ + σ·ε`.
    Standard,
}

/// A reparameterized draw together with the exogenous noise that produced it.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Var,
    pub source: DiagGaussian,
    pub noise: Tensor,
    pub sampler: Sampler,
}

impl LatentSample {
    /// Recompute `z` from `(source, noise)` on `tape`.
    pub fn replay(&self, tape: &mut Tape) -> Result<Var> {
        reparameterize(tape, &self.source, self.noise.clone(), self.sampler)
    }
}

fn reparameterize(
    tape: &mut Tape,
    p: &DiagGaussian,
    noise: Tensor,
    sampler: Sampler,
) -> Result<Var> {
    let scale = match sampler {
        Sampler::HalfNormal => tape.exp(p.logvar)?,
        Sampler::Standard => {
            let half = tape.scale(p.logvar, 0.5)?;
            tape.exp(half)?
        }
    };
    let eps = tape.constant(noise);
    let offset = tape.mul(scale, eps)?;
    tape.add(p.mu, offset)
}

/// Draw noise of the right shape and distribution for `sampler`.
pub fn draw_noise(shape: &[usize], sampler: Sampler, rng: &mut Prng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match sampler {
            Sampler::HalfNormal => rng.normal().abs(),
            Sampler::Standard => rng.normal(),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// Sample with a specific noise tensor; gradients flow to `μ` and log-variance.
pub fn sample_with_noise(
    tape: &mut Tape,
    p: &DiagGaussian,
    noise: Tensor,
    sampler: Sampler,
) -> Result<LatentSample> {
    let z = reparameterize(tape, p, noise.clone(), sampler)?;
    Ok(LatentSample {
        z,
        source: *p,
        noise,
        sampler,
    })
}

pub fn sample(
    tape: &mut Tape,
    p: &DiagGaussian,
    sampler: Sampler,
    rng: &mut Prng,
) -> Result<LatentSample> {
    let noise = draw_noise(tape.shape(p.mu), sampler, rng);
    sample_with_noise(tape, p, noise, sampler)
}

/// `z = μ + σ²·|ε|`, `ε ~ N(0, 1)`.
pub fn sample_half_normal(
    tape: &mut Tape,
    p: &DiagGaussian,
    rng: &mut Prng,
) -> Result<LatentSample> {
    sample(tape, p, Sampler::HalfNormal, rng)
}

/// `z = μ + σ·ε`, `ε ~ N(0, 1)`.
pub fn sample_standard(tape: &mut Tape, p: &DiagGaussian, rng: &mut Prng) -> Result<LatentSample> {
    sample(tape, p, Sampler::Standard, rng)
}

/// Plain parameters of a single diagonal Gaussian, outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Self {
        assert_eq!(mu.len(), logvar.len());
        Self { mu, logvar }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        -0.5 * self
            .mu
            .iter()
            .zip(&self.logvar)
            .zip(z)
            .map(|((m, lv), x)| LN_2PI + lv + (x - m).powi(2) * (-lv).exp())
            .sum::<f64>()
    }

    /// Record as a batch-of-one [`DiagGaussian`] of constants.
    pub fn on_tape(&self, tape: &mut Tape) -> DiagGaussian {
        let d = self.dim();
        let mu = tape.constant(Tensor::matrix(1, d, self.mu.clone()).expect("shape"));
        let lv = tape.constant(Tensor::matrix(1, d, self.logvar.clone()).expect("shape"));
        DiagGaussian { mu, logvar: lv }
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.mean - target).abs() <= n_se * self.std_err + 1e-12
    }
}

/// Smallest sample count accepted by [`mc_kl`].
pub const MC_KL_MIN_SAMPLES: usize = 10_000;

/// Mean of `log q(z) − log p(z)` over `n` draws `z ~ q`.
pub fn mc_kl(q: &GaussianParams, p: &GaussianParams, n: usize, rng: &mut Prng) -> Result<McEstimate> {
    if n < MC_KL_MIN_SAMPLES {
        return Err(Error::Config(format!(
            "mc_kl needs at least {MC_KL_MIN_SAMPLES} samples, got {n}"
        )));
    }
    if q.dim() != p.dim() {
        return Err(Error::ShapeMismatch {
            op: "mc_kl",
            lhs: vec![q.dim()],
            rhs: vec![p.dim()],
        });
    }
    let sd: Vec<f64> = q.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut z = vec![0.0; q.dim()];
    // Welford running moments.
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = q.mu[j] + sd[j] * rng.normal();
        }
        let x = q.log_density(&z) - p.log_density(&z);
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        std_err: (var / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(tape: &mut Tape, mu: &[f64], lv: &[f64]) -> DiagGaussian {
        GaussianParams::new(mu.to_vec(), lv.to_vec()).on_tape(tape)
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut t = Tape::new();
        let q = gauss(&mut t, &[0.3, -1.0, 2.0], &[0.1, -0.5, 1.2]);
        let kl = gaussian_kl(&mut t, &q, &q).unwrap();
        assert!(t.value(kl).item().abs() < 1e-15);
    }

    #[test]
    fn kl_unit_mean_shift() {
        let mut t = Tape::new();
        let q = gauss(&mut t, &[0.0], &[0.0]);
        let p = gauss(&mut t, &[1.0], &[0.0]);
        let kl = gaussian_kl(&mut t, &q, &p).unwrap();
        assert!((t.value(kl).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut t = Tape::new();
        let q = gauss(&mut t, &[0.0, 1.0], &[0.0, 0.0]);
        let p = gauss(&mut t, &[1.0], &[0.0]);
        assert!(matches!(
            gaussian_kl(&mut t, &q, &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_density_at_mean() {
        let mut t = Tape::new();
        let p = gauss(&mut t, &[0.7], &[0.0]);
        let z = t.constant(Tensor::matrix(1, 1, vec![0.7]).unwrap());
        let ld = gaussian_log_density(&mut t, z, &p).unwrap();
        assert!((t.value(ld).item() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_density_one_sigma_away() {
        let lv: f64 = 0.8;
        let mut t = Tape::new();
        let p = gauss(&mut t, &[-0.4], &[lv]);
        let z = t.constant(Tensor::matrix(1, 1, vec![-0.4 + (0.5 * lv).exp()]).unwrap());
        let ld = gaussian_log_density(&mut t, z, &p).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * lv.exp()).ln() - 0.5;
        assert!((t.value(ld).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn log_density_integrates_to_one() {
        let (mu, lv) = (0.3, -0.6_f64);
        let sd = (0.5 * lv).exp();
        let p = GaussianParams::new(vec![mu], vec![lv]);
        // Trapezoid rule over ±12σ.
        let n = 20_000;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * p.log_density(&[lo + i as f64 * h]).exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn clamping_bounds_logvar() {
        let mut t = Tape::new();
        let mu = t.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let lv = t.constant(Tensor::matrix(1, 3, vec![-50.0, 3.0, 40.0]).unwrap());
        let g = DiagGaussian::clamped(&mut t, mu, lv).unwrap();
        assert_eq!(t.value(g.logvar).data(), &[-10.0, 3.0, 10.0]);
    }

    #[test]
    fn half_normal_never_below_mean() {
        let mut t = Tape::new();
        let mut rng = Prng::seed_from_u64(5);
        let p = gauss(&mut t, &[0.5, -2.0, 1.0], &[-1.0, 0.0, 2.0]);
        for _ in 0..200 {
            let s = sample_half_normal(&mut t, &p, &mut rng).unwrap();
            let z = t.value(s.z).data().to_vec();
            assert!(z.iter().zip(t.value(p.mu).data()).all(|(z, m)| z >= m));
        }
    }

    #[test]
    fn vanishing_variance_pins_samples_to_mean() {
        let mut t = Tape::new();
        let p = gauss(&mut t, &[1.5], &[-10.0]);
        let s = sample_with_noise(&mut t, &p, Tensor::matrix(1, 1, vec![10.0]).unwrap(), Sampler::HalfNormal).unwrap();
        assert!((t.value(s.z).item() - 1.5).abs() < 5e-4);
        let s = sample_with_noise(&mut t, &p, Tensor::matrix(1, 1, vec![-10.0]).unwrap(), Sampler::Standard).unwrap();
        assert!((t.value(s.z).item() - 1.5).abs() < 0.1);
    }

    #[test]
    fn sample_replays_from_noise() {
        let mut t = Tape::new();
        let mut rng = Prng::seed_from_u64(9);
        let p = gauss(&mut t, &[0.2, 0.4], &[0.3, -0.3]);
        for sampler in [Sampler::HalfNormal, Sampler::Standard] {
            let s = sample(&mut t, &p, sampler, &mut rng).unwrap();
            let again = s.replay(&mut t).unwrap();
            assert_eq!(t.value(s.z), t.value(again));
        }
    }

    #[test]
    fn mc_kl_rejects_small_n() {
        let q = GaussianParams::new(vec![0.0], vec![0.0]);
        let mut rng = Prng::seed_from_u64(1);
        assert!(mc_kl(&q, &q, 9_999, &mut rng).is_err());
    }

    #[test]
    fn mc_kl_of_identical_is_exactly_zero() {
        let q = GaussianParams::new(vec![0.1, 0.2], vec![0.0, -1.0]);
        let mut rng = Prng::seed_from_u64(1);
        let est = mc_kl(&q, &q, 10_000, &mut rng).unwrap();
        assert_eq!(est.mean, 0.0);
        assert!(est.within(0.0, 3.0));
    }
}
