//! Loss terms: scaled softplus, cosine similarity, the cosine-based KL and
//! log-likelihood, and the total loss summed over view pairs.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::distributions::{gaussian_kl, gaussian_log_density, DiagGaussian};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    Gaussian,
    #[default]
    Cosine,
}

/// How the likelihood term enters the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlSignConvention {
    /// `L = KL − LL` with the cosine expression taken as the log-likelihood.
    PaperAlgorithm,
    /// The cosine expression is a loss and is added. Identical to
    /// `PaperAlgorithm` in Gaussian mode.
    #[default]
    LossForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub beta_kl: f64,
    pub beta_ll: f64,
    pub include_diagonal_pairs: bool,
    pub ll_sign_convention: LlSignConvention,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Cosine,
            beta_kl: 3.0,
            beta_ll: 1.0,
            include_diagonal_pairs: true,
            ll_sign_convention: LlSignConvention::LossForm,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_kl > 0.0) || !(self.beta_ll > 0.0) {
            return Err(Error::Config(format!(
                "objective.beta_kl and objective.beta_ll must be positive (got {}, {})",
                self.beta_kl, self.beta_ll
            )));
        }
        Ok(())
    }

    /// View pairs `(v1, v2)` that enter the loss, zero-based.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(4);
        for v1 in 0..2 {
            for v2 in 0..2 {
                if v1 != v2 || self.include_diagonal_pairs {
                    out.push((v1, v2));
                }
            }
        }
        out
    }
}

/// `(1/β)·ln(1 + exp(β·x))`.
pub fn scaled_softplus(tape: &mut Tape, x: Var, beta: f64) -> Result<Var> {
    tape.softplus(x, beta)
}

/// Row-wise cosine similarity of `[batch, d]` inputs.
pub fn cosine_sim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.cosine(a, b)
}

/// `softplus_β(−cos(a, b))`, per row.
pub fn s_beta(tape: &mut Tape, a: Var, b: Var, beta: f64) -> Result<Var> {
    let c = tape.cosine(a, b)?;
    let neg = tape.neg(c)?;
    tape.softplus(neg, beta)
}

fn check_four(tape: &Tape, op: &'static str, vars: [Var; 4]) -> Result<()> {
    let s0 = tape.shape(vars[0]);
    for v in &vars[1..] {
        if tape.shape(*v) != s0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s0.to_vec(),
                rhs: tape.shape(*v).to_vec(),
            });
        }
    }
    Ok(())
}

/// Cosine-based divergence between `(μ₁, σ₁²)` and `(μ₂, σ₂²)`:
/// `½ [log S(σ₁², σ₂²) + S(μ₁, μ₂)² + S(σ₁², σ₂²) − 1]` with `S = S_β`.
///
/// Not zero at equality; only differences matter for optimization.
pub fn cosine_kl(
    tape: &mut Tape,
    mu1: Var,
    mu2: Var,
    var1: Var,
    var2: Var,
    beta: f64,
) -> Result<Var> {
    check_four(tape, "cosine_kl", [mu1, mu2, var1, var2])?;
    let sv = s_beta(tape, var1, var2, beta)?;
    let sm = s_beta(tape, mu1, mu2, beta)?;
    let log_sv = tape.log(sv)?;
    let sm2 = tape.square(sm)?;
    let t = tape.add(log_sv, sm2)?;
    let t = tape.add(t, sv)?;
    let t = tape.add_scalar(t, -1.0)?;
    tape.scale(t, 0.5)
}

/// Cosine-based likelihood expression
/// `log S(σ₁², σ₂²) + 4·S(σ₁², σ₂²) + S(μ₁, μ₂)²·S(σ₁², σ₂²)`.
///
/// It shrinks as either pair aligns, so it behaves as a loss.
pub fn cosine_nll(
    tape: &mut Tape,
    mu1: Var,
    mu2: Var,
    var1: Var,
    var2: Var,
    beta: f64,
) -> Result<Var> {
    check_four(tape, "cosine_nll", [mu1, mu2, var1, var2])?;
    let sv = s_beta(tape, var1, var2, beta)?;
    let sm = s_beta(tape, mu1, mu2, beta)?;
    let log_sv = tape.log(sv)?;
    let four_sv = tape.scale(sv, 4.0)?;
    let sm2 = tape.square(sm)?;
    let cross = tape.mul(sm2, sv)?;
    let t = tape.add(log_sv, four_sv)?;
    tape.add(t, cross)
}

/// Everything the total loss reads, indexed by view.
#[derive(Clone, Copy, Debug)]
pub struct VsslInputs<'a> {
    /// Student posteriors `q_θs(z | x_v)`.
    pub student: &'a [DiagGaussian],
    /// Teacher priors `p_θt(z | x_v)`.
    pub teacher: &'a [DiagGaussian],
    /// One latent drawn from each student posterior.
    pub samples: &'a [Var],
    /// Denoiser outputs for each view's sample.
    pub denoised: &'a [DiagGaussian],
}

/// Per-pair values of a 2×2 view grid; `None` where a pair is excluded.
pub type PairGrid = [[Option<f64>; 2]; 2];

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    /// Batch-mean KL term for each `(v1, v2)`.
    pub kl: PairGrid,
    /// Batch-mean likelihood contribution to the total for each `(v1, v2)`,
    /// already carrying the sign with which it was added.
    pub ll: PairGrid,
}

fn require_views<T>(name: &str, xs: &[T]) -> Result<()> {
    if xs.len() != 2 {
        return Err(Error::MissingView(format!(
            "{name} has {} of 2 views",
            xs.len()
        )));
    }
    Ok(())
}

/// Sum over view pairs of `KL(q(z|x_v1) ‖ p(z|x_v2))` plus the likelihood
/// term between view `v1`'s student latent and view `v2`'s denoiser output,
/// each averaged over the batch.
pub fn vssl_total_loss(
    tape: &mut Tape,
    inputs: &VsslInputs<'_>,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    require_views("student", inputs.student)?;
    require_views("teacher", inputs.teacher)?;
    require_views("samples", inputs.samples)?;
    require_views("denoised", inputs.denoised)?;
    let batch = inputs.student[0].batch(tape);
    for g in inputs
        .student
        .iter()
        .chain(inputs.teacher)
        .chain(inputs.denoised)
    {
        if g.batch(tape) != batch {
            return Err(Error::ShapeMismatch {
                op: "vssl_total_loss",
                lhs: vec![batch],
                rhs: vec![g.batch(tape)],
            });
        }
    }

    let variances = |tape: &mut Tape, gs: &[DiagGaussian]| -> Result<Vec<Var>> {
        gs.iter().map(|g| g.variance(tape)).collect()
    };
    let (sv, tv, dv) = if cfg.mode == ObjectiveMode::Cosine {
        (
            variances(tape, inputs.student)?,
            variances(tape, inputs.teacher)?,
            variances(tape, inputs.denoised)?,
        )
    } else {
        Default::default()
    };

    let mut kl = [[None; 2]; 2];
    let mut ll = [[None; 2]; 2];
    let mut total: Option<Var> = None;
    for (v1, v2) in cfg.pairs() {
        let (s, t, d) = (&inputs.student[v1], &inputs.teacher[v2], &inputs.denoised[v2]);
        let kl_rows = match cfg.mode {
            ObjectiveMode::Gaussian => gaussian_kl(tape, s, t)?,
            ObjectiveMode::Cosine => cosine_kl(tape, s.mu, t.mu, sv[v1], tv[v2], cfg.beta_kl)?,
        };
        let ll_rows = match cfg.mode {
            ObjectiveMode::Gaussian => {
                let lp = gaussian_log_density(tape, inputs.samples[v1], d)?;
                tape.neg(lp)?
            }
            ObjectiveMode::Cosine => {
                let nll = cosine_nll(tape, s.mu, d.mu, sv[v1], dv[v2], cfg.beta_ll)?;
                match cfg.ll_sign_convention {
                    LlSignConvention::LossForm => nll,
                    LlSignConvention::PaperAlgorithm => tape.neg(nll)?,
                }
            }
        };
        let kl_term = tape.mean(kl_rows)?;
        let ll_term = tape.mean(ll_rows)?;
        let (kv, lv) = (tape.value(kl_term).item(), tape.value(ll_term).item());
        if !kv.is_finite() {
            return Err(Error::NonFinite(format!("kl_{}{}", v1 + 1, v2 + 1)));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("ll_{}{}", v1 + 1, v2 + 1)));
        }
        kl[v1][v2] = Some(kv);
        ll[v1][v2] = Some(lv);
        let pair = tape.add(kl_term, ll_term)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    let total = total.expect("at least the two cross pairs");
    Ok(LossBreakdown { total, kl, ll })
}

/// Mean cosine similarity between student and teacher means over the batch
/// and the configured view pairs.
pub fn alignment(
    tape: &mut Tape,
    student: &[DiagGaussian],
    teacher: &[DiagGaussian],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    require_views("student", student)?;
    require_views("teacher", teacher)?;
    let pairs = cfg.pairs();
    let mut acc = 0.0;
    for &(v1, v2) in &pairs {
        let c = tape.cosine(student[v1].mu, teacher[v2].mu)?;
        let m = tape.value(c);
        acc += m.sum() / m.numel() as f64;
    }
    Ok(acc / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn row(t: &mut Tape, xs: &[f64]) -> Var {
        t.input(Tensor::matrix(1, xs.len(), xs.to_vec()).unwrap())
    }

    fn val(t: &Tape, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn softplus_point_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -1.0, 1.0]));
        let s3 = scaled_softplus(&mut t, x, 3.0).unwrap();
        let s1 = scaled_softplus(&mut t, x, 1.0).unwrap();
        // Direct evaluation of (1/β)·ln(1 + e^{βx}).
        let direct = |x: f64, b: f64| (1.0 + (b * x).exp()).ln() / b;
        assert!((t.value(s3).data()[0] - direct(0.0, 3.0)).abs() < 1e-15);
        assert!((t.value(s3).data()[0] - 0.2310491).abs() < 1e-7);
        assert!((t.value(s3).data()[1] - 0.0161957).abs() < 1e-7);
        assert!((t.value(s1).data()[2] - 1.3132617).abs() < 1e-7);
    }

    #[test]
    fn cosine_point_values() {
        let mut t = Tape::new();
        let a = row(&mut t, &[1.0, 0.0]);
        let b = row(&mut t, &[1.0, 1.0]);
        let c = row(&mut t, &[0.0, 3.0]);
        let ab = cosine_sim(&mut t, a, b).unwrap();
        let aa = cosine_sim(&mut t, a, a).unwrap();
        let ac = cosine_sim(&mut t, a, c).unwrap();
        assert!((val(&t, ab) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((val(&t, aa) - 1.0).abs() < 1e-15);
        assert_eq!(val(&t, ac), 0.0);
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        let mut t = Tape::new();
        let a = row(&mut t, &[0.0, 0.0]);
        let b = row(&mut t, &[1.0, 2.0]);
        let c = cosine_sim(&mut t, a, b).unwrap();
        assert_eq!(val(&t, c), 0.0);
    }

    #[test]
    fn s_beta_point_values() {
        let mut t = Tape::new();
        let a = row(&mut t, &[0.5, -1.0, 2.0]);
        let neg_a = row(&mut t, &[-0.5, 1.0, -2.0]);
        let b = row(&mut t, &[2.0, 1.0, 0.0]);
        let same = s_beta(&mut t, a, a, 3.0).unwrap();
        let orth = s_beta(&mut t, a, b, 3.0).unwrap();
        let opp = s_beta(&mut t, a, neg_a, 1.0).unwrap();
        assert!((val(&t, same) - 0.0161957).abs() < 1e-7);
        assert!((val(&t, orth) - 0.2310491).abs() < 1e-7);
        assert!((val(&t, opp) - 1.3132617).abs() < 1e-7);
    }

    #[test]
    fn cosine_kl_and_nll_point_values() {
        let mut t = Tape::new();
        let mu = row(&mut t, &[1.0, 2.0]);
        let mu_orth = row(&mut t, &[-2.0, 1.0]);
        let var = row(&mut t, &[0.5, 1.5]);
        let kl_al = cosine_kl(&mut t, mu, mu, var, var, 3.0).unwrap();
        let kl_or = cosine_kl(&mut t, mu, mu_orth, var, var, 3.0).unwrap();
        let nll_al = cosine_nll(&mut t, mu, mu, var, var, 1.0).unwrap();
        let nll_or = cosine_nll(&mut t, mu, mu_orth, var, var, 1.0).unwrap();
        assert!((val(&t, kl_al) - -2.5533).abs() < 1e-4);
        assert!((val(&t, kl_or) - -2.5268).abs() < 1e-4);
        assert!((val(&t, nll_al) - 0.12302).abs() < 1e-4);
        assert!((val(&t, nll_or) - 0.242787).abs() < 1e-4);
    }

    #[test]
    fn cosine_kl_shape_mismatch() {
        let mut t = Tape::new();
        let a = row(&mut t, &[1.0, 2.0]);
        let b = row(&mut t, &[1.0, 2.0, 3.0]);
        assert!(cosine_kl(&mut t, a, b, a, a, 3.0).is_err());
        assert!(cosine_nll(&mut t, a, a, a, b, 1.0).is_err());
    }

    #[test]
    fn pair_sets() {
        let mut cfg = ObjectiveConfig::default();
        assert_eq!(cfg.pairs(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        cfg.include_diagonal_pairs = false;
        assert_eq!(cfg.pairs(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn missing_view_is_error() {
        let mut t = Tape::new();
        let mu = row(&mut t, &[1.0]);
        let g = DiagGaussian::new(&t, mu, mu).unwrap();
        let inputs = VsslInputs {
            student: &[g],
            teacher: &[g, g],
            samples: &[mu, mu],
            denoised: &[g, g],
        };
        let err = vssl_total_loss(&mut t, &inputs, &ObjectiveConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingView(_)));
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut t = Tape::new();
        let mu = row(&mut t, &[1.0]);
        let lv = row(&mut t, &[0.0]);
        let bad = t.input(Tensor::matrix(1, 1, vec![f64::NAN]).unwrap());
        let g = DiagGaussian::new(&t, mu, lv).unwrap();
        let gb = DiagGaussian::new(&t, bad, lv).unwrap();
        let cfg = ObjectiveConfig {
            mode: ObjectiveMode::Gaussian,
            ..Default::default()
        };
        let inputs = VsslInputs {
            student: &[g, g],
            teacher: &[g, gb],
            samples: &[mu, mu],
            denoised: &[g, g],
        };
        let err = vssl_total_loss(&mut t, &inputs, &cfg).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value in kl_12");
    }

    #[test]
    fn invalid_beta_rejected() {
        let cfg = ObjectiveConfig {
            beta_kl: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
