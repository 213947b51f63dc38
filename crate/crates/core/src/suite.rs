//! Verification suites behind `vssl gradcheck` and `vssl klcheck`.

use serde::Serialize;

use crate::diffcore::{finite_difference_gradient, max_relative_error, Tape, Tensor, Var};
use crate::distributions::{
    gaussian_kl, gaussian_log_density, mc_kl, sample_with_noise, DiagGaussian, GaussianParams,
    McEstimate, Sampler, MC_KL_MIN_SAMPLES,
};
use crate::error::{Error, Result};
use crate::objectives::{
    cosine_kl, cosine_nll, vssl_total_loss, LlSignConvention, ObjectiveConfig, ObjectiveMode,
    VsslInputs,
};
use crate::rng::Prng;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_INSTANCES: usize = 100;
const FD_STEP: f64 = 1e-6;

/// Names an op whose analytic gradient the suite perturbs before comparing,
/// so that a failing report can be exercised end to end.
pub const CORRUPT_ENV: &str = "VSSL_GRADCHECK_CORRUPT";

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub tolerance: f64,
    pub passed: bool,
    pub ops: Vec<OpReport>,
}

impl GradReport {
    pub fn failed_ops(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op).collect()
    }
}

type Build = fn(&mut Tape, &[Var], &[Tensor]) -> Result<Var>;
type Generate = fn(&mut Prng) -> (Vec<Tensor>, Vec<Tensor>);

struct Case {
    op: &'static str,
    generate: Generate,
    build: Build,
}

fn mat(rng: &mut Prng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, rng.normal_vec(r * c)).expect("shape")
}

/// Entries bounded away from zero by at least `gap` in magnitude.
fn away_from_zero(rng: &mut Prng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            sign * rng.uniform_range(gap, 2.0)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn positive(rng: &mut Prng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(0.2, 3.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn two(rng: &mut Prng) -> (Vec<Tensor>, Vec<Tensor>) {
    (vec![mat(rng, 3, 4), mat(rng, 3, 4)], vec![])
}

fn one(rng: &mut Prng) -> (Vec<Tensor>, Vec<Tensor>) {
    (vec![mat(rng, 3, 4)], vec![])
}

fn gaussian(tape: &Tape, mu: Var, logvar: Var) -> Result<DiagGaussian> {
    DiagGaussian::new(tape, mu, logvar)
}

fn logvar(rng: &mut Prng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
    Tensor::matrix(r, c, data).expect("shape")
}

fn total_loss_inputs(rng: &mut Prng) -> (Vec<Tensor>, Vec<Tensor>) {
    // student, teacher, denoised: (μ, log σ²) per view; then one sample per view.
    let mut xs = Vec::with_capacity(14);
    for _ in 0..6 {
        xs.push(mat(rng, 3, 4));
        xs.push(logvar(rng, 3, 4));
    }
    xs.push(mat(rng, 3, 4));
    xs.push(mat(rng, 3, 4));
    (xs, vec![])
}

fn total_loss(
    tape: &mut Tape,
    v: &[Var],
    mode: ObjectiveMode,
    sign: LlSignConvention,
) -> Result<Var> {
    let g = |tape: &Tape, i: usize| gaussian(tape, v[2 * i], v[2 * i + 1]);
    let student = [g(tape, 0)?, g(tape, 1)?];
    let teacher = [g(tape, 2)?, g(tape, 3)?];
    let denoised = [g(tape, 4)?, g(tape, 5)?];
    let samples = [v[12], v[13]];
    let cfg = ObjectiveConfig {
        mode,
        ll_sign_convention: sign,
        ..Default::default()
    };
    let inputs = VsslInputs {
        student: &student,
        teacher: &teacher,
        samples: &samples,
        denoised: &denoised,
    };
    Ok(vssl_total_loss(tape, &inputs, &cfg)?.total)
}

fn cases() -> Vec<Case> {
    vec![
        Case { op: "add", generate: two, build: |t, v, _| t.add(v[0], v[1]) },
        Case {
            op: "add_broadcast",
            generate: |r| (vec![mat(r, 3, 4), Tensor::vector(r.normal_vec(4)), Tensor::scalar(r.normal())], vec![]),
            build: |t, v, _| {
                let a = t.add(v[0], v[1])?;
                let b = t.add(v[2], a)?;
                t.add(v[1], b)
            },
        },
        Case { op: "sub", generate: two, build: |t, v, _| t.sub(v[0], v[1]) },
        Case {
            op: "sub_broadcast",
            generate: |r| (vec![mat(r, 3, 4), Tensor::vector(r.normal_vec(4)), Tensor::scalar(r.normal())], vec![]),
            build: |t, v, _| {
                let a = t.sub(v[0], v[1])?;
                t.sub(v[2], a)
            },
        },
        Case { op: "mul", generate: two, build: |t, v, _| t.mul(v[0], v[1]) },
        Case {
            op: "mul_broadcast",
            generate: |r| (vec![mat(r, 3, 4), Tensor::vector(r.normal_vec(4)), Tensor::scalar(r.normal())], vec![]),
            build: |t, v, _| {
                let a = t.mul(v[0], v[1])?;
                t.mul(v[2], a)
            },
        },
        Case {
            op: "div",
            generate: |r| (vec![mat(r, 3, 4), away_from_zero(r, &[3, 4], 0.5)], vec![]),
            build: |t, v, _| t.div(v[0], v[1]),
        },
        Case {
            op: "div_broadcast",
            generate: |r| {
                let b = away_from_zero(r, &[4], 0.5);
                let c = away_from_zero(r, &[], 0.5);
                (vec![mat(r, 3, 4), b, c], vec![])
            },
            build: |t, v, _| {
                let a = t.div(v[0], v[1])?;
                t.div(a, v[2])
            },
        },
        Case { op: "neg", generate: one, build: |t, v, _| t.neg(v[0]) },
        Case { op: "scale", generate: one, build: |t, v, _| t.scale(v[0], -1.7) },
        Case { op: "add_scalar", generate: one, build: |t, v, _| t.add_scalar(v[0], 0.3) },
        Case { op: "exp", generate: one, build: |t, v, _| t.exp(v[0]) },
        Case {
            op: "log",
            generate: |r| (vec![positive(r, &[3, 4])], vec![]),
            build: |t, v, _| t.log(v[0]),
        },
        Case { op: "square", generate: one, build: |t, v, _| t.square(v[0]) },
        Case {
            op: "sqrt",
            generate: |r| (vec![positive(r, &[3, 4])], vec![]),
            build: |t, v, _| t.sqrt(v[0]),
        },
        Case {
            op: "relu",
            generate: |r| (vec![away_from_zero(r, &[3, 4], 0.01)], vec![]),
            build: |t, v, _| t.relu(v[0]),
        },
        Case {
            op: "clamp",
            generate: |r| {
                // Keep entries clear of the bounds at ±1.
                let data = (0..12)
                    .map(|_| {
                        let x = r.uniform_range(-2.0, 2.0);
                        if (x.abs() - 1.0).abs() < 0.01 { x * 0.9 } else { x }
                    })
                    .collect();
                (vec![Tensor::matrix(3, 4, data).unwrap()], vec![])
            },
            build: |t, v, _| t.clamp(v[0], -1.0, 1.0),
        },
        Case {
            op: "abs",
            generate: |r| (vec![away_from_zero(r, &[3, 4], 0.01)], vec![]),
            build: |t, v, _| t.abs(v[0]),
        },
        Case {
            op: "softplus",
            generate: |r| {
                let data = (0..12).map(|_| r.uniform_range(-4.0, 4.0)).collect();
                (vec![Tensor::matrix(3, 4, data).unwrap()], vec![])
            },
            build: |t, v, _| {
                let a = t.softplus(v[0], 1.0)?;
                let b = t.softplus(v[0], 3.0)?;
                t.add(a, b)
            },
        },
        Case {
            op: "matmul",
            generate: |r| (vec![mat(r, 3, 5), mat(r, 5, 2)], vec![]),
            build: |t, v, _| t.matmul(v[0], v[1]),
        },
        Case { op: "sum", generate: one, build: |t, v, _| t.sum(v[0]) },
        Case { op: "mean", generate: one, build: |t, v, _| t.mean(v[0]) },
        Case {
            op: "sum_axis",
            generate: one,
            build: |t, v, _| {
                let a = t.sum_axis(v[0], 0)?;
                let b = t.sum_axis(v[0], 1)?;
                let a = t.sum(a)?;
                let b = t.square(b)?;
                let b = t.sum(b)?;
                t.add(a, b)
            },
        },
        Case {
            op: "mean_axis",
            generate: one,
            build: |t, v, _| {
                let a = t.mean_axis(v[0], 1)?;
                t.square(a)
            },
        },
        Case {
            op: "concat_cols",
            generate: |r| (vec![mat(r, 3, 2), mat(r, 3, 4)], vec![]),
            build: |t, v, _| t.concat_cols(v[0], v[1]),
        },
        Case {
            op: "slice_cols",
            generate: |r| (vec![mat(r, 3, 6)], vec![]),
            build: |t, v, _| t.slice_cols(v[0], 1, 4),
        },
        Case { op: "cosine", generate: two, build: |t, v, _| t.cosine(v[0], v[1]) },
        Case {
            op: "batch_norm",
            generate: |r| (vec![mat(r, 5, 3)], vec![]),
            build: |t, v, _| Ok(t.batch_norm(v[0], 1e-5)?.0),
        },
        Case {
            op: "sampler_half_normal",
            generate: |r| {
                let noise = Tensor::matrix(3, 4, (0..12).map(|_| r.normal().abs()).collect()).unwrap();
                (vec![mat(r, 3, 4), logvar(r, 3, 4)], vec![noise])
            },
            build: |t, v, c| {
                let p = gaussian(t, v[0], v[1])?;
                Ok(sample_with_noise(t, &p, c[0].clone(), Sampler::HalfNormal)?.z)
            },
        },
        Case {
            op: "sampler_standard",
            generate: |r| {
                let noise = mat(r, 3, 4);
                (vec![mat(r, 3, 4), logvar(r, 3, 4)], vec![noise])
            },
            build: |t, v, c| {
                let p = gaussian(t, v[0], v[1])?;
                Ok(sample_with_noise(t, &p, c[0].clone(), Sampler::Standard)?.z)
            },
        },
        Case {
            op: "gaussian_kl",
            generate: |r| (vec![mat(r, 3, 4), logvar(r, 3, 4), mat(r, 3, 4), logvar(r, 3, 4)], vec![]),
            build: |t, v, _| {
                let q = gaussian(t, v[0], v[1])?;
                let p = gaussian(t, v[2], v[3])?;
                gaussian_kl(t, &q, &p)
            },
        },
        Case {
            op: "gaussian_log_density",
            generate: |r| (vec![mat(r, 3, 4), mat(r, 3, 4), logvar(r, 3, 4)], vec![]),
            build: |t, v, _| {
                let p = gaussian(t, v[1], v[2])?;
                gaussian_log_density(t, v[0], &p)
            },
        },
        Case {
            op: "cosine_kl",
            generate: |r| (vec![mat(r, 3, 4), mat(r, 3, 4), positive(r, &[3, 4]), positive(r, &[3, 4])], vec![]),
            build: |t, v, _| cosine_kl(t, v[0], v[1], v[2], v[3], 3.0),
        },
        Case {
            op: "cosine_nll",
            generate: |r| (vec![mat(r, 3, 4), mat(r, 3, 4), positive(r, &[3, 4]), positive(r, &[3, 4])], vec![]),
            build: |t, v, _| cosine_nll(t, v[0], v[1], v[2], v[3], 1.0),
        },
        Case {
            op: "vssl_total_loss_gaussian_loss_form",
            generate: total_loss_inputs,
            build: |t, v, _| total_loss(t, v, ObjectiveMode::Gaussian, LlSignConvention::LossForm),
        },
        Case {
            op: "vssl_total_loss_gaussian_paper_algorithm",
            generate: total_loss_inputs,
            build: |t, v, _| total_loss(t, v, ObjectiveMode::Gaussian, LlSignConvention::PaperAlgorithm),
        },
        Case {
            op: "vssl_total_loss_cosine_loss_form",
            generate: total_loss_inputs,
            build: |t, v, _| total_loss(t, v, ObjectiveMode::Cosine, LlSignConvention::LossForm),
        },
        Case {
            op: "vssl_total_loss_cosine_paper_algorithm",
            generate: total_loss_inputs,
            build: |t, v, _| total_loss(t, v, ObjectiveMode::Cosine, LlSignConvention::PaperAlgorithm),
        },
    ]
}

/// Every op name the gradient suite covers.
pub fn grad_ops() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

/// Reduce `out` to a scalar through a fixed random projection so that every
/// output coordinate contributes to the checked gradient.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn evaluate(case: &Case, xs: &[Tensor], consts: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars, consts)?;
    let loss = project(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

fn check_instance(case: &Case, rng: &mut Prng, corrupt: bool) -> Result<f64> {
    let (xs, consts) = (case.generate)(rng);
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars, &consts)?;
    let shape = tape.shape(out).to_vec();
    let n = shape.iter().product();
    let weights = Tensor::new(shape, rng.normal_vec(n))?;
    let loss = project(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let mut analytic = grads.get_or_zeros(&tape, *v);
        if corrupt && i == 0 {
            analytic.data_mut()[0] += 1e-3;
        }
        let numeric = finite_difference_gradient(
            |p| {
                let mut moved = xs.clone();
                moved[i] = p.clone();
                evaluate(case, &moved, &consts, &weights)
            },
            &xs[i],
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Analytic vs central-difference gradients for every op over `instances`
/// random inputs each. The op named by [`CORRUPT_ENV`], if any, has its
/// analytic gradient perturbed.
pub fn grad_suite(seed: u64, instances: usize) -> GradReport {
    let corrupt = std::env::var(CORRUPT_ENV).ok();
    grad_suite_with(seed, instances, corrupt.as_deref())
}

pub fn grad_suite_with(seed: u64, instances: usize, corrupt: Option<&str>) -> GradReport {
    let ops: Vec<OpReport> = cases()
        .iter()
        .enumerate()
        .map(|(k, case)| {
            let mut rng = Prng::derive(seed, &[k as u64]);
            let is_corrupt = corrupt == Some(case.op);
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..instances {
                match check_instance(case, &mut rng, is_corrupt) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            OpReport {
                op: case.op,
                instances,
                max_rel_err: worst,
                passed: error.is_none() && worst <= GRAD_TOLERANCE,
                error,
            }
        })
        .collect();
    GradReport {
        seed,
        tolerance: GRAD_TOLERANCE,
        passed: ops.iter().all(|o| o.passed),
        ops,
    }
}

pub const KL_INSTANCES: usize = 20;
pub const KL_DIM: usize = 8;
pub const KL_SE_BOUND: f64 = 3.0;
pub const KL_DEFAULT_SEED: u64 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct KlInstance {
    pub index: usize,
    pub identical: bool,
    pub closed_form: f64,
    pub mc: McEstimate,
    /// `|closed_form − mc.mean| / mc.std_err`.
    pub z: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct KlReport {
    pub n: usize,
    pub dim: usize,
    pub passed: bool,
    pub instances: Vec<KlInstance>,
}

fn random_gaussian(rng: &mut Prng, d: usize) -> GaussianParams {
    GaussianParams::new(
        (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    )
}

/// Closed-form KL against its Monte-Carlo estimate on
/// [`KL_INSTANCES`] random `KL_DIM`-dimensional pairs; instance 0 has `q = p`.
pub fn kl_suite(n: usize, seed: u64) -> Result<KlReport> {
    if n < MC_KL_MIN_SAMPLES {
        return Err(Error::Config(format!(
            "--n must be at least {MC_KL_MIN_SAMPLES}, got {n}"
        )));
    }
    let mut rng = Prng::derive(seed, &[0]);
    let mut instances = Vec::with_capacity(KL_INSTANCES);
    for index in 0..KL_INSTANCES {
        let q = random_gaussian(&mut rng, KL_DIM);
        let p = if index == 0 {
            q.clone()
        } else {
            random_gaussian(&mut rng, KL_DIM)
        };
        let mut tape = Tape::new();
        let (tq, tp) = (q.on_tape(&mut tape), p.on_tape(&mut tape));
        let kl = gaussian_kl(&mut tape, &tq, &tp)?;
        let closed_form = tape.value(kl).item();
        let mut mc_rng = Prng::derive(seed, &[1, index as u64]);
        let mc = mc_kl(&q, &p, n, &mut mc_rng)?;
        let diff = (closed_form - mc.mean).abs();
        instances.push(KlInstance {
            index,
            identical: index == 0,
            closed_form,
            mc,
            z: if mc.std_err > 0.0 { diff / mc.std_err } else { 0.0 },
            passed: mc.within(closed_form, KL_SE_BOUND),
        });
    }
    Ok(KlReport {
        n,
        dim: KL_DIM,
        passed: instances.iter().all(|i| i.passed),
        instances,
    })
}

/// Alignment before and after one plain gradient step of the cosine-mode
/// total loss, taken on free student means and log-variances. Teacher
/// parameters are random and fixed; the denoiser outputs equal the teacher's.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DescentProbe {
    pub before: f64,
    pub after: f64,
}

pub fn alignment_descent(
    convention: LlSignConvention,
    step: f64,
    rng: &mut Prng,
) -> Result<DescentProbe> {
    let (b, d) = (4, 6);
    let student: Vec<Tensor> = (0..2)
        .flat_map(|_| [mat(rng, b, d), logvar(rng, b, d)])
        .collect();
    let teacher: Vec<Tensor> = (0..2)
        .flat_map(|_| [mat(rng, b, d), logvar(rng, b, d)])
        .collect();
    let cfg = ObjectiveConfig {
        mode: ObjectiveMode::Cosine,
        ll_sign_convention: convention,
        ..Default::default()
    };

    let run = |student: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let s: Vec<Var> = student.iter().map(|t| tape.input(t.clone())).collect();
        let t: Vec<Var> = teacher.iter().map(|t| tape.constant(t.clone())).collect();
        let q = [gaussian(&tape, s[0], s[1])?, gaussian(&tape, s[2], s[3])?];
        let p = [gaussian(&tape, t[0], t[1])?, gaussian(&tape, t[2], t[3])?];
        let align = crate::objectives::alignment(&mut tape, &q, &p, &cfg)?;
        if !grad {
            return Ok((align, Vec::new()));
        }
        let inputs = VsslInputs {
            student: &q,
            teacher: &p,
            samples: &[q[0].mu, q[1].mu],
            denoised: &p,
        };
        let loss = vssl_total_loss(&mut tape, &inputs, &cfg)?.total;
        let grads = tape.backward(loss)?;
        Ok((align, s.iter().map(|v| grads.get_or_zeros(&tape, *v)).collect()))
    };

    let (before, grads) = run(&student, true)?;
    let moved: Vec<Tensor> = student
        .iter()
        .zip(&grads)
        .map(|(p, g)| {
            let mut p = p.clone();
            p.axpy(-step, g);
            p
        })
        .collect();
    let (after, _) = run(&moved, false)?;
    Ok(DescentProbe { before, after })
}
