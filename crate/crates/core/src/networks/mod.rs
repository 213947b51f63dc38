//! Encoder, projector, predictor and denoiser heads, and the student/teacher
//! pair coupled by an exponential moving average.

mod checkpoint;

pub(crate) use checkpoint::write_atomic;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    infer_arch, load_checkpoint, read_manifest, read_raw, save_checkpoint, weights_checksum,
    Manifest, ManifestEntry,
};

use crate::diffcore::{BufferId, ParamId, ParamSet, Tape, Tensor, Var};
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::rng::Prng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_TAU: f64 = 0.996;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Student,
    Teacher,
}

/// How a forward pass binds parameters onto the tape.
#[derive(Clone, Copy, Debug)]
struct Binding {
    mode: Mode,
    trainable: bool,
    track_stats: bool,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
}

impl Linear {
    fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut init = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
        };
        let w = Tensor::matrix(in_dim, out_dim, init(in_dim * out_dim)).expect("shape");
        let b = Tensor::vector(init(out_dim));
        Self {
            weight: ps.add(format!("{name}.weight"), w),
            bias: ps.add(format!("{name}.bias"), b),
            in_dim,
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamSet, bind: Binding, x: Var) -> Result<Var> {
        let w = bind_param(tape, ps, bind, self.weight);
        let b = bind_param(tape, ps, bind, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[dim], 1.0)),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &mut ParamSet, bind: Binding, x: Var) -> Result<Var> {
        let xhat = match bind.mode {
            Mode::Train => {
                let (xhat, stats) = tape.batch_norm(x, BN_EPS)?;
                if bind.track_stats {
                    let n = tape.shape(x)[0] as f64;
                    let rm = ps.buffer_mut(self.running_mean).data_mut();
                    for (r, m) in rm.iter_mut().zip(&stats.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    let rv = ps.buffer_mut(self.running_var).data_mut();
                    for (r, v) in rv.iter_mut().zip(&stats.var) {
                        let unbiased = v * n / (n - 1.0);
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * unbiased;
                    }
                }
                xhat
            }
            Mode::Eval => {
                let mean = tape.constant(ps.buffer(self.running_mean).clone());
                let inv_std = ps
                    .buffer(self.running_var)
                    .map(|v| 1.0 / (v + BN_EPS).sqrt());
                let inv_std = tape.constant(inv_std);
                let centered = tape.sub(x, mean)?;
                tape.mul(centered, inv_std)?
            }
        };
        let gamma = bind_param(tape, ps, bind, self.gamma);
        let beta = bind_param(tape, ps, bind, self.beta);
        let y = tape.mul(xhat, gamma)?;
        tape.add(y, beta)
    }
}

fn bind_param(tape: &mut Tape, ps: &ParamSet, bind: Binding, id: ParamId) -> Var {
    let value = ps.value(id).clone();
    if bind.trainable {
        tape.param(id, value)
    } else {
        tape.constant(value)
    }
}

/// Two affine layers with batch normalization and ReLU between them.
#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Mlp {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut Prng,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden, rng),
            bn: BatchNorm::new(ps, &format!("{name}.bn"), hidden),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        ps: &mut ParamSet,
        bind: Binding,
        x: Var,
        what: &'static str,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.fc1.in_dim {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: shape.to_vec(),
                rhs: vec![self.fc1.in_dim],
            });
        }
        let h = self.fc1.forward(tape, ps, bind, x)?;
        let h = self.bn.forward(tape, ps, bind, h)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, ps, bind, h)
    }
}

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub latent_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            encoder_hidden: 128,
            feat_dim: 64,
            head_hidden: 128,
            latent_dim: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("feat_dim", self.feat_dim),
            ("head_hidden", self.head_hidden),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Trainable scalar count of one side's encoder, projector and predictor.
    pub fn shared_param_count(&self) -> usize {
        let d = self.latent_dim;
        mlp_params(self.input_dim, self.encoder_hidden, self.feat_dim)
            + mlp_params(self.feat_dim, self.head_hidden, 2 * d)
            + mlp_params(2 * d, self.head_hidden, 2 * d)
    }

    pub fn denoiser_param_count(&self) -> usize {
        2 * mlp_params(self.latent_dim, self.head_hidden, self.latent_dim)
    }
}

fn mlp_params(i: usize, h: usize, o: usize) -> usize {
    i * h + h + 2 * h + h * o + o
}

#[derive(Clone, Debug)]
struct Heads {
    encoder: Mlp,
    projector: Mlp,
    predictor: Mlp,
    denoiser_mu: Mlp,
    denoiser_var: Mlp,
}

/// Student (`θs ∪ φ`) and teacher (`θt`) parameters with a shared layout.
///
/// The teacher's parameter set is the prefix of the student's covering
/// encoder, projector and predictor; the denoisers exist only on the
/// student side.
#[derive(Clone, Debug)]
pub struct TeacherStudent {
    arch: ArchConfig,
    heads: Heads,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub tau: f64,
}

impl TeacherStudent {
    /// Random student; the teacher starts as an exact copy.
    pub fn new(arch: ArchConfig, tau: f64, rng: &mut Prng) -> Result<Self> {
        arch.validate()?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
        }
        let d = arch.latent_dim;
        let mut ps = ParamSet::new();
        let encoder = Mlp::new(
            &mut ps,
            "encoder",
            arch.input_dim,
            arch.encoder_hidden,
            arch.feat_dim,
            rng,
        );
        let projector = Mlp::new(&mut ps, "projector", arch.feat_dim, arch.head_hidden, 2 * d, rng);
        let predictor = Mlp::new(&mut ps, "predictor", 2 * d, arch.head_hidden, 2 * d, rng);
        let teacher = ps.clone();
        let denoiser_mu = Mlp::new(&mut ps, "denoiser_mu", d, arch.head_hidden, d, rng);
        let denoiser_var = Mlp::new(&mut ps, "denoiser_var", d, arch.head_hidden, d, rng);
        Ok(Self {
            arch,
            heads: Heads {
                encoder,
                projector,
                predictor,
                denoiser_mu,
                denoiser_var,
            },
            student: ps,
            teacher,
            tau,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn side(&mut self, side: Side, mode: Mode) -> (&mut ParamSet, Binding) {
        match side {
            Side::Student => (
                &mut self.student,
                Binding {
                    mode,
                    trainable: true,
                    track_stats: mode == Mode::Train,
                },
            ),
            Side::Teacher => (
                &mut self.teacher,
                Binding {
                    mode,
                    trainable: false,
                    track_stats: false,
                },
            ),
        }
    }

    /// Backbone features `f(x)`, `[batch, feat_dim]`.
    pub fn encode(&mut self, tape: &mut Tape, side: Side, x: Var, mode: Mode) -> Result<Var> {
        let enc = self.heads.encoder.clone();
        let (ps, bind) = self.side(side, mode);
        enc.forward(tape, ps, bind, x, "encode")
    }

    /// Projector head: features to `(μ, log σ²)`.
    pub fn project(
        &mut self,
        tape: &mut Tape,
        side: Side,
        features: Var,
        mode: Mode,
    ) -> Result<DiagGaussian> {
        let head = self.heads.projector.clone();
        let (ps, bind) = self.side(side, mode);
        let out = head.forward(tape, ps, bind, features, "project")?;
        split_gaussian(tape, out, self.arch.latent_dim)
    }

    /// Predictor head: refines `(μ, log σ²)` given their concatenation.
    pub fn predict(
        &mut self,
        tape: &mut Tape,
        side: Side,
        g: &DiagGaussian,
        mode: Mode,
    ) -> Result<DiagGaussian> {
        let head = self.heads.predictor.clone();
        let input = tape.concat_cols(g.mu, g.logvar)?;
        let (ps, bind) = self.side(side, mode);
        let out = head.forward(tape, ps, bind, input, "predict")?;
        split_gaussian(tape, out, self.arch.latent_dim)
    }

    /// Student denoisers: a sampled latent to `(μ_recon, log σ²_recon)`.
    pub fn denoise(&mut self, tape: &mut Tape, z: Var, mode: Mode) -> Result<DiagGaussian> {
        let (dm, dv) = (self.heads.denoiser_mu.clone(), self.heads.denoiser_var.clone());
        let (ps, bind) = self.side(Side::Student, mode);
        let mu = dm.forward(tape, ps, bind, z, "denoise")?;
        let raw_lv = dv.forward(tape, ps, bind, z, "denoise")?;
        DiagGaussian::clamped(tape, mu, raw_lv)
    }

    /// `θt ← τ·θt + (1 − τ)·θs`; batch-norm statistics are copied.
    pub fn ema_update(&mut self) {
        let tau = self.tau;
        for id in self.teacher.ids() {
            let s = self.student.value(id).data();
            let t = self.teacher.value_mut(id).data_mut();
            for (tv, sv) in t.iter_mut().zip(s) {
                *tv = tau * *tv + (1.0 - tau) * sv;
            }
        }
        let student_buffers: Vec<Tensor> =
            self.student.buffers().map(|(_, b)| b.clone()).collect();
        for (t, s) in self.teacher.buffers_mut().zip(student_buffers) {
            *t = s;
        }
    }

    /// Every named tensor in checkpoint order: student parameters and
    /// buffers, then teacher parameters and buffers.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, ps) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (n, t) in ps.params() {
                out.push((format!("{prefix}.{n}"), t));
            }
            for (n, t) in ps.buffers() {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, ps) in [("student", &mut self.student), ("teacher", &mut self.teacher)] {
            let names: Vec<String> = ps
                .params()
                .map(|(n, _)| n.to_owned())
                .chain(ps.buffers().map(|(n, _)| n.to_owned()))
                .collect();
            for (n, t) in names.into_iter().zip(ps.tensors_mut()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out
    }
}

fn split_gaussian(tape: &mut Tape, out: Var, d: usize) -> Result<DiagGaussian> {
    let mu = tape.slice_cols(out, 0, d)?;
    let raw_lv = tape.slice_cols(out, d, 2 * d)?;
    DiagGaussian::clamped(tape, mu, raw_lv)
}
