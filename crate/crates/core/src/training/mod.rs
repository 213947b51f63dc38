//! The training loop: student and teacher forward passes over both views,
//! the total loss, a gradient step on the student, then the EMA update.

mod config;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Serialize, Serializer};
use serde_json::{Map, Value};

pub use config::{DatasetSpec, KlOn, RunConfig};
pub use optim::{adam_step, sgd_momentum_step, Optimizer, OptimizerConfig, Schedule};

use crate::data::{augment_two_views, Augmenter, Dataset, ViewBatch};
use crate::diffcore::Tape;
use crate::distributions::{sample, DiagGaussian};
use crate::error::{Error, Result};
use crate::networks::{save_checkpoint, Mode, Side, TeacherStudent};
use crate::objectives::{alignment, vssl_total_loss, PairGrid, VsslInputs};
use crate::rng::Prng;
use config::{AUGMENT_STREAM, FLIP_STREAM, INIT_STREAM, ORDER_STREAM, SAMPLE_STREAM};

/// Metrics for one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub kl: PairGrid,
    pub ll: PairGrid,
    /// Mean cosine similarity of student and teacher means.
    pub align: f64,
    pub lr: f64,
    /// Wall time of the step in milliseconds.
    pub ms: f64,
}

impl StepRecord {
    /// Same record ignoring wall time.
    pub fn same_numbers(&self, other: &StepRecord) -> bool {
        let bits = |g: &PairGrid| g.map(|r| r.map(|x| x.map(f64::to_bits)));
        self.step == other.step
            && self.loss.to_bits() == other.loss.to_bits()
            && bits(&self.kl) == bits(&other.kl)
            && bits(&self.ll) == bits(&other.ll)
            && self.align.to_bits() == other.align.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), self.step.into());
        m.insert("loss".into(), self.loss.into());
        for (prefix, grid) in [("kl", &self.kl), ("ll", &self.ll)] {
            for (v1, row) in grid.iter().enumerate() {
                for (v2, x) in row.iter().enumerate() {
                    m.insert(format!("{prefix}_{}{}", v1 + 1, v2 + 1), (*x).into());
                }
            }
        }
        m.insert("align".into(), self.align.into());
        m.insert("lr".into(), self.lr.into());
        m.insert("ms".into(), self.ms.into());
        Value::Object(m)
    }

    pub fn all_finite(&self) -> bool {
        let grid_ok = |g: &PairGrid| g.iter().flatten().flatten().all(|x| x.is_finite());
        self.loss.is_finite()
            && self.align.is_finite()
            && self.lr.is_finite()
            && grid_ok(&self.kl)
            && grid_ok(&self.ll)
    }
}

impl Serialize for StepRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// Networks plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: TeacherStudent,
    pub optimizer: Optimizer,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = Prng::derive(cfg.seed, &[INIT_STREAM]);
        let model = TeacherStudent::new(cfg.arch(), cfg.tau, &mut rng)?;
        let optimizer = Optimizer::new(cfg.optimizer.clone(), &model.student);
        Ok(Self {
            model,
            optimizer,
            step: 0,
        })
    }
}

struct Forward {
    projected: [DiagGaussian; 2],
    predicted: [DiagGaussian; 2],
}

fn forward_side(
    model: &mut TeacherStudent,
    tape: &mut Tape,
    side: Side,
    views: [crate::diffcore::Var; 2],
) -> Result<Forward> {
    let mut projected = Vec::with_capacity(2);
    let mut predicted = Vec::with_capacity(2);
    for x in views {
        let f = model.encode(tape, side, x, Mode::Train)?;
        let g = model.project(tape, side, f, Mode::Train)?;
        let p = model.predict(tape, side, &g, Mode::Train)?;
        projected.push(g);
        predicted.push(p);
    }
    Ok(Forward {
        projected: [projected[0], projected[1]],
        predicted: [predicted[0], predicted[1]],
    })
}

/// One optimization step at learning rate `lr`.
pub fn train_step(
    state: &mut TrainState,
    vb: &ViewBatch,
    cfg: &RunConfig,
    lr: f64,
    rng: &mut Prng,
) -> Result<StepRecord> {
    let started = Instant::now();
    let model = &mut state.model;
    let mut tape = Tape::new();
    let views = [tape.constant(vb.x1.clone()), tape.constant(vb.x2.clone())];

    // Student posteriors, then teacher priors, for both views.
    let student = forward_side(model, &mut tape, Side::Student, views)?;
    let teacher = forward_side(model, &mut tape, Side::Teacher, views)?;
    let (q, p) = match cfg.kl_on {
        KlOn::Predicted => (student.predicted, teacher.predicted),
        KlOn::Projected => (student.projected, teacher.projected),
    };

    // One latent per view from the student posterior, then denoise it.
    let mut samples = Vec::with_capacity(2);
    let mut denoised = Vec::with_capacity(2);
    for post in &q {
        let s = sample(&mut tape, post, cfg.sampler, rng)?;
        denoised.push(model.denoise(&mut tape, s.z, Mode::Train)?);
        samples.push(s.z);
    }

    let inputs = VsslInputs {
        student: &q,
        teacher: &p,
        samples: &samples,
        denoised: &denoised,
    };
    let loss = vssl_total_loss(&mut tape, &inputs, &cfg.objective)?;
    let total = tape.value(loss.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let align = alignment(&mut tape, &q, &p, &cfg.objective)?;

    let grads = tape.backward(loss.total)?;
    model.student.zero_grad();
    model.student.accumulate(&tape, &grads);
    state.optimizer.step(&mut model.student, lr);
    model.ema_update();

    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        loss: total,
        kl: loss.kl,
        ll: loss.ll,
        align,
        lr,
        ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Shuffled mini-batches of training rows for one epoch; a trailing partial
/// batch is dropped.
pub fn epoch_batches(n_train: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_train).collect();
    Prng::derive(seed, &[ORDER_STREAM, epoch as u64]).shuffle(&mut order);
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Deterministic stream of view batches and per-step sampling noise.
pub struct Pipeline<'a> {
    data: &'a Dataset,
    augmenter: Augmenter,
    train: crate::diffcore::Tensor,
    cfg: &'a RunConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(data: &'a Dataset, cfg: &'a RunConfig) -> Result<Self> {
        let mut flip_rng = Prng::derive(cfg.seed, &[FLIP_STREAM]);
        let augmenter = Augmenter::new(cfg.augment.clone(), data.input_dim(), &mut flip_rng)?;
        if data.n_train() < cfg.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training samples",
                cfg.batch_size,
                data.n_train()
            )));
        }
        Ok(Self {
            data,
            augmenter,
            train: data.train_samples(),
            cfg,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.n_train() / self.cfg.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.batches_per_epoch() * self.cfg.epochs
    }

    /// View batch for a list of training rows and the RNG for that step's sampling.
    pub fn step_inputs(&self, batch: &[usize], global_step: usize) -> (ViewBatch, Prng) {
        let rows = self.train.gather_rows(batch);
        let mut aug_rng = Prng::derive(self.cfg.seed, &[AUGMENT_STREAM, global_step as u64]);
        let vb = augment_two_views(&rows, batch.to_vec(), &self.augmenter, &mut aug_rng);
        (vb, Prng::derive(self.cfg.seed, &[SAMPLE_STREAM, global_step as u64]))
    }
}

/// Where a finished run left its artifacts.
#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_align: Option<f64>,
    pub first_align: Option<f64>,
    pub checkpoint_dir: PathBuf,
    pub init_checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub data_dir: PathBuf,
    pub checksum: String,
}

/// Run all epochs, writing `metrics.jsonl`, the initial and final
/// checkpoints, the dataset and the resolved config under `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    train_with(cfg, out, |_| {})
}

/// [`train`] with a callback observing every step record.
pub fn train_with(
    cfg: &RunConfig,
    out: &Path,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = cfg.dataset.generate(cfg.seed)?;
    let data_dir = out.join("data");
    data.export(&data_dir)?;
    let cfg_path = out.join("config.json");
    fs::write(
        &cfg_path,
        serde_json::to_vec_pretty(cfg).expect("config serializes"),
    )
    .map_err(|e| Error::io(&cfg_path, e))?;

    let mut state = TrainState::new(cfg)?;
    let init_dir = out.join("init_checkpoint");
    save_checkpoint(&state.model, &init_dir)?;

    let pipeline = Pipeline::new(&data, cfg)?;
    let total_steps = pipeline.total_steps();
    let base_lr = cfg.optimizer.lr();

    let metrics_path = cfg.metrics_path(out);
    if let Some(parent) = metrics_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);

    let (mut first_align, mut last) = (None, None::<StepRecord>);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.n_train(), cfg.batch_size, cfg.seed, epoch) {
            let (vb, mut rng) = pipeline.step_inputs(&batch, state.step);
            let lr = cfg.schedule.lr_at(base_lr, state.step, total_steps);
            let rec = train_step(&mut state, &vb, cfg, lr, &mut rng);
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                    return Err(e);
                }
            };
            writeln!(metrics, "{}", rec.to_json())
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(&metrics_path, e))?;
            first_align.get_or_insert(rec.align);
            on_step(&rec);
            last = Some(rec);
        }
    }

    let checkpoint_dir = cfg.checkpoint_dir(out);
    let checksum = save_checkpoint(&state.model, &checkpoint_dir)?;
    Ok(TrainOutcome {
        steps: state.step,
        final_loss: last.as_ref().map(|r| r.loss),
        final_align: last.as_ref().map(|r| r.align),
        first_align,
        checkpoint_dir,
        init_checkpoint_dir: init_dir,
        metrics_path,
        data_dir,
        checksum,
    })
}

#[cfg(test)]
mod tests;
