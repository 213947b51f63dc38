use super::*;
use crate::objectives::ObjectiveMode;

fn small_cfg() -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Blobs {
            k: 2,
            input_dim: 6,
            n: 80,
            spread: 0.1,
            seed: None,
        },
        batch_size: 8,
        epochs: 1,
        latent_dim: 4,
        feat_dim: 5,
        encoder_hidden: 8,
        head_hidden: 8,
        seed: 3,
        ..Default::default()
    }
}

fn first_batch(cfg: &RunConfig, data: &Dataset) -> (ViewBatch, Prng) {
    let p = Pipeline::new(data, cfg).unwrap();
    let batch = epoch_batches(data.n_train(), cfg.batch_size, cfg.seed, 0).remove(0);
    p.step_inputs(&batch, 0)
}

#[test]
fn zero_lr_freezes_student_but_teacher_still_moves() {
    let mut cfg = small_cfg();
    cfg.tau = 0.5;
    let data = cfg.dataset.generate(cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    // Desynchronize teacher from student so EMA has something to do.
    for id in state.model.teacher.ids().collect::<Vec<_>>() {
        state.model.teacher.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 1.0);
    }
    let student_before = state.model.student.clone();
    let teacher_before = state.model.teacher.clone();
    let (vb, mut rng) = first_batch(&cfg, &data);
    train_step(&mut state, &vb, &cfg, 0.0, &mut rng).unwrap();
    for id in state.model.student.ids() {
        assert_eq!(state.model.student.value(id), student_before.value(id));
    }
    assert!(state
        .model
        .teacher
        .ids()
        .any(|id| state.model.teacher.value(id) != teacher_before.value(id)));
}

#[test]
fn tau_one_keeps_teacher_fixed() {
    let mut cfg = small_cfg();
    cfg.tau = 1.0;
    let data = cfg.dataset.generate(cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let teacher_before = state.model.teacher.clone();
    let pipeline = Pipeline::new(&data, &cfg).unwrap();
    for batch in epoch_batches(data.n_train(), cfg.batch_size, cfg.seed, 0) {
        let (vb, mut rng) = pipeline.step_inputs(&batch, state.step);
        train_step(&mut state, &vb, &cfg, 0.05, &mut rng).unwrap();
    }
    for id in state.model.teacher.ids() {
        assert_eq!(state.model.teacher.value(id), teacher_before.value(id));
    }
}

#[test]
fn teacher_update_follows_ema_of_post_step_student() {
    let mut cfg = small_cfg();
    cfg.tau = 0.7;
    let data = cfg.dataset.generate(cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let (vb, mut rng) = first_batch(&cfg, &data);
    let teacher_before = state.model.teacher.clone();
    train_step(&mut state, &vb, &cfg, 0.05, &mut rng).unwrap();
    for id in state.model.teacher.ids() {
        let expect = teacher_before
            .value(id)
            .zip_map(state.model.student.value(id), |t, s| 0.7 * t + (1.0 - 0.7) * s);
        assert_eq!(state.model.teacher.value(id), &expect);
    }
}

#[test]
fn teacher_never_accumulates_gradients() {
    let cfg = small_cfg();
    let data = cfg.dataset.generate(cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let (vb, mut rng) = first_batch(&cfg, &data);
    train_step(&mut state, &vb, &cfg, 0.05, &mut rng).unwrap();
    let t = &state.model.teacher;
    assert!(t.ids().all(|id| t.grad(id).data().iter().all(|&g| g == 0.0)));
    let s = &state.model.student;
    assert!(s.ids().any(|id| s.grad(id).data().iter().any(|&g| g != 0.0)));
}

#[test]
fn identical_seeds_give_identical_records() {
    let cfg = small_cfg();
    let run = || {
        let data = cfg.dataset.generate(cfg.seed).unwrap();
        let pipeline = Pipeline::new(&data, &cfg).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        let mut out = Vec::new();
        for epoch in 0..2 {
            for batch in epoch_batches(data.n_train(), cfg.batch_size, cfg.seed, epoch) {
                let (vb, mut rng) = pipeline.step_inputs(&batch, state.step);
                out.push(train_step(&mut state, &vb, &cfg, 0.05, &mut rng).unwrap());
            }
        }
        out
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 16);
    assert!(a.iter().zip(&b).all(|(x, y)| x.same_numbers(y)));
}

#[test]
fn gaussian_mode_and_projected_kl_run() {
    let mut cfg = small_cfg();
    cfg.objective.mode = ObjectiveMode::Gaussian;
    cfg.kl_on = KlOn::Projected;
    cfg.sampler = crate::distributions::Sampler::Standard;
    cfg.optimizer = OptimizerConfig::Adam {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let data = cfg.dataset.generate(cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let (vb, mut rng) = first_batch(&cfg, &data);
    let rec = train_step(&mut state, &vb, &cfg, 1e-3, &mut rng).unwrap();
    assert!(rec.all_finite());
    assert!(rec.kl[0][0].unwrap() >= 0.0);
}

#[test]
fn record_json_has_pair_keys() {
    let rec = StepRecord {
        step: 1,
        loss: 0.5,
        kl: [[Some(1.0), Some(2.0)], [Some(3.0), Some(4.0)]],
        ll: [[None, Some(0.2)], [Some(0.3), None]],
        align: 0.9,
        lr: 0.05,
        ms: 1.0,
    };
    let v = rec.to_json();
    assert_eq!(v["kl_21"], 3.0);
    assert_eq!(v["ll_12"], 0.2);
    assert!(v["ll_11"].is_null());
    for key in ["step", "loss", "align", "lr", "ms", "kl_11", "ll_22"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 0,
        ..small_cfg()
    };
    let out = train(&cfg, dir.path()).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(fs::read_to_string(&out.metrics_path).unwrap(), "");
    let a = fs::read(out.checkpoint_dir.join("weights.bin")).unwrap();
    let b = fs::read(out.init_checkpoint_dir.join("weights.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_epoch_ten_batches_ten_lines() {
    let dir = tempfile::tempdir().unwrap();
    // 100 samples → 80 train → 10 batches of 8.
    let cfg = RunConfig {
        dataset: DatasetSpec::Blobs {
            k: 2,
            input_dim: 6,
            n: 100,
            spread: 0.1,
            seed: None,
        },
        ..small_cfg()
    };
    let out = train(&cfg, dir.path()).unwrap();
    let text = fs::read_to_string(&out.metrics_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for l in lines {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn batch_larger_than_split_rejected() {
    let cfg = RunConfig {
        batch_size: 200,
        ..small_cfg()
    };
    let data = cfg.dataset.generate(cfg.seed).unwrap();
    assert!(matches!(Pipeline::new(&data, &cfg), Err(Error::Config(_))));
}
