//! Frozen-feature probes: multinomial logistic regression and cosine k-NN.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::networks::{Mode, Side, TeacherStudent};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    #[default]
    Backbone,
    ProjectedMu,
}

/// Deterministic eval-mode features for every row of `samples`.
pub fn extract_features(
    ts: &mut TeacherStudent,
    samples: &Tensor,
    side: Side,
    layer: FeatureLayer,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(samples.clone());
    let f = ts.encode(&mut tape, side, x, Mode::Eval)?;
    let out = match layer {
        FeatureLayer::Backbone => f,
        FeatureLayer::ProjectedMu => ts.project(&mut tape, side, f, Mode::Eval)?.mu,
    };
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: ProbeKind,
    pub accuracy: f64,
    /// Accuracy on each class's test rows; `None` for classes absent from test.
    pub per_class: Vec<Option<f64>>,
    pub n_test: usize,
}

fn tally(probe: ProbeKind, predicted: &[usize], truth: &[usize], n_classes: usize) -> ProbeResult {
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    ProbeResult {
        probe,
        accuracy: correct as f64 / truth.len() as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        n_test: truth.len(),
    }
}

fn check_inputs(
    op: &'static str,
    ftr: &Tensor,
    ytr: &[usize],
    fte: &Tensor,
    yte: &[usize],
) -> Result<usize> {
    if ftr.shape().len() != 2 || fte.shape().len() != 2 || ftr.cols() != fte.cols() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: ftr.shape().to_vec(),
            rhs: fte.shape().to_vec(),
        });
    }
    if ftr.rows() != ytr.len() || fte.rows() != yte.len() || yte.is_empty() {
        return Err(Error::Dataset(format!(
            "{op}: {} train rows with {} labels, {} test rows with {} labels",
            ftr.rows(),
            ytr.len(),
            fte.rows(),
            yte.len()
        )));
    }
    Ok(ytr.iter().chain(yte).max().map_or(0, |m| m + 1))
}

pub const DEFAULT_PROBE_EPOCHS: usize = 200;
pub const DEFAULT_PROBE_LR: f64 = 0.1;

/// Multinomial logistic regression trained by full-batch gradient descent
/// from zero weights on features standardized with training statistics.
pub fn linear_probe(
    ftr: &Tensor,
    ytr: &[usize],
    fte: &Tensor,
    yte: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<ProbeResult> {
    let k = check_inputs("linear_probe", ftr, ytr, fte, yte)?;
    if ytr.iter().all(|&y| y == ytr[0]) {
        return Err(Error::Dataset(
            "linear_probe: training labels contain a single class".into(),
        ));
    }
    let (n, d) = (ftr.rows(), ftr.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(ftr.row(r)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sd = vec![0.0; d];
    for r in 0..n {
        sd.iter_mut()
            .zip(ftr.row(r))
            .zip(&mean)
            .for_each(|((s, x), m)| *s += (x - m).powi(2));
    }
    // Constant columns carry no information; zero them out.
    let inv_sd: Vec<f64> = sd
        .iter()
        .map(|s| {
            let s = (s / n as f64).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let standardize = |t: &Tensor| -> Vec<f64> {
        (0..t.rows())
            .flat_map(|r| {
                t.row(r)
                    .iter()
                    .zip(&mean)
                    .zip(&inv_sd)
                    .map(|((x, m), s)| (x - m) * s)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let xtr = standardize(ftr);
    let xte = standardize(fte);

    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    for _ in 0..epochs {
        gw.fill(0.0);
        gb.fill(0.0);
        for r in 0..n {
            let x = &xtr[r * d..(r + 1) * d];
            softmax_logits(x, &w, &b, k, &mut logits);
            logits[ytr[r]] -= 1.0;
            for (j, &xj) in x.iter().enumerate() {
                for c in 0..k {
                    gw[j * k + c] += xj * logits[c];
                }
            }
            gb.iter_mut().zip(&logits).for_each(|(g, p)| *g += p);
        }
        let step = lr / n as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
    }

    let predicted: Vec<usize> = (0..fte.rows())
        .map(|r| {
            softmax_logits(&xte[r * d..(r + 1) * d], &w, &b, k, &mut logits);
            argmax(&logits)
        })
        .collect();
    Ok(tally(ProbeKind::Linear, &predicted, yte, k))
}

/// Class probabilities for one row, written into `out`.
fn softmax_logits(x: &[f64], w: &[f64], b: &[f64], k: usize, out: &mut [f64]) {
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        for c in 0..k {
            out[c] += xj * w[j * k + c];
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Majority vote among the `k` training rows with highest cosine similarity.
/// Vote ties go to the tied label whose member ranks nearest.
pub fn knn_probe(
    ftr: &Tensor,
    ytr: &[usize],
    fte: &Tensor,
    yte: &[usize],
    k: usize,
) -> Result<ProbeResult> {
    let n_classes = check_inputs("knn_probe", ftr, ytr, fte, yte)?;
    if k == 0 || k.is_multiple_of(2) || k > ytr.len() {
        return Err(Error::Config(format!(
            "knn_probe: k must be odd and between 1 and {}, got {k}",
            ytr.len()
        )));
    }
    let train = normalized_rows(ftr);
    let test = normalized_rows(fte);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let predicted: Vec<usize> = test
        .iter()
        .map(|q| {
            let sims: Vec<f64> = train
                .iter()
                .map(|t| t.iter().zip(q).map(|(a, b)| a * b).sum())
                .collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            let mut votes = vec![0usize; n_classes];
            let mut first_rank = vec![usize::MAX; n_classes];
            for (rank, &i) in order[..k].iter().enumerate() {
                votes[ytr[i]] += 1;
                first_rank[ytr[i]] = first_rank[ytr[i]].min(rank);
            }
            let top = *votes.iter().max().expect("k ≥ 1");
            (0..n_classes)
                .filter(|&c| votes[c] == top)
                .min_by_key(|&c| first_rank[c])
                .expect("some label has the top vote")
        })
        .collect();
    Ok(tally(ProbeKind::Knn, &predicted, yte, n_classes))
}
