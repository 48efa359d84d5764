//! Evaluation: sequence accuracy per split/domain/variant with dual-path
//! branch bookkeeping, a linear domain probe over frozen semantic
//! features, and attention-map export for single-image inspection.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{Dataset, Domain, GlyphSample, Split};
use crate::decoder::{ConfidenceRule, DecodeTrace, Variant};
use crate::model::{Branch, Model};
use crate::seeding;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("evaluation needs at least one sample")]
    Empty,
}

/// Images from a slice of samples stacked into one (B, 1, H, W) batch.
pub fn stack_images(samples: &[&GlyphSample]) -> Result<Tensor, TensorError> {
    let first = samples.first().ok_or(TensorError::Invalid {
        op: "stack_images",
        msg: "empty batch".into(),
    })?;
    let (h, w) = (first.image.shape[1], first.image.shape[2]);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape != [1, h, w] {
            return Err(TensorError::Invalid {
                op: "stack_images",
                msg: "mixed image shapes in one batch".into(),
            });
        }
        data.extend_from_slice(&s.image.data);
    }
    Tensor::new(vec![samples.len(), 1, h, w], data)
}

// ── accuracy ────────────────────────────────────────────────────────

/// Accuracy and branch statistics for one (variant, split, domain) cell.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub variant: Variant,
    pub split: Split,
    pub domain: Domain,
    pub count: usize,
    pub correct: usize,
    pub mean_confidence: f64,
    pub branch_bilstm: usize,
    pub branch_generator: usize,
}

impl EvalRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,split,domain,count,correct,accuracy,mean_confidence,branch_bilstm,branch_generator\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.split,
                r.domain,
                r.count,
                r.correct,
                r.accuracy(),
                r.mean_confidence,
                r.branch_bilstm,
                r.branch_generator
            ));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::from(
            "variant   split  domain   count  correct  accuracy  confidence  bilstm/generator\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9} {:<6} {:<8} {:>5} {:>8}  {:>8.4}  {:>10.4}  {:>6}/{}\n",
                r.variant.to_string(),
                r.split.to_string(),
                r.domain.to_string(),
                r.count,
                r.correct,
                r.accuracy(),
                r.mean_confidence,
                r.branch_bilstm,
                r.branch_generator
            ));
        }
        out
    }
}

/// Dual-path statistics over one sample slice.
pub fn eval_slice(
    model: &Model,
    samples: &[GlyphSample],
    variant: Variant,
    rule: ConfidenceRule,
    chunk: usize,
) -> Result<(usize, f64, usize, usize), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut correct = 0;
    let mut conf_sum = 0.0;
    let mut n_bilstm = 0;
    let mut n_gen = 0;
    for block in samples.chunks(chunk.max(1)) {
        let refs: Vec<&GlyphSample> = block.iter().collect();
        let images = stack_images(&refs)?;
        for (outcome, sample) in model.infer(&images, variant, rule)?.iter().zip(block) {
            if outcome.text == sample.label {
                correct += 1;
            }
            conf_sum += outcome.confidence;
            match outcome.branch {
                Branch::BiLstm => n_bilstm += 1,
                Branch::Generator => n_gen += 1,
            }
        }
    }
    Ok((correct, conf_sum / samples.len() as f64, n_bilstm, n_gen))
}

/// Exact-match fraction over a slice, dual-path inference.
pub fn sequence_accuracy(
    model: &Model,
    samples: &[GlyphSample],
    variant: Variant,
    rule: ConfidenceRule,
    chunk: usize,
) -> Result<f64, EvalError> {
    let (correct, _, _, _) = eval_slice(model, samples, variant, rule, chunk)?;
    Ok(correct as f64 / samples.len() as f64)
}

/// One row per (variant, split, domain), in the given order.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    variants: &[Variant],
    splits: &[Split],
    rule: ConfidenceRule,
    chunk: usize,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &split in splits {
            for domain in Domain::ALL {
                let samples = ds.get(split, domain);
                let (correct, mean_confidence, branch_bilstm, branch_generator) =
                    eval_slice(model, samples, variant, rule, chunk)?;
                rows.push(EvalRow {
                    variant,
                    split,
                    domain,
                    count: samples.len(),
                    correct,
                    mean_confidence,
                    branch_bilstm,
                    branch_generator,
                });
            }
        }
    }
    Ok(EvalReport { rows })
}

// ── semantic feature export ─────────────────────────────────────────

/// Per-sample semantic feature sequences, shape (W/8, 256) each. The
/// support branch runs the recurrent path, the target branch the
/// generator, mirroring how training routes the two domains.
pub fn semantic_features(
    model: &Model,
    samples: &[GlyphSample],
    branch: Branch,
    chunk: usize,
) -> Result<Vec<Tensor>, EvalError> {
    let mut out = Vec::with_capacity(samples.len());
    for block in samples.chunks(chunk.max(1)) {
        let refs: Vec<&GlyphSample> = block.iter().collect();
        let images = stack_images(&refs)?;
        let mut tape = Tape::new(&model.store);
        let pooled = model.features(&mut tape, &images)?;
        let sem = match branch {
            Branch::BiLstm => model.semantics_bilstm(&mut tape, pooled)?,
            Branch::Generator => model.semantics_generated(&mut tape, pooled)?,
        };
        let shape = tape.shape(sem).to_vec();
        let (n, c) = (shape[1], shape[2]);
        let data = tape.data(sem);
        for b in 0..block.len() {
            let row = &data[b * n * c..(b + 1) * n * c];
            out.push(Tensor::new(vec![n, c], row.to_vec())?);
        }
    }
    Ok(out)
}

// ── domain probe ────────────────────────────────────────────────────

/// Held-out accuracy of a logistic probe separating the two domains
/// from mean-pooled semantic features. High accuracy means the domains
/// are still far apart; alignment drives it toward chance.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub train_n: usize,
    pub test_n: usize,
    pub accuracy: f64,
}

const STREAM_PROBE: u64 = 4;
const PROBE_EPOCHS: usize = 300;
const PROBE_LR: f64 = 0.5;

/// Support samples flow through the recurrent branch, target samples
/// through the generator; features are frozen (no gradients flow back).
pub fn domain_probe(
    model: &Model,
    support: &[GlyphSample],
    target: &[GlyphSample],
    seed: u64,
    chunk: usize,
) -> Result<ProbeReport, EvalError> {
    if support.is_empty() || target.is_empty() {
        return Err(EvalError::Empty);
    }
    let feats_s = semantic_features(model, support, Branch::BiLstm, chunk)?;
    let feats_t = semantic_features(model, target, Branch::Generator, chunk)?;

    let pool = |t: &Tensor| -> Vec<f64> {
        let (n, c) = (t.shape[0], t.shape[1]);
        let mut v = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                v[j] += t.data[i * c + j];
            }
        }
        v.iter_mut().for_each(|x| *x /= n as f64);
        v
    };
    let xs: Vec<Vec<f64>> = feats_s.iter().chain(&feats_t).map(pool).collect();
    let ys: Vec<f64> = (0..support.len())
        .map(|_| 0.0)
        .chain((0..target.len()).map(|_| 1.0))
        .collect();

    // 70/30 split, shuffled per class so both stay balanced.
    let mut rng = seeding::sub_rng(&[seed, STREAM_PROBE]);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (offset, len) in [(0, support.len()), (support.len(), target.len())] {
        let mut idx: Vec<usize> = (offset..offset + len).collect();
        idx.shuffle(&mut rng);
        let cut = (len * 7) / 10;
        train_idx.extend_from_slice(&idx[..cut]);
        test_idx.extend_from_slice(&idx[cut..]);
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(EvalError::Empty);
    }

    // Standardize on training statistics.
    let dim = xs[0].len();
    let mut mean = vec![0.0; dim];
    for &i in &train_idx {
        for j in 0..dim {
            mean[j] += xs[i][j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    let mut var = vec![0.0; dim];
    for &i in &train_idx {
        for j in 0..dim {
            let d = xs[i][j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / train_idx.len() as f64).sqrt().max(1e-8))
        .collect();
    let norm = |x: &[f64]| -> Vec<f64> {
        (0..dim).map(|j| (x[j] - mean[j]) / std[j]).collect()
    };

    // Full-batch logistic regression by gradient descent.
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let inv_n = 1.0 / train_idx.len() as f64;
    for _ in 0..PROBE_EPOCHS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for &i in &train_idx {
            let x = norm(&xs[i]);
            let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - ys[i];
            for j in 0..dim {
                gw[j] += err * x[j];
            }
            gb += err;
        }
        for j in 0..dim {
            w[j] -= PROBE_LR * inv_n * gw[j];
        }
        b -= PROBE_LR * inv_n * gb;
    }

    let mut correct = 0;
    for &i in &test_idx {
        let x = norm(&xs[i]);
        let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
        let pred = if z > 0.0 { 1.0 } else { 0.0 };
        if pred == ys[i] {
            correct += 1;
        }
    }
    Ok(ProbeReport {
        train_n: train_idx.len(),
        test_n: test_idx.len(),
        accuracy: correct as f64 / test_idx.len() as f64,
    })
}

// ── attention export ────────────────────────────────────────────────

/// One CSV over all steps: step, feature position, visual weight,
/// semantic weight (empty for the Single variant), mean gate value.
pub fn attention_csv(trace: &DecodeTrace) -> String {
    let mut out = String::from("step,position,alpha_v,alpha_s,lambda_mean\n");
    for (t, step) in trace.steps.iter().enumerate() {
        let lam = lambda_mean(step);
        for (i, &av) in step.alpha_v.iter().enumerate() {
            let a_s = match &step.alpha_s {
                Some(a) => a[i].to_string(),
                None => String::new(),
            };
            out.push_str(&format!("{t},{i},{av},{a_s},{lam}\n"));
        }
    }
    out
}

/// Mean of the balance gate for display purposes. Variants without a
/// gate report the constant their glimpse mix implies: 1 when only the
/// visual glimpse feeds the decoder, 0.5 for symmetric mixes.
fn lambda_mean(step: &crate::decoder::StepTrace) -> f64 {
    match (&step.lambda, &step.alpha_s) {
        (Some(l), _) => l.iter().sum::<f64>() / l.len() as f64,
        (None, Some(_)) => 0.5,
        (None, None) => 1.0,
    }
}

/// Per-step attention heatmaps: the displayed weight per position is
/// lambda_mean * alpha_v + (1 - lambda_mean) * alpha_s, normalized by
/// its maximum and drawn as a (16, 8n) block image.
pub fn attention_heatmaps(trace: &DecodeTrace) -> Vec<Tensor> {
    const CELL_W: usize = 8;
    const CELL_H: usize = 16;
    trace
        .steps
        .iter()
        .map(|step| {
            let lam = lambda_mean(step);
            let display: Vec<f64> = step
                .alpha_v
                .iter()
                .enumerate()
                .map(|(i, &av)| {
                    let a_s = step.alpha_s.as_ref().map_or(0.0, |a| a[i]);
                    lam * av + (1.0 - lam) * a_s
                })
                .collect();
            let peak = display.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
            let n = display.len();
            let mut img = vec![0.0; CELL_H * n * CELL_W];
            for (i, &v) in display.iter().enumerate() {
                let value = v / peak;
                for y in 0..CELL_H {
                    for x in 0..CELL_W {
                        img[y * n * CELL_W + i * CELL_W + x] = value;
                    }
                }
            }
            Tensor::new(vec![CELL_H, n * CELL_W], img).expect("heatmap dims")
        })
        .collect()
}

// ── tests ───────────────────────────────────────────────────────────
