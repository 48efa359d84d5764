//! Two-stage training harness. Stage 1 trains the recognizer alone on
//! both domains; stage 2 turns the adversarial objective on and
//! alternates one discriminator update with one recognizer update per
//! batch, the discriminator seeing detached semantic features. The whole
//! loop is a pure function of (config, dataset), bitwise reproducible,
//! and resumable from epoch-boundary checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError};
use crate::data::{DataError, Dataset, Domain, GlyphSample, Manifest, Split};
use crate::decoder::{encode_label, ConfidenceRule, Variant};
use crate::eval::{self, EvalError};
use crate::gan::{hinge_d, hinge_g};
use crate::kv::{Kv, KvError};
use crate::model::{Model, ModelDims, ModelError};
use crate::nn::{clip_global_norm, AdaDelta};
use crate::seeding::{self, fnv1a64};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};

// ── errors ──────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: {term} is not finite at stage {stage} step {step}")]
    NonFinite {
        term: &'static str,
        stage: usize,
        step: usize,
    },
    #[error("checkpoint was written by a different config (hash {found:016x}, expected {expected:016x})")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("config does not match the dataset: {0}")]
    DatasetMismatch(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── config ──────────────────────────────────────────────────────────

/// Everything the training loop depends on. Serialized as flat
/// key = value text; the canonical text is what checkpoint compatibility
/// hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub confidence_rule: ConfidenceRule,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Adversarial weight per stage; the schedule the paper-style
    /// two-stage recipe uses is exactly {0, 1}.
    pub beta_pretrain: f64,
    pub beta_finetune: f64,
    pub batch_size: usize,
    /// Tape-sized slice of a batch; gradients accumulate across slices
    /// so the update equals the full-batch one.
    pub micro_batch: usize,
    /// Weight of the discriminator objective.
    pub lambda_gan: f64,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Measure val accuracy every this many steps; 0 disables.
    pub val_every: usize,
    /// Stop after this many epochs counted across both stages; 0 runs
    /// to completion. Used to cut a run for resume testing.
    pub stop_after_epochs: usize,
    pub rnn_hidden: usize,
    pub disc_mid: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub height: usize,
    pub width: usize,
    pub charset: Vec<char>,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            variant: Variant::Balance,
            confidence_rule: ConfidenceRule::MeanMax,
            pretrain_epochs: 3,
            finetune_epochs: 5,
            beta_pretrain: 0.0,
            beta_finetune: 1.0,
            batch_size: 32,
            micro_batch: 8,
            lambda_gan: 1.0,
            rho: 0.95,
            eps: 1e-6,
            clip_norm: 5.0,
            val_every: 63,
            stop_after_epochs: 0,
            rnn_hidden: 256,
            disc_mid: 128,
            dec_hidden: 256,
            attn_dim: 256,
            height: 32,
            width: 128,
            charset: crate::data::DESK_CHARSET.chars().collect(),
        }
    }

    /// Desk defaults with geometry and charset taken from a manifest.
    pub fn for_manifest(seed: u64, m: &Manifest) -> Self {
        TrainConfig {
            height: m.height,
            width: m.width,
            charset: m.charset.clone(),
            ..TrainConfig::desk(seed)
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            in_channels: 1,
            rnn_hidden: self.rnn_hidden,
            disc_mid: self.disc_mid,
            dec_hidden: self.dec_hidden,
            attn_dim: self.attn_dim,
        }
    }

    pub fn beta(&self, stage: usize) -> f64 {
        if stage == 1 {
            self.beta_pretrain
        } else {
            self.beta_finetune
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Invalid(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.micro_batch == 0 || self.micro_batch > self.batch_size {
            return bad(format!(
                "micro_batch {} must be in 1..=batch_size ({})",
                self.micro_batch, self.batch_size
            ));
        }
        for (name, v) in [
            ("beta_pretrain", self.beta_pretrain),
            ("beta_finetune", self.beta_finetune),
        ] {
            if v != 0.0 && v != 1.0 {
                return bad(format!("{name} {v} must be exactly 0 or 1"));
            }
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho {} outside (0, 1)", self.rho));
        }
        if self.eps <= 0.0 || self.lambda_gan < 0.0 || self.clip_norm <= 0.0 {
            return bad("eps and clip_norm must be positive, lambda_gan nonnegative".into());
        }
        if [self.rnn_hidden, self.disc_mid, self.dec_hidden, self.attn_dim]
            .iter()
            .any(|&d| d == 0)
        {
            return bad("model widths must be nonzero".into());
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height < 16 || self.width < 16 {
            return bad(format!(
                "image dims {}x{} must be multiples of 8 and at least 16",
                self.height, self.width
            ));
        }
        if self.charset.is_empty() {
            return bad("charset is empty".into());
        }
        Ok(())
    }

    pub fn check_dataset(&self, m: &Manifest) -> Result<(), TrainError> {
        if (m.height, m.width) != (self.height, self.width) {
            return Err(TrainError::DatasetMismatch(format!(
                "dataset images are {}x{}, config expects {}x{}",
                m.height, m.width, self.height, self.width
            )));
        }
        if m.charset != self.charset {
            return Err(TrainError::DatasetMismatch(format!(
                "dataset charset {:?} differs from config charset {:?}",
                m.charset.iter().collect::<String>(),
                self.charset.iter().collect::<String>()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut kv = Kv::new();
        kv.set_display("seed", self.seed).unwrap();
        kv.set_display("variant", self.variant).unwrap();
        kv.set_display("confidence_rule", self.confidence_rule).unwrap();
        kv.set_display("pretrain_epochs", self.pretrain_epochs).unwrap();
        kv.set_display("finetune_epochs", self.finetune_epochs).unwrap();
        kv.set_display("beta_pretrain", self.beta_pretrain).unwrap();
        kv.set_display("beta_finetune", self.beta_finetune).unwrap();
        kv.set_display("batch_size", self.batch_size).unwrap();
        kv.set_display("micro_batch", self.micro_batch).unwrap();
        kv.set_display("lambda_gan", self.lambda_gan).unwrap();
        kv.set_display("rho", self.rho).unwrap();
        kv.set_display("eps", self.eps).unwrap();
        kv.set_display("clip_norm", self.clip_norm).unwrap();
        kv.set_display("val_every", self.val_every).unwrap();
        kv.set_display("stop_after_epochs", self.stop_after_epochs).unwrap();
        kv.set_display("rnn_hidden", self.rnn_hidden).unwrap();
        kv.set_display("disc_mid", self.disc_mid).unwrap();
        kv.set_display("dec_hidden", self.dec_hidden).unwrap();
        kv.set_display("attn_dim", self.attn_dim).unwrap();
        kv.set_display("height", self.height).unwrap();
        kv.set_display("width", self.width).unwrap();
        kv.set("charset", &self.charset.iter().collect::<String>())
            .unwrap();
        kv.to_text()
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut kv = Kv::parse(text)?;
        let defaults = TrainConfig::desk(0);
        let cfg = TrainConfig {
            seed: kv.parse_req("seed", "u64")?,
            variant: kv.parse_or("variant", defaults.variant, "variant")?,
            confidence_rule: kv.parse_or(
                "confidence_rule",
                defaults.confidence_rule,
                "confidence rule",
            )?,
            pretrain_epochs: kv.parse_or("pretrain_epochs", defaults.pretrain_epochs, "usize")?,
            finetune_epochs: kv.parse_or("finetune_epochs", defaults.finetune_epochs, "usize")?,
            beta_pretrain: kv.parse_or("beta_pretrain", defaults.beta_pretrain, "f64")?,
            beta_finetune: kv.parse_or("beta_finetune", defaults.beta_finetune, "f64")?,
            batch_size: kv.parse_or("batch_size", defaults.batch_size, "usize")?,
            micro_batch: kv.parse_or("micro_batch", defaults.micro_batch, "usize")?,
            lambda_gan: kv.parse_or("lambda_gan", defaults.lambda_gan, "f64")?,
            rho: kv.parse_or("rho", defaults.rho, "f64")?,
            eps: kv.parse_or("eps", defaults.eps, "f64")?,
            clip_norm: kv.parse_or("clip_norm", defaults.clip_norm, "f64")?,
            val_every: kv.parse_or("val_every", defaults.val_every, "usize")?,
            stop_after_epochs: kv.parse_or(
                "stop_after_epochs",
                defaults.stop_after_epochs,
                "usize",
            )?,
            rnn_hidden: kv.parse_or("rnn_hidden", defaults.rnn_hidden, "usize")?,
            disc_mid: kv.parse_or("disc_mid", defaults.disc_mid, "usize")?,
            dec_hidden: kv.parse_or("dec_hidden", defaults.dec_hidden, "usize")?,
            attn_dim: kv.parse_or("attn_dim", defaults.attn_dim, "usize")?,
            height: kv.parse_or("height", defaults.height, "usize")?,
            width: kv.parse_or("width", defaults.width, "usize")?,
            charset: kv
                .get("charset")
                .map(|s| s.chars().collect())
                .unwrap_or(defaults.charset),
        };
        kv.reject_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text of everything that shapes the training
    /// trajectory. stop_after_epochs only cuts a run short, so it is
    /// excluded here; that lets a cut run resume under the uncut
    /// schedule.
    pub fn trajectory_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("stop_after_epochs"))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.trajectory_text().as_bytes())
    }
}

// ── loss composition ────────────────────────────────────────────────

/// Splits the combined objective for alternating updates: the
/// recognizer/generator side minimizes L_R + beta * L_g, the
/// discriminator side beta * lambda_gan * L_d.
pub fn total_loss(l_r: f64, l_g: f64, l_d: f64, beta: f64, lambda_gan: f64) -> (f64, f64) {
    (l_r + beta * l_g, beta * lambda_gan * l_d)
}

/// Teacher-forced cross entropy from explicit per-step class
/// probabilities: mean over each sample's steps, then over samples,
/// summed across the two recognition branches.
pub fn recognition_loss_value(
    support: &[(Vec<Vec<f64>>, Vec<usize>)],
    target: &[(Vec<Vec<f64>>, Vec<usize>)],
) -> f64 {
    let branch = |samples: &[(Vec<Vec<f64>>, Vec<usize>)]| -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for (probs, targets) in samples {
            assert_eq!(
                probs.len(),
                targets.len(),
                "one probability row per target step"
            );
            let per_step: f64 = probs
                .iter()
                .zip(targets)
                .map(|(row, &t)| -row[t].ln())
                .sum();
            total += per_step / targets.len() as f64;
        }
        total / samples.len() as f64
    };
    branch(support) + branch(target)
}

// ── checkpoints ─────────────────────────────────────────────────────

const CHECKPOINT_VERSION: u64 = 1;

/// Loop position stored beside the parameters. Checkpoints are cut at
/// epoch boundaries only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    pub stage: usize,
    pub epochs_done: usize,
    pub global_step: usize,
}

fn save_checkpoint(
    dir: &Path,
    cfg: &TrainConfig,
    model: &Model,
    opt: &AdaDelta,
    state: TrainState,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut ar = model.param_archive();
    for (id, p) in model.store.iter() {
        ar.push(
            &format!("opt.eg2.{}", p.name),
            Tensor::new(p.shape.clone(), opt.eg2(id).to_vec()).unwrap(),
        )?;
        ar.push(
            &format!("opt.edx2.{}", p.name),
            Tensor::new(p.shape.clone(), opt.edx2(id).to_vec()).unwrap(),
        )?;
    }
    ar.save(&dir.join("params.bin"))?;

    let mut kv = Kv::new();
    kv.set_display("version", CHECKPOINT_VERSION).unwrap();
    kv.set_display("stage", state.stage).unwrap();
    kv.set_display("epochs_done", state.epochs_done).unwrap();
    kv.set_display("global_step", state.global_step).unwrap();
    kv.set_display("config_hash", format!("{:016x}", cfg.hash())).unwrap();
    for (k, v) in Kv::parse(&cfg.to_text()).expect("own config text").pairs() {
        kv.set(&format!("config.{k}"), v).unwrap();
    }
    fs::write(dir.join("state.txt"), kv.to_text())?;
    Ok(())
}

/// Reads a checkpoint directory back into (config, model, optimizer,
/// position). When `expected` is given, its canonical text must match
/// the embedded config exactly.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&TrainConfig>,
) -> Result<(TrainConfig, Model, AdaDelta, TrainState), TrainError> {
    let text = fs::read_to_string(dir.join("state.txt"))?;
    let mut kv = Kv::parse(&text)?;
    let version: u64 = kv.parse_req("version", "u64")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::BadCheckpoint(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let state = TrainState {
        stage: kv.parse_req("stage", "usize")?,
        epochs_done: kv.parse_req("epochs_done", "usize")?,
        global_step: kv.parse_req("global_step", "usize")?,
    };
    let _recorded_hash = kv.require("config_hash")?;
    let mut cfg_text = String::new();
    for (k, v) in kv.pairs() {
        if let Some(stripped) = k.strip_prefix("config.") {
            cfg_text.push_str(&format!("{stripped} = {v}\n"));
        }
    }
    let cfg = TrainConfig::parse(&cfg_text)?;
    if !(state.stage == 1 || state.stage == 2) {
        return Err(TrainError::BadCheckpoint(format!("stage {}", state.stage)));
    }
    if let Some(exp) = expected {
        if exp.trajectory_text() != cfg.trajectory_text() {
            return Err(TrainError::ConfigMismatch {
                expected: exp.hash(),
                found: cfg.hash(),
            });
        }
    }

    let ar = Archive::load(&dir.join("params.bin"))?;
    let mut model = Model::new(cfg.model_dims(), cfg.seed);
    model.load_param_archive(&ar)?;
    let mut opt = AdaDelta::with_hyper(&model.store, cfg.rho, cfg.eps);
    for (id, p) in model.store.iter() {
        let eg2 = ar.require(&format!("opt.eg2.{}", p.name))?;
        let edx2 = ar.require(&format!("opt.edx2.{}", p.name))?;
        if eg2.shape != p.shape || edx2.shape != p.shape {
            return Err(TrainError::BadCheckpoint(format!(
                "optimizer state shape mismatch for {}",
                p.name
            )));
        }
        opt.set_state(id, eg2.data.clone(), edx2.data.clone());
    }
    Ok((cfg, model, opt, state))
}

// ── trainer ─────────────────────────────────────────────────────────

const STREAM_ORDER: u64 = 5;

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    ds: &'d Dataset,
    pub model: Model,
    opt: AdaDelta,
    pub state: TrainState,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, ds: &'d Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.check_dataset(&ds.manifest)?;
        let model = Model::new(cfg.model_dims(), cfg.seed);
        let opt = AdaDelta::with_hyper(&model.store, cfg.rho, cfg.eps);
        Ok(Trainer {
            cfg: cfg.clone(),
            ds,
            model,
            opt,
            state: TrainState {
                stage: 1,
                epochs_done: 0,
                global_step: 0,
            },
        })
    }

    pub fn resume(cfg: &TrainConfig, ds: &'d Dataset, dir: &Path) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.check_dataset(&ds.manifest)?;
        // The checkpoint's embedded config must match on every
        // trajectory key; the caller's copy wins on run-cut controls.
        let (_, model, opt, state) = load_checkpoint(dir, Some(cfg))?;
        Ok(Trainer {
            cfg: cfg.clone(),
            ds,
            model,
            opt,
            state,
        })
    }

    /// Starts a run from `dir`'s weights and optimizer state while
    /// adopting `cfg` wholesale. Unlike `resume`, the configs may
    /// disagree on anything except model dimensions; the schedule
    /// position carries over under the new config, so forking a
    /// finished pretrain checkpoint lands at the start of stage 2.
    /// This is how ablation variants share one pretrained trunk.
    pub fn fork(cfg: &TrainConfig, ds: &'d Dataset, dir: &Path) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.check_dataset(&ds.manifest)?;
        let (src, model, opt, state) = load_checkpoint(dir, None)?;
        if src.model_dims() != cfg.model_dims() {
            return Err(TrainError::Invalid(format!(
                "cannot fork: checkpoint dims {:?} vs config dims {:?}",
                src.model_dims(),
                cfg.model_dims()
            )));
        }
        let mut t = Trainer {
            cfg: cfg.clone(),
            ds,
            model,
            opt,
            state,
        };
        t.normalize_position();
        Ok(t)
    }

    /// Epochs completed across both stages.
    pub fn total_epochs_done(&self) -> usize {
        if self.state.stage == 1 {
            self.state.epochs_done
        } else {
            self.cfg.pretrain_epochs + self.state.epochs_done
        }
    }

    pub fn finished(&self) -> bool {
        self.state.stage == 2 && self.state.epochs_done >= self.cfg.finetune_epochs
    }

    /// Moves a completed stage 1 position to the start of stage 2.
    fn normalize_position(&mut self) {
        if self.state.stage == 1 && self.state.epochs_done >= self.cfg.pretrain_epochs {
            self.state.stage = 2;
            self.state.epochs_done = 0;
        }
    }

    fn non_finite(&self, term: &'static str) -> TrainError {
        TrainError::NonFinite {
            term,
            stage: self.state.stage,
            step: self.state.global_step,
        }
    }

    /// Semantic features of both domains with no gradient linkage:
    /// computed on a throwaway tape and re-entered as constants.
    fn detached_semantics(
        &self,
        micro_s: &[&GlyphSample],
        micro_t: &[&GlyphSample],
    ) -> Result<(Tensor, Tensor), TrainError> {
        let mut tape = Tape::new(&self.model.store);
        let ps = self.model.features(&mut tape, &eval::stack_images(micro_s)?)?;
        let sem_s = self.model.semantics_bilstm(&mut tape, ps)?;
        let pt = self.model.features(&mut tape, &eval::stack_images(micro_t)?)?;
        let sem_t = self.model.semantics_generated(&mut tape, pt)?;
        let own = |tape: &Tape, v| {
            Tensor::new(tape.shape(v).to_vec(), tape.data(v).to_vec()).expect("tape tensor")
        };
        Ok((own(&tape, sem_s), own(&tape, sem_t)))
    }

    /// One discriminator update on a paired batch: hinge loss on
    /// detached features, scaled by beta * lambda_gan, gradients flow
    /// into discriminator parameters only. Returns the batch L_d.
    pub fn disc_step(
        &mut self,
        batch_s: &[&GlyphSample],
        batch_t: &[&GlyphSample],
    ) -> Result<f64, TrainError> {
        let beta = self.cfg.beta(self.state.stage);
        let b = batch_s.len() as f64;
        let mut grads = Gradients::zeros(&self.model.store);
        let mut l_d_batch = 0.0;
        let micro = self.cfg.micro_batch;
        for (ms, mt) in batch_s.chunks(micro).zip(batch_t.chunks(micro)) {
            let (theta, phi) = self.detached_semantics(ms, mt)?;
            let mut tape = Tape::new(&self.model.store);
            let real = tape.constant(theta);
            let fake = tape.constant(phi);
            let score_real = self.model.discriminator.forward(&mut tape, real)?;
            let score_fake = self.model.discriminator.forward(&mut tape, fake)?;
            let l_d = hinge_d(&mut tape, score_real, score_fake)?;
            let v = tape.data(l_d)[0];
            if !v.is_finite() {
                return Err(self.non_finite("L_d"));
            }
            let share = ms.len() as f64 / b;
            l_d_batch += v * share;
            let scaled = tape.affine(l_d, beta * self.cfg.lambda_gan * share, 0.0);
            grads.accumulate(&tape.backward(scaled)?);
        }
        let ids = self.model.sdm_ids();
        clip_global_norm(&mut grads, &ids, self.cfg.clip_norm);
        self.opt.step(&mut self.model.store, &grads, &ids);
        Ok(l_d_batch)
    }

    /// One recognizer update: teacher-forced cross entropy through both
    /// branches, plus the generator's adversarial term when the stage
    /// weight is on. Discriminator parameters are excluded from the
    /// update. Returns (L_R, L_g) batch values.
    pub fn recognizer_step(
        &mut self,
        batch_s: &[&GlyphSample],
        batch_t: &[&GlyphSample],
    ) -> Result<(f64, f64), TrainError> {
        let beta = self.cfg.beta(self.state.stage);
        let adversarial = beta != 0.0;
        let b = batch_s.len() as f64;
        let mut grads = Gradients::zeros(&self.model.store);
        let (mut l_r_batch, mut l_g_batch) = (0.0, 0.0);
        let micro = self.cfg.micro_batch;
        for (ms, mt) in batch_s.chunks(micro).zip(batch_t.chunks(micro)) {
            let labels = |block: &[&GlyphSample]| -> Result<Vec<Vec<usize>>, TensorError> {
                block.iter().map(|s| encode_label(&s.label)).collect()
            };
            let mut tape = Tape::new(&self.model.store);
            let ps = self.model.features(&mut tape, &eval::stack_images(ms)?)?;
            let sem_s = self.model.semantics_bilstm(&mut tape, ps)?;
            let l_sup = self.model.decoder.decode_teacher_forced(
                &mut tape,
                ps,
                sem_s,
                &labels(ms)?,
                self.cfg.variant,
            )?;
            let pt = self.model.features(&mut tape, &eval::stack_images(mt)?)?;
            let sem_t = self.model.semantics_generated(&mut tape, pt)?;
            let l_tgt = self.model.decoder.decode_teacher_forced(
                &mut tape,
                pt,
                sem_t,
                &labels(mt)?,
                self.cfg.variant,
            )?;
            let l_r = tape.add(l_sup, l_tgt)?;
            let v_r = tape.data(l_r)[0];
            if !v_r.is_finite() {
                return Err(self.non_finite("L_R"));
            }
            let share = ms.len() as f64 / b;
            l_r_batch += v_r * share;

            let objective = if adversarial {
                let score_fake = self.model.discriminator.forward(&mut tape, sem_t)?;
                let l_g = hinge_g(&mut tape, score_fake);
                let v_g = tape.data(l_g)[0];
                if !v_g.is_finite() {
                    return Err(self.non_finite("L_g"));
                }
                l_g_batch += v_g * share;
                let weighted = tape.affine(l_g, beta, 0.0);
                tape.add(l_r, weighted)?
            } else {
                l_r
            };
            let scaled = tape.affine(objective, share, 0.0);
            grads.accumulate(&tape.backward(scaled)?);
        }
        let ids = self.model.recognizer_ids();
        clip_global_norm(&mut grads, &ids, self.cfg.clip_norm);
        self.opt.step(&mut self.model.store, &grads, &ids);
        Ok((l_r_batch, l_g_batch))
    }

    /// Dual-path sequence accuracy over both val domains.
    pub fn val_accuracy(&self) -> Result<f64, TrainError> {
        let mut correct = 0;
        let mut total = 0;
        for domain in Domain::ALL {
            let samples = self.ds.get(Split::Val, domain);
            let (c, _, _, _) = eval::eval_slice(
                &self.model,
                samples,
                self.cfg.variant,
                self.cfg.confidence_rule,
                self.cfg.batch_size,
            )?;
            correct += c;
            total += samples.len();
        }
        Ok(correct as f64 / total as f64)
    }

    /// Runs the epoch at the current position, appending one metrics
    /// line per step, then advances the position by one epoch.
    pub fn run_epoch(&mut self, log: &mut dyn Write) -> Result<(), TrainError> {
        let stage = self.state.stage;
        let epoch = self.state.epochs_done;
        let sup = self.ds.get(Split::Train, Domain::Support);
        let tgt = self.ds.get(Split::Train, Domain::Target);
        debug_assert_eq!(sup.len(), tgt.len(), "paired domains share counts");

        let shuffled = |domain: u64| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..sup.len()).collect();
            let mut rng = seeding::sub_rng(&[
                self.cfg.seed,
                STREAM_ORDER,
                stage as u64,
                epoch as u64,
                domain,
            ]);
            idx.shuffle(&mut rng);
            idx
        };
        let order_s = shuffled(0);
        let order_t = shuffled(1);

        for (chunk_s, chunk_t) in order_s
            .chunks(self.cfg.batch_size)
            .zip(order_t.chunks(self.cfg.batch_size))
        {
            let batch_s: Vec<&GlyphSample> = chunk_s.iter().map(|&i| &sup[i]).collect();
            let batch_t: Vec<&GlyphSample> = chunk_t.iter().map(|&i| &tgt[i]).collect();
            let l_d = if self.cfg.beta(stage) != 0.0 {
                self.disc_step(&batch_s, &batch_t)?
            } else {
                0.0
            };
            let (l_r, l_g) = self.recognizer_step(&batch_s, &batch_t)?;
            self.state.global_step += 1;
            let val = if self.cfg.val_every > 0 && self.state.global_step % self.cfg.val_every == 0
            {
                self.val_accuracy()?.to_string()
            } else {
                String::new()
            };
            writeln!(
                log,
                "{},{},{},{},{},{}",
                stage, self.state.global_step, l_r, l_g, l_d, val
            )?;
        }
        self.state.epochs_done += 1;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        save_checkpoint(dir, &self.cfg, &self.model, &self.opt, self.state)
    }
}

// ── top-level driver ────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    /// Checkpoint at the stage boundary, when stage 1 finished in this
    /// process.
    pub stage1_dir: Option<PathBuf>,
    /// Checkpoint after the full schedule.
    pub final_dir: Option<PathBuf>,
    /// Checkpoint cut by stop_after_epochs.
    pub partial_dir: Option<PathBuf>,
    pub global_step: usize,
}

pub const METRICS_HEADER: &str = "stage,step,L_R,L_g,L_d,val_acc";

/// Runs the full two-stage schedule (or resumes it), writing
/// `metrics.csv` plus `stage1/`, `final/`, and possibly `partial/`
/// checkpoints under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = match resume_from {
        Some(dir) => Trainer::resume(cfg, ds, dir)?,
        None => Trainer::new(cfg, ds)?,
    };
    trainer.normalize_position();

    let metrics_path = out_dir.join("metrics.csv");
    let mut log = fs::File::create(&metrics_path)?;
    writeln!(log, "{METRICS_HEADER}")?;

    let mut outcome = TrainOutcome {
        metrics_path,
        stage1_dir: None,
        final_dir: None,
        partial_dir: None,
        global_step: trainer.state.global_step,
    };

    loop {
        let stop = cfg.stop_after_epochs > 0
            && trainer.total_epochs_done() >= cfg.stop_after_epochs
            && !trainer.finished();
        if stop {
            let dir = out_dir.join("partial");
            trainer.save(&dir)?;
            outcome.partial_dir = Some(dir);
            break;
        }
        if trainer.finished() {
            let dir = out_dir.join("final");
            trainer.save(&dir)?;
            outcome.final_dir = Some(dir);
            break;
        }
        trainer.run_epoch(&mut log)?;
        if trainer.state.stage == 1 && trainer.state.epochs_done == cfg.pretrain_epochs {
            let dir = out_dir.join("stage1");
            trainer.save(&dir)?;
            outcome.stage1_dir = Some(dir);
            trainer.normalize_position();
        }
        log.flush()?;
    }
    log.flush()?;
    outcome.global_step = trainer.state.global_step;
    Ok(outcome)
}

// ── tests ───────────────────────────────────────────────────────────
