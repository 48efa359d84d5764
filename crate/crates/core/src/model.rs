//! The assembled recognizer: encoder, support-side recurrent semantics,
//! the generator/discriminator pair, and the attention decoder, all
//! registered in one parameter store under stable names.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError};
use crate::decoder::{ConfidenceRule, DecodeTrace, Decoder, Variant};
use crate::encoder::{Encoder, FEATURE_DIM};
use crate::gan::{Discriminator, Generator};
use crate::nn::BiLstm;
use crate::seeding;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

// ── dimensions ──────────────────────────────────────────────────────

/// Width knobs for everything downstream of the encoder (whose channel
/// progression is fixed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub in_channels: usize,
    /// Hidden size per direction of every recurrent unit.
    pub rnn_hidden: usize,
    /// Width the discriminator narrows semantic features to.
    pub disc_mid: usize,
    /// Decoder recurrent state size.
    pub dec_hidden: usize,
    /// Attention projection size.
    pub attn_dim: usize,
}

impl ModelDims {
    pub fn desk() -> Self {
        ModelDims {
            in_channels: 1,
            rnn_hidden: 256,
            disc_mid: 128,
            dec_hidden: 256,
            attn_dim: 256,
        }
    }

    /// Narrow widths for fast tests. Feature dim stays at the encoder's
    /// fixed 256.
    pub fn tiny() -> Self {
        ModelDims {
            in_channels: 1,
            rnn_hidden: 16,
            disc_mid: 8,
            dec_hidden: 24,
            attn_dim: 12,
        }
    }
}

// ── errors ──────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint parameter {name} has shape {got}, expected {want}")]
    ParamShape {
        name: String,
        got: String,
        want: String,
    },
}

// ── the model ───────────────────────────────────────────────────────

/// Which semantic branch produced a decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    BiLstm,
    Generator,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::BiLstm => "bilstm",
            Branch::Generator => "generator",
        }
    }
}

/// Result of dual-path inference for one sample.
#[derive(Debug, Clone)]
pub struct DualOutcome {
    pub text: String,
    pub confidence: f64,
    pub branch: Branch,
    pub conf_bilstm: f64,
    pub conf_generator: f64,
}

const STREAM_INIT: u64 = 3;

pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub support_rnn: BiLstm,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub decoder: Decoder,
    pub dims: ModelDims,
}

impl Model {
    /// Builds all modules in a fixed order so parameter ids and names
    /// are stable for a given `dims`.
    pub fn new(dims: ModelDims, seed: u64) -> Model {
        let mut store = ParamStore::new();
        let mut rng: ChaCha8Rng = seeding::sub_rng(&[seed, STREAM_INIT]);
        let encoder = Encoder::new(&mut store, "encoder", dims.in_channels, &mut rng);
        let support_rnn = BiLstm::new(
            &mut store,
            "support.rnn",
            FEATURE_DIM,
            dims.rnn_hidden,
            FEATURE_DIM,
            &mut rng,
        );
        let generator = Generator::new(&mut store, "sgm", FEATURE_DIM, dims.rnn_hidden, &mut rng);
        let discriminator = Discriminator::new(
            &mut store,
            "sdm",
            FEATURE_DIM,
            dims.rnn_hidden,
            dims.disc_mid,
            &mut rng,
        );
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            FEATURE_DIM,
            dims.dec_hidden,
            dims.attn_dim,
            &mut rng,
        );
        Model {
            store,
            encoder,
            support_rnn,
            generator,
            discriminator,
            decoder,
            dims,
        }
    }

    /// Everything the recognizer objective updates: encoder, support
    /// semantics, generator, decoder. Disjoint from `sdm_ids`.
    pub fn recognizer_ids(&self) -> Vec<ParamId> {
        let mut v = self.encoder.ids();
        v.extend(self.support_rnn.ids());
        v.extend(self.generator.ids());
        v.extend(self.decoder.ids());
        v
    }

    pub fn sdm_ids(&self) -> Vec<ParamId> {
        self.discriminator.ids()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut v = self.recognizer_ids();
        v.extend(self.sdm_ids());
        v.sort_unstable();
        v
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.support_rnn.param_count()
            + self.generator.param_count()
            + self.discriminator.param_count()
            + self.decoder.param_count()
    }

    // ── forward building blocks ─────────────────────────────────

    /// (B, C_in, H, W) images -> pooled feature sequence (B, W/8, 256).
    ///
    /// Pixels are standardized per image (zero mean, unit variance) before
    /// the encoder. Raw renders are mostly constant background, and that
    /// offset otherwise dominates every conv activation; standardizing
    /// also makes inference invariant to brightness and contrast.
    pub fn features(&self, tape: &mut Tape, images: &Tensor) -> Result<Var, TensorError> {
        let x = tape.constant(standardize_images(images));
        let (_grid, pooled) = self.encoder.encode(tape, x)?;
        Ok(pooled)
    }

    /// Support-side semantics: recurrent pass over the feature sequence.
    pub fn semantics_bilstm(&self, tape: &mut Tape, pooled: Var) -> Result<Var, TensorError> {
        self.support_rnn.forward(tape, pooled)
    }

    /// Target-side semantics: generated from visual features alone.
    pub fn semantics_generated(&self, tape: &mut Tape, pooled: Var) -> Result<Var, TensorError> {
        self.generator.forward(tape, pooled)
    }

    // ── inference ───────────────────────────────────────────────

    /// Greedy-decodes a batch through both semantic branches. Returns
    /// (bilstm trace, generator trace) per sample.
    pub fn decode_both(
        &self,
        images: &Tensor,
        variant: Variant,
        rule: ConfidenceRule,
    ) -> Result<Vec<(DecodeTrace, DecodeTrace)>, TensorError> {
        let mut tape = Tape::new(&self.store);
        let pooled = self.features(&mut tape, images)?;
        let sem_rnn = self.semantics_bilstm(&mut tape, pooled)?;
        let sem_gen = self.semantics_generated(&mut tape, pooled)?;
        let t_rnn = self.decoder.decode_greedy(&mut tape, pooled, sem_rnn, variant, rule)?;
        let t_gen = self.decoder.decode_greedy(&mut tape, pooled, sem_gen, variant, rule)?;
        Ok(t_rnn.into_iter().zip(t_gen).collect())
    }

    /// Dual-path inference: keep whichever branch decodes with higher
    /// confidence; exact ties go to the recurrent branch.
    pub fn infer(
        &self,
        images: &Tensor,
        variant: Variant,
        rule: ConfidenceRule,
    ) -> Result<Vec<DualOutcome>, TensorError> {
        Ok(self
            .decode_both(images, variant, rule)?
            .into_iter()
            .map(|(r, g)| pick_branch(&r, &g))
            .collect())
    }

    // ── parameter serialization ─────────────────────────────────

    /// All parameters as archive entries named `param.{name}`.
    pub fn param_archive(&self) -> Archive {
        let mut ar = Archive::new();
        for (_, param) in self.store.iter() {
            let t = Tensor::new(param.shape.clone(), param.data.clone()).expect("stored param");
            ar.push(&format!("param.{}", param.name), t)
                .expect("store names are unique");
        }
        ar
    }

    /// Restores every parameter from `param.{name}` entries; every
    /// parameter must be present with its exact shape.
    pub fn load_param_archive(&mut self, ar: &Archive) -> Result<(), ModelError> {
        // Collect first so the store is untouched if anything is missing.
        let mut updates: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (id, param) in self.store.iter() {
            let entry = ar.require(&format!("param.{}", param.name))?;
            if entry.shape != param.shape {
                return Err(ModelError::ParamShape {
                    name: param.name.clone(),
                    got: crate::tensor::fmt_shape(&entry.shape),
                    want: crate::tensor::fmt_shape(&param.shape),
                });
            }
            updates.push((id, entry.data.clone()));
        }
        for (id, data) in updates {
            self.store.get_mut(id).data = data;
        }
        Ok(())
    }
}

/// Per-image standardization: each (C, H, W) slice is shifted to zero
/// mean and scaled to unit variance. The epsilon keeps flat images
/// (for example all-zero probes) finite; they map to all zeros.
pub fn standardize_images(images: &Tensor) -> Tensor {
    assert_eq!(images.shape.len(), 4, "images must be (B, C, H, W)");
    let per = images.numel() / images.shape[0].max(1);
    let mut data = images.data.clone();
    for chunk in data.chunks_mut(per.max(1)) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::new(images.shape.clone(), data).expect("shape unchanged")
}

/// Branch selection rule: higher confidence wins, ties go to the
/// recurrent branch.
pub fn pick_branch(rnn: &DecodeTrace, gen: &DecodeTrace) -> DualOutcome {
    let use_gen = gen.confidence > rnn.confidence;
    let (text, confidence, branch) = if use_gen {
        (gen.text.clone(), gen.confidence, Branch::Generator)
    } else {
        (rnn.text.clone(), rnn.confidence, Branch::BiLstm)
    };
    DualOutcome {
        text,
        confidence,
        branch,
        conf_bilstm: rnn.confidence,
        conf_generator: gen.confidence,
    }
}

// ── tests ───────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::StepTrace;

    fn tiny_model(seed: u64) -> Model {
        Model::new(ModelDims::tiny(), seed)
    }

    fn tiny_image(b: usize) -> Tensor {
        let (h, w) = (16, 32);
        let data: Vec<f64> = (0..b * h * w)
            .map(|i| ((i * 37 + 11) % 97) as f64 / 97.0)
            .collect();
        Tensor::new(vec![b, 1, h, w], data).unwrap()
    }

    #[test]
    fn update_groups_partition_the_store() {
        let m = tiny_model(1);
        let rec = m.recognizer_ids();
        let sdm = m.sdm_ids();
        for id in &sdm {
            assert!(!rec.contains(id), "sdm id {id:?} leaked into recognizer set");
        }
        assert_eq!(rec.len() + sdm.len(), m.all_ids().len());
        let total: usize = m
            .all_ids()
            .iter()
            .map(|&id| m.store.get(id).data.len())
            .sum();
        assert_eq!(total, m.param_count());
        assert_eq!(total, m.store.scalar_count());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny_model(5);
        let b = tiny_model(5);
        let c = tiny_model(6);
        let flat = |m: &Model| -> Vec<f64> {
            m.all_ids()
                .iter()
                .flat_map(|&id| m.store.get(id).data.clone())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn dual_inference_runs_and_is_deterministic() {
        let m = tiny_model(2);
        let images = tiny_image(2);
        let out1 = m
            .infer(&images, Variant::Balance, ConfidenceRule::MeanMax)
            .unwrap();
        let out2 = m
            .infer(&images, Variant::Balance, ConfidenceRule::MeanMax)
            .unwrap();
        assert_eq!(out1.len(), 2);
        for (a, b) in out1.iter().zip(&out2) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.confidence, b.confidence);
            assert_eq!(a.branch, b.branch);
            let best = a.conf_bilstm.max(a.conf_generator);
            assert_eq!(a.confidence, best, "kept branch must carry the max confidence");
        }
    }

    #[test]
    fn exact_confidence_tie_prefers_the_recurrent_branch() {
        let step = |p: f64| StepTrace {
            token: 0,
            probs: vec![p; crate::decoder::NUM_CLASSES],
            h: vec![0.0],
            alpha_v: vec![1.0],
            alpha_s: None,
            lambda: None,
            g_v: vec![0.0],
            g_s: None,
            g: vec![0.0],
        };
        let mk = |text: &str, conf: f64| DecodeTrace {
            steps: vec![step(0.5)],
            text: text.to_string(),
            confidence: conf,
        };
        let out = pick_branch(&mk("AAA", 0.5), &mk("BBB", 0.5));
        assert_eq!(out.branch, Branch::BiLstm);
        assert_eq!(out.text, "AAA");
        let out = pick_branch(&mk("AAA", 0.4), &mk("BBB", 0.5));
        assert_eq!(out.branch, Branch::Generator);
        assert_eq!(out.text, "BBB");
    }

    #[test]
    fn param_archive_round_trips_bitwise() {
        let src = tiny_model(9);
        let ar = src.param_archive();
        let mut dst = tiny_model(10);
        dst.load_param_archive(&ar).unwrap();
        for (_, param) in src.store.iter() {
            let id = dst.store.id(&param.name).unwrap();
            assert_eq!(dst.store.get(id).data, param.data, "param {}", param.name);
        }
    }

    #[test]
    fn load_rejects_missing_and_misshapen_params() {
        let src = tiny_model(3);
        let mut ar = src.param_archive();
        let mut dst = tiny_model(3);

        // Shape clash: swap one entry for a scalar.
        let name = format!("param.{}", src.store.iter().next().unwrap().1.name);
        let mut broken = Archive::new();
        for (n, t) in ar.iter() {
            if n == name {
                broken.push(n, Tensor::scalar(0.0)).unwrap();
            } else {
                broken.push(n, t.clone()).unwrap();
            }
        }
        assert!(matches!(
            dst.load_param_archive(&broken),
            Err(ModelError::ParamShape { .. })
        ));

        // Missing entry.
        ar = {
            let mut trimmed = Archive::new();
            for (n, t) in src.param_archive().iter().skip(1) {
                trimmed.push(n, t.clone()).unwrap();
            }
            trimmed
        };
        assert!(matches!(
            dst.load_param_archive(&ar),
            Err(ModelError::Archive(ArchiveError::Missing { .. }))
        ));
        // A failed load leaves parameters untouched.
        let fresh = tiny_model(3);
        for (_, param) in fresh.store.iter() {
            let id = dst.store.id(&param.name).unwrap();
            assert_eq!(dst.store.get(id).data, param.data, "param {}", param.name);
        }
    }

    #[test]
    fn feature_sequence_has_pinned_width_and_dim() {
        let m = tiny_model(4);
        let images = tiny_image(3);
        let mut tape = Tape::new(&m.store);
        let pooled = m.features(&mut tape, &images).unwrap();
        assert_eq!(tape.shape(pooled), &[3, 4, FEATURE_DIM]);
    }
}
