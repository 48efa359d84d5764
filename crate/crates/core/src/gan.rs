//! Semantic feature GAN.
//!
//! The generator maps the target branch's pooled visual features to a
//! semantic sequence of the same shape; the support branch gets its
//! semantic sequence from a plain BiLSTM over pooled features. The
//! discriminator scores a semantic sequence with one real number; hinge
//! losses push support sequences above +1 and generated ones below -1,
//! while the generator is rewarded for raising its score.
//!
//! Nothing here applies a sigmoid to scores: the hinge losses consume raw
//! outputs.

use rand_chacha::ChaCha8Rng;

use crate::nn::{BiLstm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};

/// BiLSTM followed by two position-wise linear layers (relu between them).
/// Shape-preserving: (B, n, dim) -> (B, n, dim).
#[derive(Debug, Clone)]
pub struct GenUnit {
    pub rnn: BiLstm,
    pub fc1: Linear,
    pub fc2: Linear,
    dim: usize,
}

impl GenUnit {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let rnn = BiLstm::new(store, &format!("{prefix}.rnn"), dim, hidden, dim, rng);
        let fc1 = Linear::new(store, &format!("{prefix}.fc1"), dim, dim, rng);
        let fc2 = Linear::new(store, &format!("{prefix}.fc2"), dim, dim, rng);
        GenUnit { rnn, fc1, fc2, dim }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let h = self.rnn.forward(tape, x)?;
        let flat = tape.reshape(h, vec![b * n, self.dim])?;
        let h = self.fc1.forward(tape, flat)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.reshape(h, vec![b, n, self.dim])
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.rnn.ids();
        v.extend(self.fc1.ids());
        v.extend(self.fc2.ids());
        v
    }

    fn param_count(&self) -> usize {
        self.rnn.param_count() + self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Two stacked units; input and output are both (B, n, dim) so generated
/// sequences are drop-in replacements for support semantics.
#[derive(Debug, Clone)]
pub struct Generator {
    pub unit1: GenUnit,
    pub unit2: GenUnit,
    pub dim: usize,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let unit1 = GenUnit::new(store, &format!("{prefix}.unit1"), dim, hidden, rng);
        let unit2 = GenUnit::new(store, &format!("{prefix}.unit2"), dim, hidden, rng);
        Generator { unit1, unit2, dim }
    }

    pub fn forward(&self, tape: &mut Tape, pooled: Var) -> Result<Var, TensorError> {
        let s = tape.shape(pooled).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                lhs: crate::tensor::fmt_shape(&s),
                rhs: format!("BxNx{}", self.dim),
            });
        }
        let h = self.unit1.forward(tape, pooled)?;
        self.unit2.forward(tape, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.unit1.ids();
        v.extend(self.unit2.ids());
        v
    }

    pub fn param_count(&self) -> usize {
        self.unit1.param_count() + self.unit2.param_count()
    }
}

/// BiLSTM plus a position-wise linear (relu on the way out); narrows the
/// feature dim.
#[derive(Debug, Clone)]
pub struct DiscUnit {
    pub rnn: BiLstm,
    pub fc: Linear,
    dim_in: usize,
    dim_out: usize,
}

impl DiscUnit {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rnn = BiLstm::new(store, &format!("{prefix}.rnn"), dim_in, hidden, dim_in, rng);
        let fc = Linear::new(store, &format!("{prefix}.fc"), dim_in, dim_out, rng);
        DiscUnit { rnn, fc, dim_in, dim_out }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let h = self.rnn.forward(tape, x)?;
        let flat = tape.reshape(h, vec![b * n, self.dim_in])?;
        let h = self.fc.forward(tape, flat)?;
        let h = tape.relu(h);
        tape.reshape(h, vec![b, n, self.dim_out])
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.rnn.ids();
        v.extend(self.fc.ids());
        v
    }

    fn param_count(&self) -> usize {
        self.rnn.param_count() + self.fc.param_count()
    }
}

/// Two units narrow the sequence features, the final position's state is
/// taken as the sequence summary, and one last linear maps it to a single
/// raw score per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub unit1: DiscUnit,
    pub unit2: DiscUnit,
    pub head: Linear,
    pub dim: usize,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        mid: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let unit1 = DiscUnit::new(store, &format!("{prefix}.unit1"), dim, hidden, mid, rng);
        let unit2 = DiscUnit::new(store, &format!("{prefix}.unit2"), mid, hidden, mid, rng);
        let head = Linear::new(store, &format!("{prefix}.head"), mid, 1, rng);
        Discriminator { unit1, unit2, head, dim }
    }

    /// (B, n, dim) -> (B,) raw scores.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "discriminate",
                lhs: crate::tensor::fmt_shape(&s),
                rhs: format!("BxNx{}", self.dim),
            });
        }
        let (b, n) = (s[0], s[1]);
        let h = self.unit1.forward(tape, x)?;
        let h = self.unit2.forward(tape, h)?;
        let last = tape.pos_select(h, n - 1)?;
        let score = self.head.forward(tape, last)?;
        tape.reshape(score, vec![b])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.unit1.ids();
        v.extend(self.unit2.ids());
        v.extend(self.head.ids());
        v
    }

    pub fn param_count(&self) -> usize {
        self.unit1.param_count() + self.unit2.param_count() + self.head.param_count()
    }
}

// ── Hinge losses ─────────────────────────────────────────────────────────

/// Discriminator hinge on the tape:
/// mean(max(0, 1 - real)) + mean(max(0, 1 + fake)).
pub fn hinge_d(tape: &mut Tape, score_real: Var, score_fake: Var) -> Result<Var, TensorError> {
    let r = tape.affine(score_real, -1.0, 1.0);
    let r = tape.relu(r);
    let r = tape.mean_all(r);
    let f = tape.affine(score_fake, 1.0, 1.0);
    let f = tape.relu(f);
    let f = tape.mean_all(f);
    tape.add(r, f)
}

/// Generator hinge on the tape: -mean(fake score).
pub fn hinge_g(tape: &mut Tape, score_fake: Var) -> Var {
    let m = tape.mean_all(score_fake);
    tape.affine(m, -1.0, 0.0)
}

/// Plain-number twin of `hinge_d`, used for logging and as the test oracle
/// for the tape version.
pub fn hinge_d_value(real: &[f64], fake: &[f64]) -> f64 {
    let r: f64 = real.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|s| (1.0 + s).max(0.0)).sum::<f64>() / fake.len() as f64;
    r + f
}

/// Plain-number twin of `hinge_g`.
pub fn hinge_g_value(fake: &[f64]) -> f64 {
    -(fake.iter().sum::<f64>() / fake.len() as f64)
}
