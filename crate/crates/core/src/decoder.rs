//! Attention decoder over two feature sequences.
//!
//! Each step attends separately over the pooled visual sequence and the
//! semantic sequence with a shared energy head:
//!
//!   e_i = Wc tanh(Wh h + Wv f_i + bv)      (visual; Ws/bs for semantic)
//!   alpha = softmax(e), g = sum_i alpha_i f_i
//!
//! and fuses the two glimpses per the variant: Single uses g_v alone, Add
//! sums, ConcatLinear maps concat(g_v,g_s) through a linear layer, and
//! Balance gates them elementwise with lambda = sigmoid(W cat + b). A GRU
//! consumes the previous token's one-hot and the fused glimpse; a linear
//! head produces class logits.
//!
//! The 64-class alphabet is 10 digits, 52 case-sensitive letters, SOS, and
//! EOS. SOS is only ever fed in, EOS only ever read out.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::nn::{GruCell, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const NUM_CLASSES: usize = 64;
pub const SOS: usize = 62;
pub const EOS: usize = 63;
pub const MAX_STEPS: usize = 32;

// ── Charset ──────────────────────────────────────────────────────────────

/// Digits map to 0..=9, uppercase to 10..=35, lowercase to 36..=61.
pub fn char_to_class(c: char) -> Option<usize> {
    match c {
        '0'..='9' => Some(c as usize - '0' as usize),
        'A'..='Z' => Some(10 + c as usize - 'A' as usize),
        'a'..='z' => Some(36 + c as usize - 'a' as usize),
        _ => None,
    }
}

pub fn class_to_char(id: usize) -> Option<char> {
    match id {
        0..=9 => Some((b'0' + id as u8) as char),
        10..=35 => Some((b'A' + (id - 10) as u8) as char),
        36..=61 => Some((b'a' + (id - 36) as u8) as char),
        _ => None,
    }
}

pub fn encode_label(s: &str) -> Result<Vec<usize>, TensorError> {
    s.chars()
        .map(|c| {
            char_to_class(c).ok_or_else(|| TensorError::Invalid {
                op: "encode_label",
                msg: format!("character {c:?} is outside the alphanumeric alphabet"),
            })
        })
        .collect()
}

pub fn decode_classes(ids: &[usize]) -> String {
    ids.iter().filter_map(|&i| class_to_char(i)).collect()
}

// ── Variants ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Single,
    Add,
    ConcatLinear,
    Balance,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Single, Variant::Add, Variant::ConcatLinear, Variant::Balance];

    pub fn uses_semantic(self) -> bool {
        self != Variant::Single
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Variant::Single),
            "add" => Ok(Variant::Add),
            "cl" => Ok(Variant::ConcatLinear),
            "balance" => Ok(Variant::Balance),
            other => Err(format!("unknown variant {other:?} (expected single|add|cl|balance)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Single => "single",
            Variant::Add => "add",
            Variant::ConcatLinear => "cl",
            Variant::Balance => "balance",
        })
    }
}

/// How a greedy decode's confidence is aggregated from per-step
/// max-probabilities (EOS steps excluded; an immediate-EOS decode falls
/// back to the EOS step itself so confidence is always defined).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfidenceRule {
    #[default]
    MeanMax,
    Product,
}

impl FromStr for ConfidenceRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean_max" => Ok(ConfidenceRule::MeanMax),
            "product" => Ok(ConfidenceRule::Product),
            other => Err(format!("unknown confidence rule {other:?} (expected mean_max|product)")),
        }
    }
}

impl fmt::Display for ConfidenceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfidenceRule::MeanMax => "mean_max",
            ConfidenceRule::Product => "product",
        })
    }
}

// ── Decoder ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Decoder {
    pub gru: GruCell,
    pub out: Linear,
    pub balance: Linear,
    pub cl: Linear,
    pub wh: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub ws: ParamId,
    pub bs: ParamId,
    pub wc: ParamId,
    pub feat_dim: usize,
    pub hidden: usize,
    pub attn: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feat_dim: usize,
        hidden: usize,
        attn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gru = GruCell::new(store, &format!("{prefix}.gru"), NUM_CLASSES + feat_dim, hidden, rng);
        let out = Linear::new(store, &format!("{prefix}.out"), hidden, NUM_CLASSES, rng);
        let balance = Linear::new(store, &format!("{prefix}.balance"), 2 * feat_dim, feat_dim, rng);
        let cl = Linear::new(store, &format!("{prefix}.cl"), 2 * feat_dim, feat_dim, rng);
        let mut mat = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            store.insert(
                &format!("{prefix}.{name}"),
                vec![r, c],
                crate::nn::xavier_uniform(rng, r, c, r * c),
            )
        };
        let wh = mat("Wh", hidden, attn, rng);
        let wv = mat("Wv", feat_dim, attn, rng);
        let ws = mat("Ws", feat_dim, attn, rng);
        let wc = mat("Wc", attn, 1, rng);
        let bv = store.insert(&format!("{prefix}.bv"), vec![attn], vec![0.0; attn]);
        let bs = store.insert(&format!("{prefix}.bs"), vec![attn], vec![0.0; attn]);
        Decoder { gru, out, balance, cl, wh, wv, bv, ws, bs, wc, feat_dim, hidden, attn }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.gru.ids();
        v.extend(self.out.ids());
        v.extend(self.balance.ids());
        v.extend(self.cl.ids());
        v.extend([self.wh, self.wv, self.bv, self.ws, self.bs, self.wc]);
        v
    }

    pub fn param_count(&self) -> usize {
        let (c, h, a) = (self.feat_dim, self.hidden, self.attn);
        self.gru.param_count()
            + self.out.param_count()
            + self.balance.param_count()
            + self.cl.param_count()
            + h * a
            + 2 * (c * a + a)
            + a
    }

    /// Precompute `W f_i + b` for every position of a feature sequence:
    /// (B, n, C) -> (B, n, A). Done once per decode, reused at every step.
    fn attn_ctx(&self, tape: &mut Tape, feats: Var, w: ParamId, b: ParamId) -> Result<Var, TensorError> {
        let s = tape.shape(feats).to_vec();
        let (bs, n, c) = (s[0], s[1], s[2]);
        if c != self.feat_dim {
            return Err(TensorError::ShapeMismatch {
                op: "attn_ctx",
                lhs: crate::tensor::fmt_shape(&s),
                rhs: format!("BxNx{}", self.feat_dim),
            });
        }
        let flat = tape.reshape(feats, vec![bs * n, c])?;
        let wv = tape.param(w);
        let bv = tape.param(b);
        let p = tape.matmul(flat, wv)?;
        let p = tape.add_row(p, bv)?;
        tape.reshape(p, vec![bs, n, self.attn])
    }

    /// Energies for one step: ctx (B, n, A) + Wh h broadcast, tanh, then
    /// the shared Wc head -> (B, n).
    fn energies(&self, tape: &mut Tape, ctx: Var, h: Var) -> Result<Var, TensorError> {
        let s = tape.shape(ctx).to_vec();
        let (bs, n) = (s[0], s[1]);
        let wh = tape.param(self.wh);
        let hw = tape.matmul(h, wh)?;
        let pre = tape.add_seq(ctx, hw)?;
        let t = tape.tanh(pre);
        let flat = tape.reshape(t, vec![bs * n, self.attn])?;
        let wc = tape.param(self.wc);
        let e = tape.matmul(flat, wc)?;
        tape.reshape(e, vec![bs, n])
    }
}

/// Everything one decode shares across steps.
struct DecodeCtx {
    pooled: Var,
    sem: Var,
    vis_ctx: Var,
    sem_ctx: Option<Var>,
    batch: usize,
}

/// Tape handles produced by one decode step; the caller decides which to
/// read out into a trace.
struct StepVars {
    logits: Var,
    h: Var,
    alpha_v: Var,
    alpha_s: Option<Var>,
    lambda: Option<Var>,
    g_v: Var,
    g_s: Option<Var>,
    g: Var,
}

impl Decoder {
    fn prep(&self, tape: &mut Tape, pooled: Var, sem: Var, variant: Variant) -> Result<DecodeCtx, TensorError> {
        let sp = tape.shape(pooled).to_vec();
        let ss = tape.shape(sem).to_vec();
        if sp.len() != 3 || ss.len() != 3 || sp != ss {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: crate::tensor::fmt_shape(&sp),
                rhs: crate::tensor::fmt_shape(&ss),
            });
        }
        let vis_ctx = self.attn_ctx(tape, pooled, self.wv, self.bv)?;
        let sem_ctx = if variant.uses_semantic() {
            Some(self.attn_ctx(tape, sem, self.ws, self.bs)?)
        } else {
            None
        };
        Ok(DecodeCtx { pooled, sem, vis_ctx, sem_ctx, batch: sp[0] })
    }

    fn step(
        &self,
        tape: &mut Tape,
        ctx: &DecodeCtx,
        y_prev: Var,
        h_prev: Var,
        variant: Variant,
    ) -> Result<StepVars, TensorError> {
        let e_v = self.energies(tape, ctx.vis_ctx, h_prev)?;
        let alpha_v = tape.softmax(e_v)?;
        let g_v = tape.attn_mix(alpha_v, ctx.pooled)?;
        let (alpha_s, g_s) = match ctx.sem_ctx {
            Some(sc) => {
                let e_s = self.energies(tape, sc, h_prev)?;
                let a = tape.softmax(e_s)?;
                let g = tape.attn_mix(a, ctx.sem)?;
                (Some(a), Some(g))
            }
            None => (None, None),
        };
        let (g, lambda) = match variant {
            Variant::Single => (g_v, None),
            Variant::Add => (tape.add(g_v, g_s.unwrap())?, None),
            Variant::ConcatLinear => {
                let cat = tape.concat_cols(g_v, g_s.unwrap())?;
                (self.cl.forward(tape, cat)?, None)
            }
            Variant::Balance => {
                let gs = g_s.unwrap();
                let cat = tape.concat_cols(g_v, gs)?;
                let pre = self.balance.forward(tape, cat)?;
                let lambda = tape.sigmoid(pre);
                let a = tape.mul(lambda, g_v)?;
                let inv = tape.affine(lambda, -1.0, 1.0);
                let b = tape.mul(inv, gs)?;
                (tape.add(a, b)?, Some(lambda))
            }
        };
        let gru_in = tape.concat_cols(y_prev, g)?;
        let h = self.gru.step(tape, gru_in, h_prev)?;
        let logits = self.out.forward(tape, h)?;
        Ok(StepVars { logits, h, alpha_v, alpha_s, lambda, g_v, g_s, g })
    }

    fn one_hot(&self, tape: &mut Tape, tokens: &[usize]) -> Var {
        let b = tokens.len();
        let mut data = vec![0.0; b * NUM_CLASSES];
        for (i, &t) in tokens.iter().enumerate() {
            data[i * NUM_CLASSES + t] = 1.0;
        }
        tape.constant(Tensor { shape: vec![b, NUM_CLASSES], data })
    }

    fn h0(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(vec![batch, self.hidden]))
    }

    /// Teacher-forced decode of a batch. Step t's target is label[t] for
    /// t < len and EOS at t = len; steps past a sample's EOS carry zero
    /// weight. The returned scalar is the cross entropy averaged per
    /// sample over its own steps, then over the batch.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        pooled: Var,
        sem: Var,
        labels: &[Vec<usize>],
        variant: Variant,
    ) -> Result<Var, TensorError> {
        let ctx = self.prep(tape, pooled, sem, variant)?;
        let b = ctx.batch;
        if labels.len() != b {
            return Err(TensorError::Invalid {
                op: "decode_teacher_forced",
                msg: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        let t_max = labels.iter().map(|l| l.len() + 1).max().unwrap_or(1);
        if t_max > MAX_STEPS {
            return Err(TensorError::Invalid {
                op: "decode_teacher_forced",
                msg: format!("label length {} exceeds the {MAX_STEPS}-step budget", t_max - 1),
            });
        }
        let mut h = self.h0(tape, b);
        let mut loss: Option<Var> = None;
        for t in 0..t_max {
            let tokens: Vec<usize> = labels
                .iter()
                .map(|l| {
                    if t == 0 {
                        SOS
                    } else if t - 1 < l.len() {
                        l[t - 1]
                    } else {
                        EOS
                    }
                })
                .collect();
            let y_prev = self.one_hot(tape, &tokens);
            let sv = self.step(tape, &ctx, y_prev, h, variant)?;
            h = sv.h;
            let mut targets = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for l in labels {
                let (target, w) = if t < l.len() {
                    (l[t], 1.0 / ((l.len() + 1) as f64 * b as f64))
                } else if t == l.len() {
                    (EOS, 1.0 / ((l.len() + 1) as f64 * b as f64))
                } else {
                    (EOS, 0.0)
                };
                targets.push(target);
                weights.push(w);
            }
            let step_loss = tape.weighted_nll(sv.logits, &targets, &weights)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, step_loss)?,
                None => step_loss,
            });
        }
        Ok(loss.expect("t_max >= 1"))
    }
}

// ── Greedy decoding and traces ───────────────────────────────────────────

/// One decode step's observable state for a single sample.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub token: usize,
    pub probs: Vec<f64>,
    pub h: Vec<f64>,
    pub alpha_v: Vec<f64>,
    /// None for the Single variant, which never attends semantically.
    pub alpha_s: Option<Vec<f64>>,
    /// Per-channel gate; only the Balance variant has one.
    pub lambda: Option<Vec<f64>>,
    pub g_v: Vec<f64>,
    pub g_s: Option<Vec<f64>>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub steps: Vec<StepTrace>,
    pub text: String,
    pub confidence: f64,
}

/// Confidence over a finished trace. EOS steps are excluded; a trace that
/// is nothing but EOS uses that step's max probability.
pub fn confidence(steps: &[StepTrace], rule: ConfidenceRule) -> f64 {
    let maxes: Vec<f64> = steps
        .iter()
        .filter(|s| s.token != EOS)
        .map(|s| s.probs.iter().cloned().fold(0.0, f64::max))
        .collect();
    if maxes.is_empty() {
        return steps
            .last()
            .map(|s| s.probs.iter().cloned().fold(0.0, f64::max))
            .unwrap_or(0.0);
    }
    match rule {
        ConfidenceRule::MeanMax => maxes.iter().sum::<f64>() / maxes.len() as f64,
        ConfidenceRule::Product => maxes.iter().product(),
    }
}

impl Decoder {
    /// Greedy decode: argmax feedback, halting per sample at EOS and
    /// globally at MAX_STEPS. Returns one full trace per sample.
    pub fn decode_greedy(
        &self,
        tape: &mut Tape,
        pooled: Var,
        sem: Var,
        variant: Variant,
        rule: ConfidenceRule,
    ) -> Result<Vec<DecodeTrace>, TensorError> {
        let ctx = self.prep(tape, pooled, sem, variant)?;
        let b = ctx.batch;
        let n = tape.shape(pooled)[1];
        let mut h = self.h0(tape, b);
        let mut tokens = vec![SOS; b];
        let mut done = vec![false; b];
        let mut steps: Vec<Vec<StepTrace>> = vec![Vec::new(); b];
        for _ in 0..MAX_STEPS {
            let y_prev = self.one_hot(tape, &tokens);
            let sv = self.step(tape, &ctx, y_prev, h, variant)?;
            h = sv.h;
            let probs = tape.softmax(sv.logits)?;
            let pd = tape.data(probs).to_vec();
            let hd = tape.data(sv.h).to_vec();
            let avd = tape.data(sv.alpha_v).to_vec();
            let asd = sv.alpha_s.map(|v| tape.data(v).to_vec());
            let lam = sv.lambda.map(|v| tape.data(v).to_vec());
            let gvd = tape.data(sv.g_v).to_vec();
            let gsd = sv.g_s.map(|v| tape.data(v).to_vec());
            let gd = tape.data(sv.g).to_vec();
            let c = self.feat_dim;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let row = &pd[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                let tok = argmax(row);
                steps[i].push(StepTrace {
                    token: tok,
                    probs: row.to_vec(),
                    h: hd[i * self.hidden..(i + 1) * self.hidden].to_vec(),
                    alpha_v: avd[i * n..(i + 1) * n].to_vec(),
                    alpha_s: asd.as_ref().map(|d| d[i * n..(i + 1) * n].to_vec()),
                    lambda: lam.as_ref().map(|d| d[i * c..(i + 1) * c].to_vec()),
                    g_v: gvd[i * c..(i + 1) * c].to_vec(),
                    g_s: gsd.as_ref().map(|d| d[i * c..(i + 1) * c].to_vec()),
                    g: gd[i * c..(i + 1) * c].to_vec(),
                });
                tokens[i] = tok;
                if tok == EOS {
                    done[i] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(steps
            .into_iter()
            .map(|s| {
                let text = decode_classes(
                    &s.iter().map(|st| st.token).take_while(|&t| t != EOS).collect::<Vec<_>>(),
                );
                let conf = confidence(&s, rule);
                DecodeTrace { steps: s, text, confidence: conf }
            })
            .collect())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
