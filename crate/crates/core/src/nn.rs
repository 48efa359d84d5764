//! Trainable layers over the tape: linear, conv, GRU cell, LSTM, BiLSTM,
//! plus Xavier init and the AdaDelta optimizer.
//!
//! Layers hold `ParamId`s into a shared `ParamStore`, never values, so one
//! store snapshot serializes the whole model. Constructors take a name
//! prefix; parameter names are "<prefix>.w", "<prefix>.Wz", etc.
//!
//! Recurrent layers are batched: the input projection of a whole sequence
//! is one big matmul, and each recurrent step is a (batch, hidden) matmul
//! rather than per-sample vector products.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, ParamId, ParamStore, Tape, TensorError, Var};

/// Uniform Xavier/Glorot values on [-sqrt(6/(fan_in+fan_out)), +that].
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| limit * (2.0 * rng.gen::<f64>() - 1.0)).collect()
}


// ── Linear ───────────────────────────────────────────────────────────────

/// y = x W + b with W stored (in, out) so the forward pass needs no
/// transpose. Bias starts at zero.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.insert(
            &format!("{prefix}.w"),
            vec![dim_in, dim_out],
            xavier_uniform(rng, dim_in, dim_out, dim_in * dim_out),
        );
        let b = store.insert(&format!("{prefix}.b"), vec![dim_out], vec![0.0; dim_out]);
        Linear { w, b, dim_in, dim_out }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn param_count(&self) -> usize {
        self.dim_in * self.dim_out + self.dim_out
    }
}

// ── Conv ─────────────────────────────────────────────────────────────────

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        let w = store.insert(
            &format!("{prefix}.w"),
            vec![c_out, c_in, k, k],
            xavier_uniform(rng, fan_in, fan_out, c_out * c_in * k * k),
        );
        let b = store.insert(&format!("{prefix}.b"), vec![c_out], vec![0.0; c_out]);
        Conv2dLayer { w, b, c_in, c_out, k, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + self.c_out
    }
}

// ── GRU cell ─────────────────────────────────────────────────────────────

/// Single-step GRU with per-gate weight matrices.
///
///   z = sigmoid(x Wz + h Uz + bz)
///   r = sigmoid(x Wr + h Ur + br)
///   n = tanh(x Wn + (r * h) Un + bn)
///   h' = (1 - z) * n + z * h
///
/// All-zero weights give z = 1/2, n = 0, so h' = h/2 exactly; tests pin
/// that as the update-rule oracle.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub dim_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mat = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            store.insert(&format!("{prefix}.{name}"), vec![r, c], xavier_uniform(rng, r, c, r * c))
        };
        let wz = mat("Wz", dim_in, hidden, rng);
        let uz = mat("Uz", hidden, hidden, rng);
        let wr = mat("Wr", dim_in, hidden, rng);
        let ur = mat("Ur", hidden, hidden, rng);
        let wn = mat("Wn", dim_in, hidden, rng);
        let un = mat("Un", hidden, hidden, rng);
        let bz = store.insert(&format!("{prefix}.bz"), vec![hidden], vec![0.0; hidden]);
        let br = store.insert(&format!("{prefix}.br"), vec![hidden], vec![0.0; hidden]);
        let bn = store.insert(&format!("{prefix}.bn"), vec![hidden], vec![0.0; hidden]);
        GruCell { wz, uz, bz, wr, ur, br, wn, un, bn, dim_in, hidden }
    }

    /// One step: x (B, in), h (B, hidden) -> (B, hidden).
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var, TensorError> {
        let gate = |tape: &mut Tape, w, u, b, hh: Var| -> Result<Var, TensorError> {
            let wv = tape.param(w);
            let uv = tape.param(u);
            let bv = tape.param(b);
            let xw = tape.matmul(x, wv)?;
            let hu = tape.matmul(hh, uv)?;
            let s = tape.add(xw, hu)?;
            tape.add_row(s, bv)
        };
        let z_pre = gate(tape, self.wz, self.uz, self.bz, h)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, self.wr, self.ur, self.br, h)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let n_pre = gate(tape, self.wn, self.un, self.bn, rh)?;
        let n = tape.tanh(n_pre);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wn, self.un, self.bn]
    }

    pub fn param_count(&self) -> usize {
        3 * (self.dim_in * self.hidden + self.hidden * self.hidden + self.hidden)
    }
}

// ── LSTM ─────────────────────────────────────────────────────────────────

/// One LSTM direction with fused gate weights: w_ih (in, 4H), w_hh (H, 4H),
/// b (4H), gate column order (input, forget, cell, output). The forget
/// slice of the bias starts at 1.0 so early training does not immediately
/// flush cell state.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub dim_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_ih = store.insert(
            &format!("{prefix}.w_ih"),
            vec![dim_in, 4 * hidden],
            xavier_uniform(rng, dim_in, 4 * hidden, dim_in * 4 * hidden),
        );
        let w_hh = store.insert(
            &format!("{prefix}.w_hh"),
            vec![hidden, 4 * hidden],
            xavier_uniform(rng, hidden, 4 * hidden, hidden * 4 * hidden),
        );
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.insert(&format!("{prefix}.b"), vec![4 * hidden], bias);
        Lstm { w_ih, w_hh, b, dim_in, hidden }
    }

    /// Run over pre-projected inputs. `xp` is (B, n, 4H) = x w_ih + b for
    /// the whole sequence; `order` gives the time direction. Returns the
    /// hidden state per step, indexed by position (not by visit order).
    pub fn run_projected(
        &self,
        tape: &mut Tape,
        xp: Var,
        order: impl Iterator<Item = usize>,
        batch: usize,
    ) -> Result<Vec<Var>, TensorError> {
        let hdim = self.hidden;
        let n = tape.shape(xp)[1];
        let zero = tape.constant(crate::tensor::Tensor::zeros(vec![batch, hdim]));
        let mut h = zero;
        let mut c = zero;
        let mut out: Vec<Option<Var>> = vec![None; n];
        let w_hh = tape.param(self.w_hh);
        for t in order {
            let xt = tape.pos_select(xp, t)?;
            let hw = tape.matmul(h, w_hh)?;
            let gates = tape.add(xt, hw)?;
            let i_pre = tape.slice_cols(gates, 0, hdim)?;
            let f_pre = tape.slice_cols(gates, hdim, hdim)?;
            let g_pre = tape.slice_cols(gates, 2 * hdim, hdim)?;
            let o_pre = tape.slice_cols(gates, 3 * hdim, hdim)?;
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(|v| v.expect("order must cover every position")).collect())
    }

    /// Project a (B, n, in) sequence to gate space in one matmul.
    pub fn project_input(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(x, vec![b * n, d])?;
        let w = tape.param(self.w_ih);
        let bb = tape.param(self.b);
        let p = tape.matmul(flat, w)?;
        let p = tape.add_row(p, bb)?;
        tape.reshape(p, vec![b, n, 4 * self.hidden])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_ih, self.w_hh, self.b]
    }

    pub fn param_count(&self) -> usize {
        self.dim_in * 4 * self.hidden + self.hidden * 4 * self.hidden + 4 * self.hidden
    }
}

// ── BiLSTM ───────────────────────────────────────────────────────────────

/// Forward and backward LSTM over the same sequence, per-position concat,
/// then a linear projection down to `dim_out`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub proj: Linear,
    pub dim_in: usize,
    pub hidden: usize,
    pub dim_out: usize,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fwd = Lstm::new(store, &format!("{prefix}.fwd"), dim_in, hidden, rng);
        let bwd = Lstm::new(store, &format!("{prefix}.bwd"), dim_in, hidden, rng);
        let proj = Linear::new(store, &format!("{prefix}.proj"), 2 * hidden, dim_out, rng);
        BiLstm { fwd, bwd, proj, dim_in, hidden, dim_out }
    }

    /// (B, n, in) -> (B, n, out). Errors on an empty sequence.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "bilstm",
                lhs: crate::tensor::fmt_shape(&s),
                rhs: "BxNxD".into(),
            });
        }
        let (b, n) = (s[0], s[1]);
        if n == 0 {
            return Err(TensorError::Invalid { op: "bilstm", msg: "empty sequence".into() });
        }
        let xf = self.fwd.project_input(tape, x)?;
        let hf = self.fwd.run_projected(tape, xf, 0..n, b)?;
        let xb = self.bwd.project_input(tape, x)?;
        let hb = self.bwd.run_projected(tape, xb, (0..n).rev(), b)?;
        let mut cats = Vec::with_capacity(n);
        for t in 0..n {
            cats.push(tape.concat_cols(hf[t], hb[t])?);
        }
        let stacked = tape.stack_pos(&cats)?;
        let flat = tape.reshape(stacked, vec![b * n, 2 * self.hidden])?;
        let p = self.proj.forward(tape, flat)?;
        tape.reshape(p, vec![b, n, self.dim_out])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.fwd.ids();
        v.extend(self.bwd.ids());
        v.extend(self.proj.ids());
        v
    }

    pub fn param_count(&self) -> usize {
        self.fwd.param_count() + self.bwd.param_count() + self.proj.param_count()
    }
}

// ── AdaDelta ─────────────────────────────────────────────────────────────

/// AdaDelta with running averages of squared gradients and squared updates.
///
///   Eg = rho Eg + (1-rho) g^2
///   dx = -sqrt(Ex + eps) / sqrt(Eg + eps) * g
///   Ex = rho Ex + (1-rho) dx^2
///
/// `step` only touches the listed parameters; accumulator slots for other
/// parameters are left alone, so disjoint parameter groups can share one
/// optimizer or use two, identically.
#[derive(Debug)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    eg2: Vec<Vec<f64>>,
    edx2: Vec<Vec<f64>>,
}

impl AdaDelta {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.95, 1e-6)
    }

    pub fn with_hyper(store: &ParamStore, rho: f64, eps: f64) -> Self {
        let eg2 = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        let edx2 = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        AdaDelta { rho, eps, eg2, edx2 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) {
        for &id in ids {
            let g = match grads.get(id) {
                Some(g) => g,
                None => continue,
            };
            let eg2 = &mut self.eg2[id];
            let edx2 = &mut self.edx2[id];
            let data = &mut store.get_mut(id).data;
            for i in 0..data.len() {
                let gi = g[i];
                eg2[i] = self.rho * eg2[i] + (1.0 - self.rho) * gi * gi;
                let dx = -((edx2[i] + self.eps).sqrt() / (eg2[i] + self.eps).sqrt()) * gi;
                edx2[i] = self.rho * edx2[i] + (1.0 - self.rho) * dx * dx;
                data[i] += dx;
            }
        }
    }

    pub fn eg2(&self, id: ParamId) -> &[f64] {
        &self.eg2[id]
    }

    pub fn edx2(&self, id: ParamId) -> &[f64] {
        &self.edx2[id]
    }

    pub fn set_state(&mut self, id: ParamId, eg2: Vec<f64>, edx2: Vec<f64>) {
        assert_eq!(self.eg2[id].len(), eg2.len(), "optimizer state length mismatch");
        assert_eq!(self.edx2[id].len(), edx2.len(), "optimizer state length mismatch");
        self.eg2[id] = eg2;
        self.edx2[id] = edx2;
    }
}

/// Scale gradients of `ids` so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grads.global_norm(ids);
    if norm > max_norm && norm > 0.0 {
        grads.scale(ids, max_norm / norm);
    }
    norm
}
