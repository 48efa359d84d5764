//! CNN encoder: three conv stages, each downsampling by 2, so an H x W
//! image becomes a (C, H/8, W/8) grid with C = 256. The grid is shared by
//! both branches; height-average pooling turns it into a (W/8, C) feature
//! sequence for attention and the recurrent layers.

use rand_chacha::ChaCha8Rng;

use crate::nn::Conv2dLayer;
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};

pub const FEATURE_DIM: usize = 256;

/// conv3x3 -> relu -> conv3x3 -> relu -> stride-2 conv3x3. The downsample
/// conv raises the channel count and carries no activation; the next stage
/// (or the branch heads) consume its raw output.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub conv_a: Conv2dLayer,
    pub conv_b: Conv2dLayer,
    pub down: Conv2dLayer,
}

impl ConvStage {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv_a = Conv2dLayer::new(store, &format!("{prefix}.conv_a"), c_in, c_mid, 3, 1, 1, rng);
        let conv_b = Conv2dLayer::new(store, &format!("{prefix}.conv_b"), c_mid, c_mid, 3, 1, 1, rng);
        let down = Conv2dLayer::new(store, &format!("{prefix}.down"), c_mid, c_out, 3, 2, 1, rng);
        ConvStage { conv_a, conv_b, down }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let h = self.conv_a.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv_b.forward(tape, h)?;
        let h = tape.relu(h);
        self.down.forward(tape, h)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.conv_a.ids();
        v.extend(self.conv_b.ids());
        v.extend(self.down.ids());
        v
    }

    fn param_count(&self) -> usize {
        self.conv_a.param_count() + self.conv_b.param_count() + self.down.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<ConvStage>,
    pub in_channels: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let stages = vec![
            ConvStage::new(store, &format!("{prefix}.stage1"), in_channels, 32, 64, rng),
            ConvStage::new(store, &format!("{prefix}.stage2"), 64, 64, 128, rng),
            ConvStage::new(store, &format!("{prefix}.stage3"), 128, 128, FEATURE_DIM, rng),
        ];
        Encoder { stages, in_channels }
    }

    /// (B, ch, H, W) -> (grid (B, 256, H/8, W/8), pooled (B, W/8, 256)).
    /// H and W must be divisible by 8 so the /8 contract is exact.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), TensorError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: crate::tensor::fmt_shape(&s),
                rhs: format!("Bx{}xHxW", self.in_channels),
            });
        }
        let (h, w) = (s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!("image dims {h}x{w} must be divisible by 8"),
            });
        }
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.forward(tape, cur)?;
        }
        let pooled = tape.avg_pool_h(cur)?;
        Ok((cur, pooled))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.ids()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.param_count()).sum()
    }
}
