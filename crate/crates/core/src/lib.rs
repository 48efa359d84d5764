//! Scene-text recognition stack: tensor autodiff, recurrent and conv
//! building blocks, a CNN encoder, a semantic feature GAN, an attention
//! decoder with a learned visual/semantic balance, synthetic glyph data,
//! and a two-stage training loop. Everything runs on CPU in f64 and is
//! deterministic given a seed.

pub mod archive;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod font;
pub mod gan;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod seeding;
pub mod tensor;
pub mod train;
