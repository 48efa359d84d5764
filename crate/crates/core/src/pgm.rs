//! Binary PGM (P5) images, the exchange format for inference inputs and
//! attention heatmaps. Gray values are bytes; tensors in [0,1] map through
//! round(v * 255).

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a P5 PGM file (magic {0:?})")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("maxval {0} unsupported (only 255)")]
    BadMaxval(u32),
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), PgmError> {
    assert_eq!(gray.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PgmError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = next_token(&mut r)?;
    if magic != "P5" {
        return Err(PgmError::BadMagic(magic));
    }
    let width: usize = parse_tok(&next_token(&mut r)?)?;
    let height: usize = parse_tok(&next_token(&mut r)?)?;
    let maxval: u32 = parse_tok(&next_token(&mut r)?)?;
    if maxval != 255 {
        return Err(PgmError::BadMaxval(maxval));
    }
    let mut data = vec![0u8; width * height];
    r.read_exact(&mut data)?;
    Ok((width, height, data))
}

/// One whitespace-delimited header token, skipping `#` comment lines.
fn next_token<R: BufRead>(r: &mut R) -> Result<String, PgmError> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
        if tok.len() > 32 {
            return Err(PgmError::BadHeader("token too long".into()));
        }
    }
}

fn parse_tok<T: std::str::FromStr>(s: &str) -> Result<T, PgmError> {
    s.parse().map_err(|_| PgmError::BadHeader(format!("bad number {s:?}")))
}

pub fn gray_to_unit(gray: &[u8]) -> Vec<f64> {
    gray.iter().map(|&b| b as f64 / 255.0).collect()
}

pub fn unit_to_gray(vals: &[f64]) -> Vec<u8> {
    vals.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Load a PGM as a (1, H, W) image tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor, PgmError> {
    let (w, h, gray) = read_pgm(path)?;
    Ok(Tensor { shape: vec![1, h, w], data: gray_to_unit(&gray) })
}

/// Save a (1, H, W) or (H, W) tensor in [0,1] as PGM.
pub fn save_image(path: &Path, t: &Tensor) -> Result<(), PgmError> {
    let (h, w) = match t.shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        other => panic!("save_image expects (1,H,W) or (H,W), got {other:?}"),
    };
    write_pgm(path, w, h, &unit_to_gray(&t.data))
}
