//! Stand-in document encoder producing token embeddings `H` and token attention `A`.
//!
//! The mock encoder embeds every token id with a deterministic pseudo-random
//! unit vector and runs one pass of scaled dot-product self-attention with a
//! residual connection. A linear distance penalty on the attention scores
//! keeps each token's attention concentrated on its neighbourhood, the way a
//! trained encoder's marker tokens attend to nearby context.
//!
//! Long inputs are split into overlapping windows; per-window outputs are
//! averaged on the overlaps and `A` is re-normalised row by row.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{MarkedDocument, TokenId};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Row sums must be within this of 1 after construction.
pub const STOCHASTIC_TOL: f64 = 1e-9;
/// Rows within this of 1 are re-normalised on load; anything further is rejected.
pub const LOAD_STOCHASTIC_TOL: f64 = 1e-6;

const ENCODING_MAGIC: &[u8; 8] = b"DRENC\0\0\0";
const ENCODING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub seed: u64,
    /// Attention-score penalty per token of distance.
    pub locality: f64,
    /// Distance beyond which the penalty stops growing; 0 means never.
    pub locality_span: usize,
    pub window: usize,
    pub overlap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 0,
            locality: 1.0,
            locality_span: 4,
            window: 512,
            overlap: 128,
        }
    }
}

/// Encoder output for one marked document.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDocument {
    /// `n × d` token embeddings.
    pub h: Matrix,
    /// `n × n` row-stochastic token attention.
    pub a: Matrix,
    /// Row of each mention's start marker, indexed `[entity][mention]`.
    pub mention_starts: Vec<Vec<usize>>,
}

impl EncodedDocument {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.h.cols()
    }

    pub fn mention_row(&self, entity: usize, mention: usize) -> &[f64] {
        self.h.row(self.mention_starts[entity][mention])
    }

    /// Check shapes, mention indices and row-stochasticity of `A` within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.h.rows();
        if self.a.rows() != n || self.a.cols() != n {
            return Err(Error::Encoding(format!(
                "attention is {}×{}, expected {n}×{n}",
                self.a.rows(),
                self.a.cols()
            )));
        }
        for (e, starts) in self.mention_starts.iter().enumerate() {
            if let Some(&p) = starts.iter().find(|&&p| p >= n) {
                return Err(Error::Encoding(format!(
                    "entity {e} mention row {p} out of range for {n} tokens"
                )));
            }
        }
        for i in 0..n {
            let row = self.a.row(i);
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Encoding(format!("attention row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Encoding(format!("attention row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Windows of width at most `width`, consecutive ones overlapping by `overlap`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub windows: Vec<Range<usize>>,
}

impl WindowPlan {
    pub fn new(n: usize, width: usize, overlap: usize) -> Result<Self> {
        if width <= overlap {
            return Err(Error::Config(format!(
                "window width {width} must exceed overlap {overlap}"
            )));
        }
        let stride = width - overlap;
        let mut windows = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + width).min(n);
            windows.push(start..end);
            if end >= n {
                break;
            }
            start += stride;
        }
        Ok(Self { windows })
    }
}

/// Deterministic unit-norm embedding of one token id.
pub fn token_embedding(token: TokenId, dim: usize, seed: u64) -> Vec<f64> {
    let key = seed ^ (u64::from(token) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = norm(&v);
    v.into_iter().map(|x| x / len).collect()
}

fn encode_tokens(tokens: &[TokenId], cfg: &EncoderConfig) -> (Matrix, Matrix) {
    let n = tokens.len();
    let d = cfg.dim;
    let x: Vec<Vec<f64>> = tokens.iter().map(|&t| token_embedding(t, d, cfg.seed)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let span = |i: usize, j: usize| match cfg.locality_span {
        0 => i.abs_diff(j),
        s => i.abs_diff(j).min(s),
    };
    let mut a = Matrix::zeros(n, n);
    let mut h = Matrix::zeros(n, d);
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| dot(&x[i], &x[j]) * scale - cfg.locality * span(i, j) as f64)
            .collect();
        let w = crate::linalg::softmax(&scores);
        let hi = h.row_mut(i);
        hi.copy_from_slice(&x[i]);
        for (j, wj) in w.iter().enumerate() {
            for (o, v) in hi.iter_mut().zip(&x[j]) {
                *o += wj * v;
            }
        }
        a.row_mut(i).copy_from_slice(&w);
    }
    (h, a)
}

/// Encode the whole marked document in one pass.
pub fn mock_encode(doc: &MarkedDocument<'_>, cfg: &EncoderConfig) -> EncodedDocument {
    let (h, a) = encode_tokens(&doc.tokens, cfg);
    EncodedDocument {
        h,
        a,
        mention_starts: doc.mention_starts.clone(),
    }
}

/// Encode with overlapping windows of `cfg.window` tokens overlapping by `cfg.overlap`.
pub fn encode_windows(doc: &MarkedDocument<'_>, cfg: &EncoderConfig) -> Result<EncodedDocument> {
    let n = doc.tokens.len();
    let plan = WindowPlan::new(n, cfg.window, cfg.overlap)?;
    if plan.windows.len() == 1 {
        return Ok(mock_encode(doc, cfg));
    }
    let d = cfg.dim;
    let mut h = Matrix::zeros(n, d);
    let mut a = Matrix::zeros(n, n);
    let mut cover = vec![0usize; n];
    for w in &plan.windows {
        let (wh, wa) = encode_tokens(&doc.tokens[w.clone()], cfg);
        for (li, gi) in w.clone().enumerate() {
            cover[gi] += 1;
            for (o, v) in h.row_mut(gi).iter_mut().zip(wh.row(li)) {
                *o += v;
            }
            let arow = a.row_mut(gi);
            for (lj, gj) in w.clone().enumerate() {
                arow[gj] += wa[(li, lj)];
            }
        }
    }
    for (i, &c) in cover.iter().enumerate() {
        let c = c as f64;
        for v in h.row_mut(i) {
            *v /= c;
        }
        let row = a.row_mut(i);
        let s: f64 = row.iter().sum();
        for v in row {
            *v /= s;
        }
    }
    Ok(EncodedDocument {
        h,
        a,
        mention_starts: doc.mention_starts.clone(),
    })
}

/// Binary layout, all scalars little-endian:
///
/// | field        | type            |
/// |--------------|-----------------|
/// | magic        | `b"DRENC\0\0\0"`|
/// | version      | u32 (= 1)       |
/// | n, d         | u64, u64        |
/// | H            | n·d f64, row-major |
/// | A            | n·n f64, row-major |
/// | entities     | u64             |
/// | per entity   | u64 count, then count × u64 rows |
pub fn save_encoding(path: &Path, enc: &EncodedDocument) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_encoding(&mut w, enc)?;
    w.flush()?;
    Ok(())
}

pub fn write_encoding(w: &mut impl Write, enc: &EncodedDocument) -> Result<()> {
    w.write_all(ENCODING_MAGIC)?;
    w.write_all(&ENCODING_VERSION.to_le_bytes())?;
    w.write_all(&(enc.len() as u64).to_le_bytes())?;
    w.write_all(&(enc.dim() as u64).to_le_bytes())?;
    for v in enc.h.as_slice().iter().chain(enc.a.as_slice()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(enc.mention_starts.len() as u64).to_le_bytes())?;
    for starts in &enc.mention_starts {
        w.write_all(&(starts.len() as u64).to_le_bytes())?;
        for &p in starts {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Read an encoding file without checking it against a document.
pub fn read_encoding(path: &Path) -> Result<EncodedDocument> {
    let fmt = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ENCODING_MAGIC {
        return Err(fmt("not an encoding file".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != ENCODING_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let h = Matrix::from_vec(n, d, read_f64s(&mut r, n * d)?);
    let mut a = Matrix::from_vec(n, n, read_f64s(&mut r, n * n)?);
    let entities = read_u64(&mut r)? as usize;
    let mut mention_starts = Vec::with_capacity(entities);
    for _ in 0..entities {
        let k = read_u64(&mut r)? as usize;
        mention_starts.push((0..k).map(|_| read_u64(&mut r).map(|p| p as usize)).collect::<std::io::Result<Vec<_>>>()?);
    }

    for i in 0..n {
        let row = a.row_mut(i);
        if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(fmt(format!("attention row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        let dev = (s - 1.0).abs();
        if dev > LOAD_STOCHASTIC_TOL {
            return Err(fmt(format!("attention row {i} sums to {s}, not 1")));
        }
        if dev > STOCHASTIC_TOL {
            for v in row {
                *v /= s;
            }
        }
    }
    let enc = EncodedDocument {
        h,
        a,
        mention_starts,
    };
    enc.validate(STOCHASTIC_TOL).map_err(|e| fmt(e.to_string()))?;
    Ok(enc)
}

/// Read an encoding and check it matches `doc` (length, mention table, and `dim` when given).
pub fn load_encoding(path: &Path, doc: &MarkedDocument<'_>, dim: Option<usize>) -> Result<EncodedDocument> {
    let enc = read_encoding(path)?;
    if enc.len() != doc.len() {
        return Err(Error::Dimension {
            what: format!(
                "token count of encoding {} vs document `{}`",
                path.display(),
                doc.doc.doc_id
            ),
            expected: doc.len(),
            found: enc.len(),
        });
    }
    if let Some(d) = dim {
        if enc.dim() != d {
            return Err(Error::Dimension {
                what: format!("embedding dimension of {}", path.display()),
                expected: d,
                found: enc.dim(),
            });
        }
    }
    if enc.mention_starts != doc.mention_starts {
        return Err(Error::Encoding(format!(
            "mention table of {} does not match document `{}`",
            path.display(),
            doc.doc.doc_id
        )));
    }
    Ok(enc)
}
