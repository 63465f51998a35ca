//! Binary checkpoints: model config, parameters and optional optimizer state.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` config length,
//! config JSON, `u64` parameter count, parameters as `f64`, `u8` optimizer
//! flag, then if set `u64` step followed by both moment vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::optim::AdamState;
use super::params::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"DRCKPT\0\0";
const VERSION: u32 = 1;

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, opt: Option<&AdamState>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    put_f64s(&mut w, &params.values)?;
    match opt {
        None => w.write_all(&[0])?,
        Some(st) => {
            w.write_all(&[1])?;
            w.write_all(&st.step.to_le_bytes())?;
            put_f64s(&mut w, &st.m)?;
            put_f64s(&mut w, &st.v)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bad(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.bad(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes(what)?))).collect()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<AdamState>)> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        path,
    };
    if &r.bytes::<8>("magic")? != MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.bytes("version")?);
    if version != VERSION {
        return Err(r.bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u64("config length")? as usize;
    if cfg_len > 1 << 20 {
        return Err(r.bad("config block too large"));
    }
    let mut cfg = vec![0u8; cfg_len];
    r.inner
        .read_exact(&mut cfg)
        .map_err(|_| r.bad("truncated while reading config"))?;
    let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| r.bad(format!("config: {e}")))?;
    let n = r.u64("parameter count")? as usize;
    let expected = super::params::ParamLayout::new(&config).total();
    if n != expected {
        return Err(r.bad(format!("{n} parameters stored, config needs {expected}")));
    }
    let values = r.f64s(n, "parameters")?;
    let params = ModelParams::from_values(config, values)?;
    let opt = match r.bytes::<1>("optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let m = r.f64s(n, "first moments")?;
            let v = r.f64s(n, "second moments")?;
            Some(AdamState { step, m, v })
        }
        f => return Err(r.bad(format!("bad optimizer flag {f}"))),
    };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(r.bad("trailing bytes"));
    }
    Ok((params, opt))
}
