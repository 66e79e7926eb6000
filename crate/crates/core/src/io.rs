//! Binary formats.
//!
//! Head checkpoint (`RFHD`), little-endian:
//!
//! ```text
//! magic "RFHD" | version u32 | d_in u64 | classes u64 | embed_dim u64
//! | bn_eps f64 | bn_momentum f64
//! | fc1_weight | fc1_bias | bn_gamma | bn_beta | bn_running_mean
//! | bn_running_var | classifier_weight | classifier_bias        (all f64, row-major)
//! ```
//!
//! Embedding file (`RFEB`), little-endian:
//!
//! ```text
//! magic "RFEB" | version u32 | count u64 | dim u64 | flags u32 (bit 0: normalized)
//! | count * dim f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::embedhead::HeadParameters;
use crate::error::{Error, Result};
use crate::{EMBEDDING_FORMAT_MAGIC, EMBEDDING_FORMAT_VERSION, HEAD_FORMAT_MAGIC, HEAD_FORMAT_VERSION};

const FLAG_NORMALIZED: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_f64s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn check_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
}

pub fn write_head(w: &mut impl Write, p: &HeadParameters) -> Result<()> {
    w.write_all(HEAD_FORMAT_MAGIC)?;
    w.write_all(&HEAD_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(p.input_dim() as u64).to_le_bytes())?;
    w.write_all(&(p.num_classes() as u64).to_le_bytes())?;
    w.write_all(&(p.embed_dim() as u64).to_le_bytes())?;
    write_f64s(w, [&p.bn_eps, &p.bn_momentum])?;
    write_f64s(w, p.fc1_weight.iter())?;
    write_f64s(w, p.fc1_bias.iter())?;
    write_f64s(w, p.bn_gamma.iter())?;
    write_f64s(w, p.bn_beta.iter())?;
    write_f64s(w, p.bn_running_mean.iter())?;
    write_f64s(w, p.bn_running_var.iter())?;
    write_f64s(w, p.classifier_weight.iter())?;
    write_f64s(w, p.classifier_bias.iter())?;
    Ok(())
}

pub fn read_head(r: &mut impl Read) -> Result<HeadParameters> {
    check_magic(r, HEAD_FORMAT_MAGIC)?;
    let version = read_u32(r)?;
    if version != HEAD_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported RFHD version {version}")));
    }
    let d_in = to_usize(read_u64(r)?, "d_in")?;
    let c = to_usize(read_u64(r)?, "class count")?;
    let h = to_usize(read_u64(r)?, "embed_dim")?;
    let hdr = read_f64s(r, 2)?;
    let mat = |r: &mut dyn Read, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut r = r;
        Ok(Array2::from_shape_vec((rows, cols), read_f64s(&mut r, rows * cols)?).unwrap())
    };
    let vec = |r: &mut dyn Read, n: usize| -> Result<Array1<f64>> {
        let mut r = r;
        Ok(Array1::from(read_f64s(&mut r, n)?))
    };
    let fc1_weight = mat(r, d_in, h)?;
    let fc1_bias = vec(r, h)?;
    let bn_gamma = vec(r, h)?;
    let bn_beta = vec(r, h)?;
    let bn_running_mean = vec(r, h)?;
    let bn_running_var = vec(r, h)?;
    let classifier_weight = mat(r, h, c)?;
    let classifier_bias = vec(r, c)?;
    HeadParameters::from_parts(
        fc1_weight,
        fc1_bias,
        bn_gamma,
        bn_beta,
        bn_running_mean,
        bn_running_var,
        classifier_weight,
        classifier_bias,
        hdr[0],
        hdr[1],
    )
}

pub fn save_head(path: impl AsRef<Path>, p: &HeadParameters) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_head(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_head(path: impl AsRef<Path>) -> Result<HeadParameters> {
    read_head(&mut BufReader::new(File::open(path)?))
}

/// Decoded contents of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddings {
    pub count: usize,
    pub dim: usize,
    pub normalized: bool,
    pub data: Vec<f32>,
}

impl RawEmbeddings {
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.count)
    }
}

pub fn write_embeddings(w: &mut impl Write, e: &RawEmbeddings) -> Result<()> {
    if e.data.len() != e.count * e.dim {
        return Err(Error::Dimension {
            expected: e.count * e.dim,
            got: e.data.len(),
            context: "embedding payload",
        });
    }
    w.write_all(EMBEDDING_FORMAT_MAGIC)?;
    w.write_all(&EMBEDDING_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(e.count as u64).to_le_bytes())?;
    w.write_all(&(e.dim as u64).to_le_bytes())?;
    let flags = if e.normalized { FLAG_NORMALIZED } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for v in &e.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<RawEmbeddings> {
    check_magic(r, EMBEDDING_FORMAT_MAGIC)?;
    let version = read_u32(r)?;
    if version != EMBEDDING_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported RFEB version {version}")));
    }
    let count = to_usize(read_u64(r)?, "count")?;
    let dim = to_usize(read_u64(r)?, "dim")?;
    let flags = read_u32(r)?;
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("embedding size overflows".into()))?;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawEmbeddings {
        count,
        dim,
        normalized: flags & FLAG_NORMALIZED != 0,
        data,
    })
}

pub fn save_embeddings(path: impl AsRef<Path>, e: &RawEmbeddings) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, e)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<RawEmbeddings> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}
