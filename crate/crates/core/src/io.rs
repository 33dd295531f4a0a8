//! Little-endian binary files.
//!
//! | ext     | layout                                                                   |
//! |---------|--------------------------------------------------------------------------|
//! | `.nmdm` | `NMDM`, version, rows, cols, `rows*cols` f32                             |
//! | `.nms`  | `NMSP`, version, k, n, N, M, L, `w*n` f32 values, `w*q` u8 indices       |
//! | `.nmp`  | `NMPK`, version, N, M, L, w, q, k_s, w_s, q_s, panels, block cols, then per block: c, `c` u32 col_info, `rows*groups` u16 remapped |
//!
//! All header integers are `u32`. Blocks of `.nmp` are panel-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{validate, NmCompressed, NmConfig};
use crate::matrix::DenseMatrix;
use crate::packing::{PackBlock, PackLayout, PackPlan};

pub const DENSE_MAGIC: &[u8; 4] = b"NMDM";
pub const COMPRESSED_MAGIC: &[u8; 4] = b"NMSP";
pub const PACK_MAGIC: &[u8; 4] = b"NMPK";
pub const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, vals: &[f32]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(())
}

pub fn write_dense<W: Write>(w: &mut W, m: &DenseMatrix) -> Result<()> {
    w.write_all(DENSE_MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, m.rows())?;
    put_u32(w, m.cols())?;
    put_f32s(w, m.as_slice())
}

pub fn read_dense<R: Read>(r: &mut R) -> Result<DenseMatrix> {
    header(r, DENSE_MAGIC)?;
    let rows = get_u32(r)?;
    let cols = get_u32(r)?;
    let data = get_f32s(r, rows * cols)?;
    expect_eof(r)?;
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn write_compressed<W: Write>(w: &mut W, bc: &NmCompressed) -> Result<()> {
    let c = bc.config();
    w.write_all(COMPRESSED_MAGIC)?;
    for v in [VERSION as usize, bc.k_orig(), bc.n_cols(), c.n_keep(), c.m_window(), c.vector_len()] {
        put_u32(w, v)?;
    }
    put_f32s(w, bc.values())?;
    w.write_all(bc.indices())?;
    Ok(())
}

/// Reads and validates a compressed matrix.
pub fn read_compressed<R: Read>(r: &mut R) -> Result<NmCompressed> {
    header(r, COMPRESSED_MAGIC)?;
    let k = get_u32(r)?;
    let n = get_u32(r)?;
    let config = NmConfig::new(get_u32(r)?, get_u32(r)?, get_u32(r)?)?;
    if k % config.m_window() != 0 || n % config.vector_len() != 0 {
        return Err(Error::Format(format!("{k}x{n} not divisible by {config}")));
    }
    let w = config.compressed_rows(k);
    let q = n / config.vector_len();
    let values = get_f32s(r, w * n)?;
    let mut indices = vec![0u8; w * q];
    r.read_exact(&mut indices)?;
    expect_eof(r)?;
    let bc = NmCompressed::from_parts(config, k, n, values, indices)?;
    if let Some(v) = validate(&bc).first() {
        return Err(Error::Format(format!("invalid compressed matrix: {v}")));
    }
    Ok(bc)
}

pub fn write_pack<W: Write>(w: &mut W, pack: &PackPlan) -> Result<()> {
    let l = &pack.layout;
    w.write_all(PACK_MAGIC)?;
    for v in [
        VERSION as usize,
        l.config.n_keep(),
        l.config.m_window(),
        l.config.vector_len(),
        l.w,
        l.q,
        l.k_s,
        l.w_s,
        l.q_s,
        l.n_panels,
        l.n_block_cols,
    ] {
        put_u32(w, v)?;
    }
    for b in &pack.blocks {
        put_u32(w, b.col_info.len())?;
        for &c in &b.col_info {
            w.write_all(&c.to_le_bytes())?;
        }
        for &x in &b.remapped {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pack<R: Read>(r: &mut R) -> Result<PackPlan> {
    header(r, PACK_MAGIC)?;
    let config = NmConfig::new(get_u32(r)?, get_u32(r)?, get_u32(r)?)?;
    let layout = PackLayout {
        config,
        w: get_u32(r)?,
        q: get_u32(r)?,
        k_s: get_u32(r)?,
        w_s: get_u32(r)?,
        q_s: get_u32(r)?,
        n_panels: get_u32(r)?,
        n_block_cols: get_u32(r)?,
    };
    if layout.w_s == 0
        || layout.q_s == 0
        || layout.n_panels != layout.w.div_ceil(layout.w_s)
        || layout.n_block_cols != layout.q.div_ceil(layout.q_s)
    {
        return Err(Error::Format(format!("inconsistent pack layout {layout:?}")));
    }
    let mut blocks = Vec::with_capacity(layout.n_blocks());
    for b in 0..layout.n_blocks() {
        let (panel, block_col) = (b / layout.n_block_cols, b % layout.n_block_cols);
        let (u0, u1) = layout.panel_rows(panel);
        let (g0, g1) = layout.block_groups(block_col);
        let (rows, groups) = (u1 - u0, g1 - g0);
        let c = get_u32(r)?;
        if c > layout.k_s {
            return Err(Error::Format(format!("block {b}: c={c} exceeds k_s")));
        }
        let mut col_info = Vec::with_capacity(c);
        for _ in 0..c {
            col_info.push(get_u32(r)? as u32);
        }
        let base = layout.panel_k_base(panel) as u32;
        let sorted = col_info.windows(2).all(|p| p[0] < p[1]);
        let in_panel = col_info
            .iter()
            .all(|&x| x >= base && x < base + layout.k_s as u32);
        if !sorted || !in_panel {
            return Err(Error::Format(format!("block {b}: malformed col_info")));
        }
        let mut raw = vec![0u8; rows * groups * 2];
        r.read_exact(&mut raw)?;
        let remapped: Vec<u16> = raw
            .chunks_exact(2)
            .map(|x| u16::from_le_bytes([x[0], x[1]]))
            .collect();
        if remapped.iter().any(|&x| x as usize >= c) {
            return Err(Error::Format(format!("block {b}: remapped index out of range")));
        }
        blocks.push(PackBlock {
            col_info,
            remapped,
            rows,
            groups,
        });
    }
    expect_eof(r)?;
    Ok(PackPlan { layout, blocks })
}

pub fn save_dense(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dense(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    read_dense(&mut BufReader::new(File::open(path)?))
}

pub fn save_compressed(path: impl AsRef<Path>, bc: &NmCompressed) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_compressed(&mut w, bc)?;
    w.flush()?;
    Ok(())
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<NmCompressed> {
    read_compressed(&mut BufReader::new(File::open(path)?))
}

pub fn save_pack(path: impl AsRef<Path>, pack: &PackPlan) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pack(&mut w, pack)?;
    w.flush()?;
    Ok(())
}

pub fn load_pack(path: impl AsRef<Path>) -> Result<PackPlan> {
    read_pack(&mut BufReader::new(File::open(path)?))
}
