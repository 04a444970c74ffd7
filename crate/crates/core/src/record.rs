//! Flat binary records (little-endian) for noise paths and trajectories, so
//! experiments are replayable bit-exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::noise::{Grid, NoisePath};
use crate::sim::Trajectory;

const MAGIC: &[u8; 6] = b"SFREC\0";
const VERSION: u16 = 1;
const KIND_NOISE: u32 = 1;
const KIND_TRAJECTORY: u32 = 2;

fn write_header<W: Write>(w: &mut W, kind: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&kind.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<u32> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != VERSION {
        return Err(Error::Format("unsupported record version".into()));
    }
    let mut k = [0u8; 4];
    r.read_exact(&mut k)?;
    Ok(u32::from_le_bytes(k))
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_i64<W: Write>(w: &mut W, v: i64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        write_f64(w, *v)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64<R: Read>(r: &mut R) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

pub fn write_noise_path<W: Write>(w: &mut W, p: &NoisePath) -> Result<()> {
    write_header(w, KIND_NOISE)?;
    write_f64(w, p.grid.dt)?;
    write_i64(w, p.grid.k_min)?;
    write_i64(w, p.grid.k_max)?;
    write_u64(w, p.dim1 as u64)?;
    write_u64(w, p.dim2 as u64)?;
    write_u64(w, p.dim3 as u64)?;
    write_u64(w, p.seed)?;
    write_u64(w, p.stream_id)?;
    write_f64s(w, &p.inc1)?;
    write_f64s(w, &p.inc2)?;
    write_f64s(w, &p.inc3)?;
    Ok(())
}

pub fn read_noise_path<R: Read>(r: &mut R) -> Result<NoisePath> {
    if read_header(r)? != KIND_NOISE {
        return Err(Error::Format("not a noise record".into()));
    }
    let dt = read_f64(r)?;
    let k_min = read_i64(r)?;
    let k_max = read_i64(r)?;
    let grid = Grid { dt, k_min, k_max };
    if !(dt > 0.0) || k_min > 0 && k_max < 0 || k_min >= k_max {
        return Err(Error::Format("bad grid".into()));
    }
    let dim1 = read_u64(r)? as usize;
    let dim2 = read_u64(r)? as usize;
    let dim3 = read_u64(r)? as usize;
    let seed = read_u64(r)?;
    let stream_id = read_u64(r)?;
    let n = grid.n_cells();
    let n3 = grid.k_max.max(0) as usize;
    let inc1 = read_f64s(r, n * dim1)?;
    let inc2 = read_f64s(r, n * dim2)?;
    let inc3 = read_f64s(r, n3 * dim3)?;
    Ok(NoisePath {
        grid,
        dim1,
        dim2,
        dim3,
        seed,
        stream_id,
        inc1,
        inc2,
        inc3,
    })
}

pub fn write_trajectory<W: Write>(w: &mut W, t: &Trajectory) -> Result<()> {
    write_header(w, KIND_TRAJECTORY)?;
    write_f64(w, t.dt)?;
    write_i64(w, t.start_cell)?;
    write_u64(w, t.n_points() as u64)?;
    write_u64(w, t.dim1 as u64)?;
    write_u64(w, t.dim2 as u64)?;
    write_u64(w, t.path_seed)?;
    write_u64(w, t.path_stream)?;
    write_f64s(w, &t.xs)?;
    write_f64s(w, &t.ys)?;
    Ok(())
}

pub fn read_trajectory<R: Read>(r: &mut R) -> Result<Trajectory> {
    if read_header(r)? != KIND_TRAJECTORY {
        return Err(Error::Format("not a trajectory record".into()));
    }
    let dt = read_f64(r)?;
    let start_cell = read_i64(r)?;
    let n = read_u64(r)? as usize;
    let dim1 = read_u64(r)? as usize;
    let dim2 = read_u64(r)? as usize;
    let path_seed = read_u64(r)?;
    let path_stream = read_u64(r)?;
    let xs = read_f64s(r, n * dim1)?;
    let ys = read_f64s(r, n * dim2)?;
    Ok(Trajectory {
        dt,
        start_cell,
        dim1,
        dim2,
        xs,
        ys,
        path_seed,
        path_stream,
    })
}
