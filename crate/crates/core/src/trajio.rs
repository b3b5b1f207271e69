//! Binary trajectory files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "WPTRAJ1"                      7 bytes
//! N, N_b, C_p, C_b, W_total, E   u32 each
//! dt                             f64
//! X0                             f32[N*3]   (zeros when there is no topology)
//! C                              f32[N*C_p]
//! boundary positions             f32[N_b*3]
//! boundary attributes            f32[N_b*C_b]
//! edges                          u32[E*2]
//! per frame: X, V, F             f32[N*3] each
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::state::{BoundarySet, Frame, Topology, Trajectory, Vec3};

pub const TRAJ_MAGIC: &[u8; 7] = b"WPTRAJ1";

pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&encode_trajectory(traj)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?)
    .read_to_end(&mut bytes)
    .map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_trajectory(&bytes, path)
}

pub fn encode_trajectory(traj: &Trajectory) -> Vec<u8> {
    let n = traj.particle_count();
    let b = traj.boundary();
    let mut out = Vec::new();
    out.extend_from_slice(TRAJ_MAGIC);
    for v in [
        n,
        b.len(),
        traj.attribute_channels(),
        b.channels(),
        traj.frame_count(),
        traj.topology().edges().len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&traj.dt().to_le_bytes());
    let put3 = |out: &mut Vec<u8>, v: &[Vec3]| {
        for p in v {
            for c in p {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
    };
    match traj.rest_positions() {
        Some(rest) => put3(&mut out, rest),
        None => put3(&mut out, &vec![[0.0; 3]; n]),
    }
    for a in traj.attributes() {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
    }
    put3(&mut out, b.positions());
    for a in b.attributes() {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
    }
    for &(i, j) in traj.topology().edges() {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&j.to_le_bytes());
    }
    for f in traj.frames() {
        put3(&mut out, &f.positions);
        put3(&mut out, &f.velocities);
        put3(&mut out, &f.forces);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err(
                field,
                format!(
                    "truncated: need {len} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f64>> {
        let raw = self.take(count * 4, field)?;
        let mut out = Vec::with_capacity(count);
        for c in raw.chunks_exact(4) {
            let x = f32::from_le_bytes(c.try_into().unwrap());
            if !x.is_finite() {
                return Err(self.err(field, "non-finite value"));
            }
            out.push(x as f64);
        }
        Ok(out)
    }

    fn vec3s(&mut self, count: usize, field: &str) -> Result<Vec<Vec3>> {
        Ok(self
            .f32s(count * 3, field)?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }
}

pub fn decode_trajectory(bytes: &[u8], path: &Path) -> Result<Trajectory> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(7, "header")? != TRAJ_MAGIC {
        return Err(r.err("header", "bad magic"));
    }
    let n = r.u32("header")? as usize;
    let nb = r.u32("header")? as usize;
    let cp = r.u32("header")? as usize;
    let cb = r.u32("header")? as usize;
    let frames = r.u32("header")? as usize;
    let ne = r.u32("header")? as usize;
    let dt = f64::from_le_bytes(r.take(8, "header")?.try_into().unwrap());
    if n == 0 {
        return Err(r.err("header", "particle count is zero"));
    }
    if frames == 0 {
        return Err(r.err("header", "frame count is zero"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(r.err("dt", format!("must be positive and finite, got {dt}")));
    }
    let expected =
        7 + 6 * 4 + 8 + 4 * (n * 3 + n * cp + nb * 3 + nb * cb + ne * 2 + frames * n * 9);
    if bytes.len() != expected {
        let field = if bytes.len() < expected {
            "payload (truncated)"
        } else {
            "payload (trailing bytes)"
        };
        return Err(r.err(
            field,
            format!("header declares {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let rest = r.vec3s(n, "rest positions")?;
    let attrs = r.f32s(n * cp, "attributes")?;
    let bpos = r.vec3s(nb, "boundary positions")?;
    let battr = r.f32s(nb * cb, "boundary attributes")?;
    let mut edges = Vec::with_capacity(ne);
    for _ in 0..ne {
        let i = r.u32("edges")?;
        let j = r.u32("edges")?;
        edges.push((i, j));
    }
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let positions = r.vec3s(n, &format!("frame {k} positions"))?;
        let velocities = r.vec3s(n, &format!("frame {k} velocities"))?;
        let forces = r.vec3s(n, &format!("frame {k} forces"))?;
        out.push(Frame {
            positions,
            velocities,
            forces,
        });
    }
    let topology = Topology::new(edges, n).map_err(|e| r.err("edges", e.to_string()))?;
    let boundary =
        BoundarySet::new(bpos, battr, cb).map_err(|e| r.err("boundary", e.to_string()))?;
    let rest = if topology.is_empty() {
        None
    } else {
        Some(rest)
    };
    Trajectory::new(dt, out, attrs, cp, rest, boundary, topology)
        .map_err(|e| r.err("trajectory", e.to_string()))
}
