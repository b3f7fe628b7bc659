//! Trajectory and depth-map files.
//!
//! Trajectory: one record per line, `timestamp r00 r01 r02 r10 r11 r12 r20
//! r21 r22 tx ty tz`, whitespace separated; blank lines and `#` comments
//! are ignored.
//!
//! Depth: the 8-byte magic `WFDEPTH1`, width and height as little-endian
//! `u64`, `width * height` little-endian `f32` depths, then one validity
//! byte per pixel.

use std::io::{BufRead, Read, Write};

use super::{ActionSequence, DepthMap, GeometryError, Pose, Result};

const DEPTH_MAGIC: &[u8; 8] = b"WFDEPTH1";

pub fn write_trajectory<W: Write>(w: &mut W, seq: &ActionSequence) -> Result<()> {
    for (t, p) in seq.timestamps().iter().zip(seq.poses()) {
        write!(w, "{t}")?;
        for v in p.to_array12() {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(r: R) -> Result<ActionSequence> {
    let mut poses = Vec::new();
    let mut stamps = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GeometryError::Parse { line: i + 1, msg: e.to_string() })?;
        if vals.len() != 13 {
            return Err(GeometryError::Parse { line: i + 1, msg: format!("expected 13 values, got {}", vals.len()) });
        }
        let arr: [f64; 12] = vals[1..].try_into().expect("length checked");
        let pose = Pose::from_array12(&arr).map_err(|e| GeometryError::Parse { line: i + 1, msg: e.to_string() })?;
        stamps.push(vals[0]);
        poses.push(pose);
    }
    ActionSequence::new(poses, stamps)
}

pub fn write_depth<W: Write>(w: &mut W, d: &DepthMap) -> Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(d.width as u64).to_le_bytes())?;
    w.write_all(&(d.height as u64).to_le_bytes())?;
    for &v in d.depths() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    let flags: Vec<u8> = d.valid().iter().map(|&v| v as u8).collect();
    w.write_all(&flags)?;
    Ok(())
}

pub fn read_depth<R: Read>(r: &mut R) -> Result<DepthMap> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DEPTH_MAGIC {
        return Err(GeometryError::Parse { line: 0, msg: "not a depth file".into() });
    }
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let width = u64::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let height = u64::from_le_bytes(b) as usize;
    let n = width.checked_mul(height).filter(|&n| n < (1 << 32)).ok_or_else(|| GeometryError::Parse {
        line: 0,
        msg: format!("implausible size {width}x{height}"),
    })?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let depth = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let mut flags = vec![0u8; n];
    r.read_exact(&mut flags)?;
    DepthMap::with_mask(width, height, depth, flags.iter().map(|&f| f != 0).collect())
}
