use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IdmError, JointTrajectory, RenderedSample, Result};
use crate::latent::{read_video_dir, write_video_dir, VideoTensor};

/// One line per step: `index v_1 ... v_D`.
pub fn write_joint_trajectory<W: Write>(w: &mut W, traj: &JointTrajectory) -> Result<()> {
    for t in 0..traj.steps {
        write!(w, "{t}")?;
        for v in traj.at(t) {
            write!(w, " {v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_joint_trajectory<R: BufRead>(r: R) -> Result<JointTrajectory> {
    let mut data = Vec::new();
    let mut dofs = None;
    let mut steps = 0;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .skip(1)
            .map(|s| s.parse().map_err(|e| IdmError::Io(format!("line {}: {e}", n + 1))))
            .collect::<Result<_>>()?;
        if *dofs.get_or_insert(vals.len()) != vals.len() {
            return Err(IdmError::Io(format!("line {}: expected {} values", n + 1, dofs.unwrap())));
        }
        data.extend(vals);
        steps += 1;
    }
    JointTrajectory::new(steps, dofs.unwrap_or(0), data)
}

#[derive(Serialize, Deserialize)]
struct Record {
    frames: PathBuf,
    masks: PathBuf,
    trajectory: PathBuf,
}

/// Writes `sample_NNNN/{frames,masks,trajectory.txt}` under `dir` and a
/// `manifest.jsonl` with one relative-path record per sample.
pub fn write_dataset(dir: &Path, samples: &[RenderedSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.jsonl");
    let mut m = fs::File::create(&manifest)?;
    for (i, s) in samples.iter().enumerate() {
        let base = PathBuf::from(format!("sample_{i:04}"));
        let rec = Record { frames: base.join("frames"), masks: base.join("masks"), trajectory: base.join("trajectory.txt") };
        write_video_dir(&dir.join(&rec.frames), &s.frames)?;
        let f = &s.frames;
        let mask = VideoTensor::new(f.frames, f.height, f.width, 1, s.masks.iter().map(|&b| b as u8 as f64).collect())?;
        write_video_dir(&dir.join(&rec.masks), &mask)?;
        let mut t = std::io::BufWriter::new(fs::File::create(dir.join(&rec.trajectory))?);
        write_joint_trajectory(&mut t, &s.trajectory)?;
        t.flush()?;
        writeln!(m, "{}", serde_json::to_string(&rec).expect("serializable"))?;
    }
    Ok(manifest)
}

/// Reads a manifest written by [`write_dataset`]; paths resolve relative to
/// the manifest's directory.
pub fn read_dataset(manifest: &Path) -> Result<Vec<RenderedSample>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(manifest)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| IdmError::Io(format!("manifest line {}: {e}", n + 1)))?;
        let frames = read_video_dir(&root.join(&rec.frames))?;
        let mask = read_video_dir(&root.join(&rec.masks))?;
        let trajectory = read_joint_trajectory(BufReader::new(fs::File::open(root.join(&rec.trajectory))?))?;
        if mask.dims() != [frames.frames, frames.height, frames.width, 1] || trajectory.steps != frames.frames {
            return Err(IdmError::ShapeMismatch(format!("manifest line {}: frames, masks and trajectory disagree", n + 1)));
        }
        let masks: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
        let hw = frames.height * frames.width;
        let out_of_frame = (0..frames.frames).filter(|t| !masks[t * hw..(t + 1) * hw].contains(&true)).collect();
        out.push(RenderedSample { frames, masks, trajectory, out_of_frame });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idm::{desk_camera, synthetic_dataset, ArmModel};
    use crate::rng::substream;

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synthetic_dataset(&mut substream(1, "io"), &ArmModel::desk(), &desk_camera(), 2, 3, true).unwrap();
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.trajectory, b.trajectory);
            for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ragged_trajectory_rejected() {
        assert!(read_joint_trajectory("0 1 2\n1 3\n".as_bytes()).is_err());
    }
}
