//! Demo file: the trajectory format with a trailing gripper column, after
//! a header of `# object <name> <12 pose values>` and
//! `# anchor <start> <end> <object>` lines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{ActgenError, Annotation, Demo, Result};
use crate::geometry::{ActionSequence, Pose};

pub fn write_demo<W: Write>(w: &mut W, demo: &Demo) -> Result<()> {
    for (name, p) in &demo.objects {
        write!(w, "# object {name}")?;
        for v in p.to_array12() {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    for a in &demo.annotations {
        writeln!(w, "# anchor {} {} {}", a.start, a.end, a.object)?;
    }
    for ((t, p), g) in demo.ee.timestamps().iter().zip(demo.ee.poses()).zip(&demo.gripper) {
        write!(w, "{t}")?;
        for v in p.to_array12() {
            write!(w, " {v}")?;
        }
        writeln!(w, " {g}")?;
    }
    Ok(())
}

pub fn read_demo<R: BufRead>(r: R) -> Result<Demo> {
    let mut objects = BTreeMap::new();
    let mut annotations = Vec::new();
    let (mut poses, mut stamps, mut gripper) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let err = |msg: String| ActgenError::Parse { line: i + 1, msg };
        let floats = |fields: &[&str]| -> Result<Vec<f64>> {
            fields.iter().map(|s| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")))).collect()
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let f: Vec<&str> = rest.split_whitespace().collect();
            match f.first() {
                Some(&"object") if f.len() == 14 => {
                    let v: [f64; 12] = floats(&f[2..])?.try_into().expect("length checked");
                    objects.insert(f[1].to_string(), Pose::from_array12(&v).map_err(|e| err(e.to_string()))?);
                }
                Some(&"anchor") if f.len() == 4 => {
                    let idx = |s: &str| s.parse::<usize>().map_err(|e| err(e.to_string()));
                    annotations.push(Annotation { start: idx(f[1])?, end: idx(f[2])?, object: f[3].to_string() });
                }
                Some(&"object") | Some(&"anchor") => return Err(err("malformed header line".into())),
                _ => {}
            }
            continue;
        }
        let v = floats(&line.split_whitespace().collect::<Vec<_>>())?;
        if v.len() != 14 {
            return Err(err(format!("expected 14 values, got {}", v.len())));
        }
        let arr: [f64; 12] = v[1..13].try_into().expect("length checked");
        poses.push(Pose::from_array12(&arr).map_err(|e| err(e.to_string()))?);
        stamps.push(v[0]);
        gripper.push(v[13]);
    }
    Demo::new(ActionSequence::new(poses, stamps)?, gripper, objects, annotations)
}
