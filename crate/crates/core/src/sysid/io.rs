use std::io::{BufRead, Write};

use super::{JointState, PhysParams, Result, Rollout, SysidError};

/// Header `# f p d dt`, then one `t theta omega a` line per action and a
/// final `T theta omega` line for the last state.
pub fn write_rollout<W: Write>(w: &mut W, r: &Rollout) -> Result<()> {
    r.check()?;
    writeln!(w, "# {:?} {:?} {:?} {:?}", r.params.f, r.params.p, r.params.d, r.dt)?;
    for (t, s) in r.states.iter().enumerate() {
        match r.actions.get(t) {
            Some(a) => writeln!(w, "{t} {:?} {:?} {a:?}", s.theta, s.omega)?,
            None => writeln!(w, "{t} {:?} {:?}", s.theta, s.omega)?,
        }
    }
    Ok(())
}

pub fn read_rollout<R: BufRead>(r: R) -> Result<Rollout> {
    let mut header = None;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut done = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let err = |msg: String| SysidError::Parse { line: i + 1, msg };
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace().map(|v| v.parse().map_err(|e| err(format!("{v:?}: {e}")))).collect()
        };
        if let Some(h) = line.trim().strip_prefix('#') {
            if header.is_none() {
                let v = nums(h)?;
                if v.len() != 4 {
                    return Err(err("header needs f p d dt".into()));
                }
                header = Some(v);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if done {
            return Err(err("record after final state".into()));
        }
        let v = nums(&line)?;
        if v[0] as usize != states.len() {
            return Err(err(format!("expected step {}", states.len())));
        }
        match v.len() {
            4 => actions.push(v[3]),
            3 => done = true,
            n => return Err(err(format!("expected 3 or 4 fields, got {n}"))),
        }
        states.push(JointState::new(v[1], v[2]));
    }
    let h = header.ok_or(SysidError::Parse { line: 0, msg: "missing header".into() })?;
    let r = Rollout { states, actions, params: PhysParams::new(h[0], h[1], h[2]), dt: h[3] };
    r.check()?;
    Ok(r)
}
