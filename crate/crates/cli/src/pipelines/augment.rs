//! Object-pose sweep over one seed demonstration, with every retargeted
//! demo checked for stitching jumps and workspace exits.

use std::collections::BTreeMap;

use serde_json::json;
use worldforge::actgen::{
    augment_sweep, read_demo, stitch_validate, write_demo, DemoPolicy, ScriptedPickPlace, StitchLimits, Workspace,
};
use worldforge::geometry::Pose;
use worldforge::rng::substream;

use crate::manifest::PipelineManifest;
use crate::{Result, Staging, StageExt};

pub fn run(m: &PipelineManifest, out: &mut Staging) -> Result<serde_json::Value> {
    let cfg = &m.config.actgen;
    let demo = match m.inputs.get("demo") {
        Some(p) => read_demo(std::io::BufReader::new(std::fs::File::open(p)?)).stage("load")?,
        None => {
            let [x, y, z] = cfg.object_position;
            let scene = BTreeMap::from([(cfg.object.clone(), Pose::from_translation(x, y, z))]);
            ScriptedPickPlace::desk(&cfg.object).demonstrate(&scene).stage("demonstrate")?
        }
    };
    let limits = StitchLimits {
        max_step: cfg.max_step,
        max_rot_step: cfg.max_rot_step,
        workspace: Workspace { min: cfg.workspace_min, max: cfg.workspace_max },
    };
    let variants = augment_sweep(
        &demo,
        &cfg.object,
        cfg.variants,
        cfg.max_offset,
        cfg.max_yaw,
        &mut substream(m.seed, "augment.sweep"),
    )
    .stage("retarget")?;

    out.with_writer("demos/seed.txt", |w| write_demo(w, &demo).stage("write"))?;
    let mut csv = String::from("id,object_x,object_y,max_translation_step,max_rotation_step,ee_outside,pass\n");
    let mut accepted = String::new();
    let mut records = Vec::new();
    for (i, (spec, d)) in variants.iter().enumerate() {
        let id = format!("variant_{i:03}");
        let report = stitch_validate(d, &limits);
        let new = spec.objects[&cfg.object].new;
        let t = new.translation();
        csv.push_str(&format!(
            "{id},{},{},{},{},{},{}\n",
            t[0], t[1], report.max_translation_step, report.max_rotation_step, report.ee_outside, report.pass
        ));
        if report.pass {
            accepted.push_str(&format!("{id}\n"));
        }
        out.with_writer(&format!("demos/{id}.txt"), |w| write_demo(w, d).stage("write"))?;
        records.push(json!({ "id": id, "object_pose": new.to_array12(), "stitch": report }));
    }
    out.write("stitch.csv", csv.as_bytes())?;
    out.write("accepted.txt", accepted.as_bytes())?;
    out.write_json("variants.json", &records)?;
    let passed = records.iter().filter(|r| r["stitch"]["pass"] == true).count();
    Ok(json!({ "variants": variants.len(), "accepted": passed, "demo_steps": demo.len() }))
}
