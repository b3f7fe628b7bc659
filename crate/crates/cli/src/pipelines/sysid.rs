//! Three-stage identification: simulate rollouts over the parameter box,
//! fit the differentiable surrogate, then recover the parameters of one
//! observed trajectory.

use serde_json::json;
use worldforge::sysid::{
    generate_rollouts, identify_params, read_rollout, train_surrogate, write_rollout, ParamBox, SmoothTargets,
    SurrogateConfig,
};

use crate::manifest::PipelineManifest;
use crate::{Result, Staging, StageExt};

fn curve_csv(header: &str, xs: &[f64]) -> String {
    let mut s = format!("step,{header}\n");
    for (i, v) in xs.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

pub fn run(m: &PipelineManifest, out: &mut Staging) -> Result<serde_json::Value> {
    let cfg = &m.config.sysid;
    let rollouts = generate_rollouts(&cfg.param_box, cfg.rollouts, cfg.horizon, cfg.dt, &SmoothTargets, m.seed)
        .stage("simulate")?;
    let sc = SurrogateConfig { param_box: cfg.param_box, seed: m.seed, ..cfg.surrogate.clone() };
    let (model, train_curve) = train_surrogate(&rollouts, sc).stage("surrogate")?;
    let held = generate_rollouts(&cfg.param_box, cfg.held_out, cfg.horizon, cfg.dt, &SmoothTargets, m.seed + 100)
        .stage("surrogate")?;
    let mse = model.one_step_mse(&held).stage("surrogate")?;

    let (real, planted) = match m.inputs.get("real") {
        Some(p) => {
            let r = read_rollout(std::io::BufReader::new(std::fs::File::open(p)?)).stage("load")?;
            let planted = r.params;
            (r, planted)
        }
        None => {
            let point = ParamBox { lo: cfg.planted, hi: cfg.planted };
            let r = generate_rollouts(&point, 1, cfg.real_horizon, cfg.dt, &SmoothTargets, m.seed + 200)
                .stage("simulate")?
                .remove(0);
            (r, cfg.planted)
        }
    };
    let id = identify_params(&model, &real, cfg.param_box.center(), &cfg.identify).stage("identify")?;
    let rel = id.params.relative_error(&planted);
    let within = rel.iter().all(|e| *e <= cfg.tolerance);

    out.with_writer("observed_rollout.txt", |w| write_rollout(w, &real).stage("write"))?;
    out.write("surrogate_curve.csv", curve_csv("loss", &train_curve).as_bytes())?;
    out.write("identify_curve.csv", curve_csv("loss", &id.loss_curve).as_bytes())?;
    let report = json!({
        "reference": planted,
        "estimate": id.params,
        "relative_error": rel,
        "tolerance": cfg.tolerance,
        "within_tolerance": within,
        "surrogate_one_step_mse": { "theta": mse[0], "omega": mse[1] },
        "identify_iterations": id.loss_curve.len(),
    });
    out.write_json("report.json", &report)?;
    Ok(report)
}
