use worldforge::sysid::{
    generate_rollouts, identify_params, train_surrogate, Identification, IdentifyConfig, ParamBox, PhysParams,
    SmoothTargets, SurrogateConfig, SurrogateModel,
};

pub const DT: f64 = 0.01;
pub const PLANTED: PhysParams = PhysParams::new(0.3, 12.0, 0.8);

pub fn trained_surrogate(seed: u64) -> SurrogateModel {
    let data = generate_rollouts(&ParamBox::desk(), 64, 200, DT, &SmoothTargets, seed).unwrap();
    train_surrogate(&data, SurrogateConfig { seed, ..SurrogateConfig::default() }).unwrap().0
}

pub struct Trial {
    pub identification: Identification,
    pub held_out_mse: [f64; 2],
}

/// Simulate 64 rollouts over the desk box, fit a surrogate, then recover
/// the planted parameters from one 500-step trajectory starting at the box
/// center.
pub fn pipeline_trial(seed: u64) -> Trial {
    let model = trained_surrogate(seed);
    let held = generate_rollouts(&ParamBox::desk(), 16, 200, DT, &SmoothTargets, seed + 100).unwrap();
    let point = ParamBox { lo: PLANTED, hi: PLANTED };
    let real = generate_rollouts(&point, 1, 500, DT, &SmoothTargets, seed + 200).unwrap().remove(0);
    let identification = identify_params(&model, &real, ParamBox::desk().center(), &IdentifyConfig::default()).unwrap();
    Trial { identification, held_out_mse: model.one_step_mse(&held).unwrap() }
}
