//! Pipeline manifests: which pipeline to run, its inputs, output directory,
//! seed and per-module configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use worldforge::gate::GateConfig;
use worldforge::sysid::{IdentifyConfig, ParamBox, PhysParams, SurrogateConfig};

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Dream,
    Viewpair,
    Mimicpair,
    Sysid,
    Augment,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Dream => "dream",
            Pipeline::Viewpair => "viewpair",
            Pipeline::Mimicpair => "mimicpair",
            Pipeline::Sysid => "sysid",
            Pipeline::Augment => "augment",
        }
    }

    /// Input keys the pipeline understands.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Pipeline::Dream => &[],
            Pipeline::Viewpair => &["trajectory"],
            Pipeline::Mimicpair => &["frames", "masks", "annotations"],
            Pipeline::Sysid => &["real"],
            Pipeline::Augment => &["demo"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreamConfig {
    /// Rendered arm clips the dreamer and the labeller train on.
    pub clips: usize,
    /// Frames per clip (must be 1 mod 2 for the desk codec).
    pub frames: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub samples: usize,
    pub sample_steps: usize,
    pub prompt: String,
    /// Task metadata the alignment scorer compares the prompt against.
    pub task: String,
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            clips: 32,
            frames: 5,
            train_steps: 200,
            batch: 4,
            lr: 3e-3,
            samples: 4,
            sample_steps: 8,
            prompt: "robot arm reaches across the desk".into(),
            task: "move the robot arm across the desk".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// In-plane base relocation `[dx, dy, yaw]`.
    pub relocation: [f64; 3],
    pub background_depth: f64,
    pub frames: usize,
    pub frame_dt: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { relocation: [0.1, -0.05, 0.1], background_depth: 6.0, frames: 9, frame_dt: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmPreset {
    Desk,
    FourteenDof,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmStageConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Target arm for mimic pairs.
    pub target_arm: ArmPreset,
}

impl Default for IdmStageConfig {
    fn default() -> Self {
        Self { epochs: 4, batch: 4, lr: 3e-3, target_arm: ArmPreset::Desk }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidStageConfig {
    pub planted: PhysParams,
    pub param_box: ParamBox,
    pub rollouts: usize,
    pub horizon: usize,
    pub held_out: usize,
    pub real_horizon: usize,
    pub dt: f64,
    pub tolerance: f64,
    pub surrogate: SurrogateConfig,
    pub identify: IdentifyConfig,
}

impl Default for SysidStageConfig {
    fn default() -> Self {
        Self {
            planted: PhysParams::new(0.3, 12.0, 0.8),
            param_box: ParamBox::desk(),
            rollouts: 64,
            horizon: 200,
            held_out: 16,
            real_horizon: 500,
            dt: 0.01,
            tolerance: 0.05,
            surrogate: SurrogateConfig::default(),
            identify: IdentifyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActgenStageConfig {
    pub object: String,
    /// Object position in the scripted seed demo.
    pub object_position: [f64; 3],
    pub variants: usize,
    pub max_offset: f64,
    pub max_yaw: f64,
    pub max_step: f64,
    pub max_rot_step: f64,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
}

impl Default for ActgenStageConfig {
    fn default() -> Self {
        Self {
            object: "cube".into(),
            object_position: [0.4, 0.1, 0.0],
            variants: 8,
            max_offset: 0.1,
            max_yaw: 0.5,
            max_step: 0.1,
            max_rot_step: 0.6,
            workspace_min: [-0.2, -0.6, -0.05],
            workspace_max: [0.8, 0.6, 0.8],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleConfigs {
    pub dreamer: DreamConfig,
    pub geometry: GeometryConfig,
    pub idm: IdmStageConfig,
    pub sysid: SysidStageConfig,
    pub actgen: ActgenStageConfig,
    pub gate: GateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineManifest {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub config: ModuleConfigs,
}

impl PipelineManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Parses `path`. Relative inputs are taken relative to the manifest's
    /// directory; a relative output goes under `output_root` when given,
    /// else also under the manifest's directory.
    pub fn load(path: &Path, output_root: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut m = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in m.inputs.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if m.output.is_relative() {
            m.output = output_root.unwrap_or(base).join(&m.output);
        }
        Ok(m)
    }

    /// Checks input keys and paths plus the cheap configuration invariants.
    pub fn validate(&self) -> Result<()> {
        let known = self.pipeline.inputs();
        for (k, p) in &self.inputs {
            if !known.contains(&k.as_str()) {
                return Err(CliError::Validation(format!(
                    "pipeline {} takes inputs {known:?}, got {k:?}",
                    self.pipeline.name()
                )));
            }
            if !p.exists() {
                return Err(CliError::Validation(format!("input {k:?} does not exist: {}", p.display())));
            }
        }
        if self.pipeline == Pipeline::Mimicpair && self.inputs.contains_key("frames") != self.inputs.contains_key("masks") {
            return Err(CliError::Validation("mimicpair needs both frames and masks, or neither".into()));
        }
        if self.output.as_os_str().is_empty() {
            return Err(CliError::Validation("output directory is empty".into()));
        }
        self.config.gate.check().map_err(|e| CliError::Validation(e.to_string()))?;
        self.config.sysid.param_box.check().map_err(|e| CliError::Validation(e.to_string()))?;
        let d = &self.config.dreamer;
        if d.frames == 0 || d.frames % 2 == 0 {
            return Err(CliError::Validation(format!("dreamer frames must be odd, got {}", d.frames)));
        }
        if d.clips == 0 || d.batch == 0 || d.sample_steps == 0 {
            return Err(CliError::Validation("dreamer clips, batch and sample_steps must be positive".into()));
        }
        if self.config.geometry.frames == 0 {
            return Err(CliError::Validation("geometry frames must be positive".into()));
        }
        Ok(())
    }
}
