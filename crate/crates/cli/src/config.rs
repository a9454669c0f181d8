//! Run configuration file.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use cbfcert::model::SystemSpec;
use cbfcert::probabilistic::ProbConfig;
use cbfcert::synthesis::SynthConfig;
use cbfcert::verifier::VerifyConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Stage-2 steps per round.
    pub steps: usize,
    pub max_rounds: usize,
    /// Copies of each counterexample appended to the decay set.
    pub repeat: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 2000,
            max_rounds: 3,
            repeat: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub starts: usize,
    pub steps: usize,
    /// Start level; `S(γ̂)` when absent.
    pub level: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            starts: 100,
            steps: 300,
            level: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub system: SystemSpec,
    pub synth: SynthConfig,
    pub verify: VerifyConfig,
    pub prob: ProbConfig,
    pub refine: RefineConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: None,
            system: SystemSpec::benchmark(0.1),
            synth: SynthConfig::default(),
            verify: VerifyConfig::default(),
            prob: ProbConfig::default(),
            refine: RefineConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies a global seed to every seeded stage.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.verify.seed = s;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!("unsupported config schema_version {}", self.schema_version);
        }
        self.system.build()?;
        self.synth.validate()?;
        self.verify.validate()?;
        self.prob.validate()?;
        if self.refine.repeat == 0 {
            bail!("refine.repeat must be at least 1");
        }
        Ok(())
    }
}
