//! Model files: a trained barrier and controller with the system they were
//! trained for.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::dynamics::{BenchmarkSystem, Dynamics};
use crate::error::{Error, Result};
use crate::neural::Mlp;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub dt: f64,
}

impl SystemSpec {
    pub fn benchmark(dt: f64) -> Self {
        SystemSpec {
            name: "benchmark".to_string(),
            dt,
        }
    }

    pub fn build(&self) -> Result<BenchmarkSystem> {
        match self.name.as_str() {
            "benchmark" => BenchmarkSystem::with_dt(self.dt),
            other => Err(Error::config(format!("unknown system `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub system: SystemSpec,
    pub barrier: Mlp,
    pub controller: Controller,
}

impl ModelFile {
    pub fn new(system: SystemSpec, barrier: Mlp, controller: Controller) -> Result<Self> {
        let m = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            system,
            barrier,
            controller,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::config(format!("unsupported model schema_version {}", self.schema_version)));
        }
        let sys = self.system.build()?;
        let (n, m) = (sys.dynamics.state_dim(), sys.dynamics.input_dim());
        if self.barrier.input_dim() != n || self.barrier.output_dim() != 1 {
            return Err(Error::config(format!("barrier must map the {n}-dimensional state to a scalar")));
        }
        if self.controller.state_dim() != n || self.controller.input_dim() != m {
            return Err(Error::config(format!("controller must map the {n}-dimensional state to {m} inputs")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
