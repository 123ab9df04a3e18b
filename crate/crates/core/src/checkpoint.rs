//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed exactly, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, Task};
use crate::error::{Error, Result};
use crate::field::{IntegrationBounds, ParamStore};
use crate::model::{ExitMode, ExitModel, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub mode: ExitMode,
    pub spec: ModelSpec,
    pub bounds: IntegrationBounds,
    pub params: ParamStore,
    pub task: Task,
    pub normalizer: Option<Normalizer>,
}

impl Checkpoint {
    pub fn new(model: &ExitModel, seed: u64, task: Task, normalizer: Option<Normalizer>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            seed,
            mode: model.mode(),
            spec: model.spec().clone(),
            bounds: model.bounds(),
            params: model.params().clone(),
            task,
            normalizer,
        }
    }

    /// Rebuild the model, re-validating shapes against the spec.
    pub fn model(&self) -> Result<ExitModel> {
        ExitModel::from_parts(self.spec.clone(), self.params.clone(), self.bounds, self.mode)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text).map_err(|e| Error::Input(format!("checkpoint: {e}")))?;
        if v.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                v.format_version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::Input(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_other_versions() {
        let model = ExitModel::new(
            ModelSpec {
                input_channels: 1,
                output_dim: 2,
                ..Default::default()
            },
            4.0,
            ExitMode::Exit,
            3,
        )
        .unwrap();
        let ck = Checkpoint::new(&model, 3, Task::Classification { classes: 2 }, None);
        let text = ck.to_json().unwrap().replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn awkward_floats_survive() {
        let model = ExitModel::new(
            ModelSpec {
                input_channels: 1,
                output_dim: 2,
                ..Default::default()
            },
            4.0,
            ExitMode::Exit,
            3,
        )
        .unwrap();
        let mut ck = Checkpoint::new(&model, 3, Task::Classification { classes: 2 }, None);
        let first = ck.params.iter_mut().next().unwrap().1;
        let vals = [0.1 + 0.2, 1e-310, -5e-324, f64::MAX, 1.0 / 3.0];
        for (d, v) in first.data_mut().iter_mut().zip(vals) {
            *d = v;
        }
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let (a, b) = (ck.params.iter().next().unwrap().1, back.params.iter().next().unwrap().1);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
