//! Toy-model checkpoints stored in the AMX container: a single row holding
//! W1, b1, W2, b2 (row-major), with sizes and the data recipe in metadata.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use neuroprune::experiment::ToySetup;
use neuroprune::toy::{RedundancyPlan, ToyFfn};

use crate::amx::{AmxFile, AmxMetadata};
use crate::error::{CliError, CliResult};

const KIND: &str = "toy_ffn";

/// Everything needed to regenerate the train/test data of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecipe {
    pub seed: u64,
    pub d_in: usize,
    pub classes: usize,
    /// 0 means independent inputs.
    pub groups: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl TaskRecipe {
    pub fn plan(&self) -> RedundancyPlan {
        if self.groups == 0 {
            RedundancyPlan::None
        } else {
            RedundancyPlan::Grouped { groups: self.groups, noise: self.noise }
        }
    }

    pub fn setup(&self, train: neuroprune::toy::TrainConfig) -> ToySetup {
        ToySetup { d_in: self.d_in, n_classes: self.classes, plan: self.plan(), n_train: self.n_train, n_test: self.n_test, train }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    d_in: usize,
    hidden: usize,
    classes: usize,
    task: TaskRecipe,
}

pub fn save(path: &Path, model: &ToyFfn, task: &TaskRecipe) -> CliResult<()> {
    let header = Header {
        kind: KIND.into(),
        d_in: model.d_in(),
        hidden: model.hidden(),
        classes: model.n_classes(),
        task: *task,
    };
    let extra = match serde_json::to_value(&header) {
        Ok(serde_json::Value::Object(map)) => map,
        _ => unreachable!("header serializes to an object"),
    };
    let meta = AmxMetadata { layer_id: Some("toy.fc1".into()), sample_fraction: None, source: Some("neuroprune toy train".into()), extra };
    let params = model.to_flat();
    AmxFile::from_matrix(&DMatrix::from_row_slice(1, params.len(), &params), Some(meta))?.write(path)
}

pub fn load(path: &Path) -> CliResult<(ToyFfn, TaskRecipe)> {
    let file = AmxFile::read(path)?;
    let meta = file
        .metadata
        .as_ref()
        .ok_or_else(|| CliError::Data(format!("{}: not a toy checkpoint (no metadata)", path.display())))?;
    let header: Header = serde_json::from_value(serde_json::Value::Object(meta.extra.clone()))
        .map_err(|e| CliError::Data(format!("{}: checkpoint metadata: {e}", path.display())))?;
    if header.kind != KIND {
        return Err(CliError::Data(format!("{}: expected a {KIND} checkpoint, found {}", path.display(), header.kind)));
    }
    if file.n() != 1 {
        return Err(CliError::Data(format!("{}: checkpoint must hold a single parameter row", path.display())));
    }
    let params: Vec<f64> = file.data().iter().map(|&v| v as f64).collect();
    let model = ToyFfn::from_flat(header.d_in, header.hidden, header.classes, &params)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((model, header.task))
}
