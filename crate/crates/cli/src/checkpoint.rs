//! Model checkpoints: a `TCR3` container with a `config.json` byte entry and
//! one `rows x cols` entry per named parameter.

use std::path::Path;

use reftrack_core::dit::ModelConfig;
use reftrack_core::model::Tracker;
use reftrack_core::nn::Parameters;
use reftrack_core::scalar::Scalar;
use reftrack_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::container::{Entry, TensorContainer};
use crate::error::{CliError, Result};

pub const CONFIG_ENTRY: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub steps_done: usize,
}

pub fn checkpoint_container<T: Scalar>(model: &Tracker<T>, train: Option<&TrainConfig>, steps_done: usize) -> Result<TensorContainer> {
    let meta = CheckpointConfig {
        model: model.config.clone(),
        train: train.cloned(),
        steps_done,
    };
    let mut c = TensorContainer::new();
    c.push(Entry::from_bytes(CONFIG_ENTRY, serde_json::to_vec_pretty(&meta)?))?;
    for (name, m) in model.named() {
        c.push(Entry::from_scalars(name, &[m.rows, m.cols], &m.data)?)?;
    }
    Ok(c)
}

/// Rebuilds a model; the parameter set must match the configuration
/// exactly.
pub fn model_from_container<T: Scalar>(c: &TensorContainer) -> Result<(Tracker<T>, CheckpointConfig)> {
    let meta: CheckpointConfig = serde_json::from_slice(&c.require(CONFIG_ENTRY)?.payload)?;
    let mut model: Tracker<T> = Tracker::new(&meta.model, 0)?;
    let mut problem = None;
    let mut seen = 0;
    model.visit_mut("", &mut |name, m| {
        if problem.is_some() {
            return;
        }
        match c.get(&name) {
            None => problem = Some(format!("checkpoint lacks parameter {name}")),
            Some(e) if e.dims_usize() != [m.rows, m.cols] => {
                problem = Some(format!("parameter {name} has dims {:?}, model expects [{}, {}]", e.dims, m.rows, m.cols))
            }
            Some(e) => match e.to_scalars::<T>() {
                Ok(v) => {
                    m.data = v;
                    seen += 1;
                }
                Err(err) => problem = Some(err.to_string()),
            },
        }
    });
    if let Some(p) = problem {
        return Err(CliError::Format(p));
    }
    if seen + 1 != c.entries.len() {
        return Err(CliError::Format(format!(
            "checkpoint holds {} parameters, model has {seen}",
            c.entries.len() - 1
        )));
    }
    Ok((model, meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Tracker<T>, train: Option<&TrainConfig>, steps_done: usize) -> Result<()> {
    checkpoint_container(model, train, steps_done)?.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Tracker<T>, CheckpointConfig)> {
    model_from_container(&TensorContainer::load(path)?)
}
