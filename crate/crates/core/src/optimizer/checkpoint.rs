use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LionHyper, WorkerState};
use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet};

const BIN_NAME: &str = "checkpoint.bin";
const META_NAME: &str = "checkpoint.json";

/// JSON sidecar describing `checkpoint.bin`, which holds, for each layer in
/// order, its parameters then its momentum as little-endian f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layers: Vec<LayerMeta>,
    pub iteration: u64,
    pub hyper: LionHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint(dir: &Path, state: &WorkerState, hyper: &LionHyper) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(8 * state.params.len());
    for (p, m) in state.params.layers.iter().zip(&state.momentum.layers) {
        for v in p.values.iter().chain(&m.values) {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        layers: state
            .params
            .layers
            .iter()
            .map(|l| LayerMeta {
                name: l.name.clone(),
                shape: l.shape.clone(),
            })
            .collect(),
        iteration: state.iteration,
        hyper: *hyper,
    };
    fs::write(dir.join(BIN_NAME), bin)?;
    fs::write(dir.join(META_NAME), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(WorkerState, LionHyper)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(META_NAME))?)?;
    let bin = fs::read(dir.join(BIN_NAME))?;
    let mut floats = bin
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let expected: usize = meta
        .layers
        .iter()
        .map(|l| 8 * l.shape.iter().product::<usize>())
        .sum();
    if bin.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, sidecar describes {expected}",
            bin.len()
        )));
    }
    let mut params = Vec::new();
    let mut momentum = Vec::new();
    for l in &meta.layers {
        let n: usize = l.shape.iter().product();
        let take = |it: &mut dyn Iterator<Item = f32>| it.take(n).collect::<Vec<f32>>();
        params.push(Layer {
            name: l.name.clone(),
            shape: l.shape.clone(),
            values: take(&mut floats),
        });
        momentum.push(Layer {
            name: l.name.clone(),
            shape: l.shape.clone(),
            values: take(&mut floats),
        });
    }
    Ok((
        WorkerState {
            params: ParamSet::new(params),
            momentum: ParamSet::new(momentum),
            iteration: meta.iteration,
        },
        meta.hyper,
    ))
}
