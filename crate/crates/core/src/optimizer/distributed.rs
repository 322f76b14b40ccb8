use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{accumulate, apply_direction, interpolate, LionHyper, WorkerState};
use crate::collectives::{
    allgather_f32, allreduce_mean_f32, compressed_allreduce_1bit, direct_allreduce,
    majority_sign, ps_gather_broadcast, smallest_lane, LaneEncoding, Topology, VoteResult,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::quant::{quantize, QuantSpec, SignPolicy, Signum, ZeroMode};

/// What each worker contributes to the vote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateCodec {
    /// Full-precision `c_i`; the vote is `sign(Σ c_i)`.
    Identity,
    /// `sign(c_i)` with zeros resolved by the step's zero mode.
    Sign,
    /// Integer codes from [`quantize`], applied per layer.
    Quantized { spec: QuantSpec },
}

impl UpdateCodec {
    pub fn label(&self) -> String {
        match self {
            UpdateCodec::Identity => "fp32".to_string(),
            UpdateCodec::Sign => "1bit".to_string(),
            UpdateCodec::Quantized { spec } => spec.label(),
        }
    }
}

/// Which collective produces the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VoteAlgo {
    Ps {
        #[serde(default)]
        efficient: bool,
    },
    /// `lane_bits: None` picks the smallest lane that fits the world.
    Direct {
        #[serde(default)]
        lane_bits: Option<u8>,
    },
    #[serde(rename = "compressed_1bit")]
    Compressed1Bit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistLionConfig {
    pub hyper: LionHyper,
    pub codec: UpdateCodec,
    pub algo: VoteAlgo,
    pub zero_mode: ZeroMode,
    /// Per-layer masks; `true` entries are never updated and contribute zero to the vote.
    #[serde(default)]
    pub masks: BTreeMap<String, Vec<bool>>,
}

/// What one distributed step did, for metrics and timing.
#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub elements: usize,
    pub ties: usize,
    /// Applied direction per element, layer order.
    pub direction: Vec<i8>,
    /// This worker's pre-quantization update `c_i`, layer order.
    pub local_update: Vec<f32>,
    pub quantize_time: Duration,
    pub communicate_time: Duration,
}

impl StepStats {
    pub fn tie_rate(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.ties as f64 / self.elements as f64
        }
    }
}

fn mask_for<'a>(cfg: &'a DistLionConfig, name: &str, len: usize) -> Result<Option<&'a [bool]>> {
    match cfg.masks.get(name) {
        None => Ok(None),
        Some(m) if m.len() == len => Ok(Some(m)),
        Some(m) => Err(Error::config(format!(
            "mask for layer {name} has {} entries, layer has {len}",
            m.len()
        ))),
    }
}

fn vote_from_ints(
    topo: &mut Topology,
    ints: &[i32],
    max_level: i32,
    all_unit: bool,
    algo: VoteAlgo,
    policy: SignPolicy,
) -> Result<VoteResult> {
    match algo {
        VoteAlgo::Ps { efficient } => ps_gather_broadcast(topo, ints, max_level, efficient),
        VoteAlgo::Direct { lane_bits } => {
            let encoding = if all_unit {
                LaneEncoding::SignBit
            } else {
                LaneEncoding::Offset(max_level)
            };
            let lane = match lane_bits {
                Some(l) => l,
                None => smallest_lane(topo.world_size(), encoding).ok_or_else(|| {
                    Error::config(format!(
                        "no lane can hold {} workers at level {max_level}",
                        topo.world_size()
                    ))
                })?,
            };
            direct_allreduce(topo, ints, encoding, lane)
        }
        VoteAlgo::Compressed1Bit => {
            let real: Vec<f32> = ints.iter().map(|&v| v as f32).collect();
            compressed_allreduce_1bit(topo, &real, policy)
        }
    }
}

/// One step of distributed Lion: local `c_i`, optional quantization, a vote
/// through `cfg.algo`, a shared sign update, and a purely local momentum update.
pub fn distributed_lion_step<R: Rng + ?Sized>(
    state: &mut WorkerState,
    grad: &ParamSet,
    cfg: &DistLionConfig,
    topo: &mut Topology,
    rng: &mut R,
) -> Result<StepStats> {
    state.params.check_same_shape(grad)?;
    let h = &cfg.hyper;
    let t = state.iteration + 1;
    let policy = SignPolicy {
        mode: cfg.zero_mode,
        iteration: t,
    };
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);

    let mut masks = Vec::with_capacity(state.params.layers.len());
    let mut local = Vec::with_capacity(state.params.len());
    for (m, g) in state.momentum.layers.iter().zip(&grad.layers) {
        let mask = mask_for(cfg, &m.name, m.values.len())?;
        let start = local.len();
        local.extend(m.values.iter().zip(&g.values).map(|(&mv, &gv)| interpolate(mv, gv, b1)));
        if let Some(mask) = mask {
            for (c, &masked) in local[start..].iter_mut().zip(mask) {
                if masked {
                    *c = 0.0;
                }
            }
        }
        masks.push(mask);
    }

    let quant_start = Instant::now();
    let payload: Option<(Vec<i32>, i32, bool)> = match cfg.codec {
        UpdateCodec::Identity => None,
        UpdateCodec::Sign => {
            let ints: Vec<i32> = local.iter().map(|&c| policy.sign(c) as i32).collect();
            let unit = cfg.zero_mode == ZeroMode::Alternating;
            Some((ints, 1, unit))
        }
        UpdateCodec::Quantized { spec } => {
            let mut ints = Vec::with_capacity(local.len());
            let mut start = 0;
            for layer in &state.params.layers {
                let end = start + layer.values.len();
                ints.extend(quantize(&local[start..end], &spec, rng)?.values);
                start = end;
            }
            Some((ints, spec.max_level(), false))
        }
    };
    let quantize_time = quant_start.elapsed();

    let comm_start = Instant::now();
    let vote = match payload {
        None => {
            let mean = allreduce_mean_f32(topo, &local)?;
            let values: Vec<i32> = mean.iter().map(|&v| v.signum_i8() as i32).collect();
            let ties = mean.iter().filter(|&&v| v == 0.0).count();
            VoteResult {
                values,
                range: (-1, 1),
                ties,
            }
        }
        Some((ints, level, unit)) => vote_from_ints(topo, &ints, level, unit, cfg.algo, policy)?,
    };
    let communicate_time = comm_start.elapsed();

    let mut direction = majority_sign(&vote, policy);
    let lr = h.lr.at(t) as f32;
    let wd = h.weight_decay as f32;
    let mut offset = 0;
    for (((theta, m), g), mask) in state
        .params
        .layers
        .iter_mut()
        .zip(state.momentum.layers.iter_mut())
        .zip(&grad.layers)
        .zip(&masks)
    {
        let dir = &mut direction[offset..offset + theta.values.len()];
        if let Some(mask) = mask {
            for (d, &masked) in dir.iter_mut().zip(mask.iter()) {
                if masked {
                    *d = 0;
                }
            }
        }
        for (th, &d) in theta.values.iter_mut().zip(dir.iter()) {
            *th = apply_direction(*th, d, lr, wd, h.decay_mode);
        }
        for (mv, &gv) in m.values.iter_mut().zip(&g.values) {
            *mv = accumulate(*mv, gv, b2);
        }
        offset += theta.values.len();
    }
    state.iteration = t;

    Ok(StepStats {
        elements: local.len(),
        ties: vote.ties,
        direction,
        local_update: local,
        quantize_time,
        communicate_time,
    })
}

/// Distributed signSGD: `θ ← θ − η · vote(sign(g_i))`, no momentum.
pub fn signsgd_majority_step(
    state: &mut WorkerState,
    grad: &ParamSet,
    h: &LionHyper,
    algo: VoteAlgo,
    zero_mode: ZeroMode,
    topo: &mut Topology,
) -> Result<StepStats> {
    state.params.check_same_shape(grad)?;
    let t = state.iteration + 1;
    let policy = SignPolicy {
        mode: zero_mode,
        iteration: t,
    };
    let local = grad.flatten();
    let ints: Vec<i32> = local.iter().map(|&g| policy.sign(g) as i32).collect();
    let comm_start = Instant::now();
    let vote = vote_from_ints(topo, &ints, 1, zero_mode == ZeroMode::Alternating, algo, policy)?;
    let communicate_time = comm_start.elapsed();
    let direction = majority_sign(&vote, policy);
    let lr = h.lr.at(t) as f32;
    for (th, &d) in state
        .params
        .layers
        .iter_mut()
        .flat_map(|l| l.values.iter_mut())
        .zip(&direction)
    {
        *th -= lr * d as f32;
    }
    state.iteration = t;
    Ok(StepStats {
        elements: local.len(),
        ties: vote.ties,
        direction,
        local_update: local,
        quantize_time: Duration::ZERO,
        communicate_time,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    #[default]
    All,
    None,
    Named(Vec<String>),
}

impl LayerSelector {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            LayerSelector::All => true,
            LayerSelector::None => false,
            LayerSelector::Named(names) => names.iter().any(|n| n == name),
        }
    }
}

/// Periodic momentum averaging; `period = 0` never fires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SyncPolicy {
    pub period: u64,
    #[serde(default)]
    pub layers: LayerSelector,
}

impl SyncPolicy {
    pub fn never() -> Self {
        SyncPolicy {
            period: 0,
            layers: LayerSelector::None,
        }
    }

    pub fn fires_at(&self, t: u64) -> bool {
        self.period > 0 && t.is_multiple_of(self.period)
    }
}

/// Replace the selected layers' momentum with the cross-worker mean when the
/// policy fires at the state's current iteration. Returns whether it fired.
pub fn maybe_sync_momentum(
    state: &mut WorkerState,
    policy: &SyncPolicy,
    topo: &mut Topology,
) -> Result<bool> {
    if !policy.fires_at(state.iteration) {
        return Ok(false);
    }
    let selected: Vec<usize> = state
        .momentum
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| policy.layers.matches(&l.name))
        .map(|(i, _)| i)
        .collect();
    if selected.is_empty() {
        return Ok(false);
    }
    let flat: Vec<f32> = selected
        .iter()
        .flat_map(|&i| state.momentum.layers[i].values.iter().copied())
        .collect();
    let mean = allreduce_mean_f32(topo, &flat)?;
    let mut offset = 0;
    for &i in &selected {
        let layer = &mut state.momentum.layers[i];
        let n = layer.values.len();
        layer.values.copy_from_slice(&mean[offset..offset + n]);
        offset += n;
    }
    Ok(true)
}

/// Per layer, the largest per-element population standard deviation of
/// momentum across workers.
pub fn momentum_divergence(state: &WorkerState, topo: &mut Topology) -> Result<Vec<(String, f64)>> {
    let all = allgather_f32(topo, &state.momentum.flatten())?;
    let p = all.len() as f64;
    let mut out = Vec::with_capacity(state.momentum.layers.len());
    let mut offset = 0;
    for layer in &state.momentum.layers {
        let n = layer.values.len();
        let worst = (offset..offset + n)
            .map(|j| {
                let mean = all.iter().map(|v| v[j] as f64).sum::<f64>() / p;
                let var = all.iter().map(|v| (v[j] as f64 - mean).powi(2)).sum::<f64>() / p;
                var.sqrt()
            })
            .fold(0.0f64, f64::max);
        out.push((layer.name.clone(), worst));
        offset += n;
    }
    Ok(out)
}
