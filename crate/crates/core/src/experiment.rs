//! Teacher-student training runs over a simulated cluster, with per-step
//! metrics and a JSON report.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::collectives::{run_local, Topology, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};
use crate::optimizer::{
    distributed_lion_step, lion_step, maybe_sync_momentum, DistLionConfig, LionHyper,
    SyncPolicy, UpdateCodec, VoteAlgo, WorkerState,
};
use crate::params::ParamSet;
use crate::quant::{QuantSpec, ZeroMode};
use crate::workloads::{init_mlp, keyed_rng, noisy_client_grads, teacher_student_batch, MlpDims, NoiseSpec};

pub const METRICS_CSV_FIXED: [&str; 5] = ["step", "loss", "tie_rate", "sign_match", "flip_rate"];

/// Everything needed to reproduce a run. Missing fields take the toy defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MlpDims,
    pub batch: usize,
    /// Number of workers (clients).
    pub clients: usize,
    pub steps: u64,
    pub hyper: LionHyper,
    pub codec: UpdateCodec,
    pub algo: VoteAlgo,
    pub zero_mode: ZeroMode,
    pub sync: SyncPolicy,
    pub noise: NoiseSpec,
    pub teacher_seed: u64,
    pub student_seed: u64,
    pub data_seed: u64,
    pub quant_seed: u64,
    /// Every client draws the data, noise and rounding streams of client 0.
    pub identical_clients: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: MlpDims::default(),
            batch: 64,
            clients: 8,
            steps: 500,
            hyper: LionHyper::constant(3e-4, 0.9, 0.99),
            codec: UpdateCodec::Quantized {
                spec: QuantSpec::lp(8, crate::quant::NormOrder::Finite(1.0)),
            },
            algo: VoteAlgo::Direct { lane_bits: None },
            zero_mode: ZeroMode::Alternating,
            sync: SyncPolicy::never(),
            noise: NoiseSpec {
                levy_alpha: 0.5,
                scale: 1e-4,
                per_client_seed: 7,
            },
            teacher_seed: 1,
            student_seed: 2,
            data_seed: 3,
            quant_seed: 4,
            identical_clients: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.in_dim == 0 || self.model.hidden == 0 || self.model.out_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.batch == 0 || self.clients == 0 || self.steps == 0 {
            return Err(Error::config("batch, clients and steps must be positive"));
        }
        self.hyper.validate()?;
        self.noise.validate()?;
        if let UpdateCodec::Quantized { spec } = &self.codec {
            spec.validate()?;
        }
        if self.algo == VoteAlgo::Compressed1Bit && self.zero_mode != ZeroMode::Alternating {
            return Err(Error::config("the 1-bit compressed allreduce needs the alternating zero mode"));
        }
        Ok(())
    }

    fn dist_config(&self) -> DistLionConfig {
        DistLionConfig {
            hyper: self.hyper,
            codec: self.codec,
            algo: self.algo,
            zero_mode: self.zero_mode,
            masks: Default::default(),
        }
    }

    fn stream_client(&self, rank: usize) -> u64 {
        if self.identical_clients {
            0
        } else {
            rank as u64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDivergence {
    pub layer: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Mean clean-batch loss across clients, measured before the step.
    pub loss: f64,
    pub tie_rate: f64,
    /// Fraction of coordinates whose applied direction equals `sign(Σ c_i)`.
    pub sign_match: f64,
    /// Fraction of coordinates whose applied direction is strictly opposite to `sign(Σ c_i)`.
    pub flip_rate: f64,
    /// Momentum divergence after the step (and any sync), per layer.
    pub divergence: Vec<LayerDivergence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseStat {
    pub mean_s: f64,
    pub p95_s: f64,
}

impl PhaseStat {
    pub fn from_samples(samples: &[Duration]) -> Self {
        if samples.is_empty() {
            return PhaseStat::default();
        }
        let mut secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        let idx = ((0.95 * secs.len() as f64).ceil() as usize).clamp(1, secs.len()) - 1;
        PhaseStat {
            mean_s: secs.iter().sum::<f64>() / secs.len() as f64,
            p95_s: secs[idx],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub compute: PhaseStat,
    pub quantize_pack: PhaseStat,
    pub communicate: PhaseStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_loss: f64,
    pub mean_tie_rate: f64,
    pub mean_sign_match: f64,
    pub mean_flip_rate: f64,
    pub phases: PhaseTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnvironment {
    pub world_size: usize,
    pub transport: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub rows: Vec<MetricRow>,
    pub summary: RunSummary,
    pub environment: RunEnvironment,
}

impl RunReport {
    fn assemble(config: RunConfig, rows: Vec<MetricRow>, phases: PhaseTimings, environment: RunEnvironment) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let summary = RunSummary {
            final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
            mean_tie_rate: mean(|r| r.tie_rate),
            mean_sign_match: mean(|r| r.sign_match),
            mean_flip_rate: mean(|r| r.flip_rate),
            phases,
        };
        RunReport {
            config,
            rows,
            summary,
            environment,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut header: Vec<String> = METRICS_CSV_FIXED.iter().map(|s| s.to_string()).collect();
        if let Some(row) = self.rows.first() {
            header.extend(row.divergence.iter().map(|d| format!("div_{}", d.layer)));
        }
        header
    }

    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        for row in &self.rows {
            let mut rec = vec![
                row.step.to_string(),
                row.loss.to_string(),
                row.tie_rate.to_string(),
                row.sign_match.to_string(),
                row.flip_rate.to_string(),
            ];
            rec.extend(row.divergence.iter().map(|d| d.value.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `metrics.csv` and `report.json` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        Ok(())
    }
}

struct Setup {
    teacher: ParamSet,
    student: ParamSet,
}

fn setup(cfg: &RunConfig) -> Setup {
    Setup {
        teacher: init_mlp(&cfg.model, cfg.teacher_seed),
        student: init_mlp(&cfg.model, cfg.student_seed),
    }
}

/// Clean loss and noisy gradient for one client at step `t`.
fn client_gradient(cfg: &RunConfig, teacher: &ParamSet, params: &ParamSet, client: u64, t: u64) -> Result<(f64, ParamSet)> {
    let mut rng = keyed_rng(cfg.data_seed, client, t);
    let (loss, clean) = teacher_student_batch(&cfg.model, params, teacher, cfg.batch, &mut rng)?;
    let noisy = noisy_client_grads(&clean, &cfg.noise, client as usize, t)?;
    Ok((loss, noisy))
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn sign_agreement(direction: &[i8], updates: &[Vec<f32>]) -> (f64, f64) {
    let n = direction.len();
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut matched, mut flipped) = (0usize, 0usize);
    for (j, &d) in direction.iter().enumerate() {
        let total: f64 = updates.iter().map(|c| c[j] as f64).sum();
        let reference = if total > 0.0 {
            1
        } else if total < 0.0 {
            -1
        } else {
            0
        };
        if d == reference {
            matched += 1;
        } else if d != 0 && reference != 0 {
            flipped += 1;
        }
    }
    (matched as f64 / n as f64, flipped as f64 / n as f64)
}

fn divergence_of(layout: &ParamSet, momenta: &[Vec<f32>]) -> Vec<LayerDivergence> {
    let p = momenta.len() as f64;
    let mut offset = 0;
    layout
        .layers
        .iter()
        .map(|layer| {
            let n = layer.values.len();
            let worst = (offset..offset + n)
                .map(|j| {
                    let mean = momenta.iter().map(|m| m[j] as f64).sum::<f64>() / p;
                    (momenta.iter().map(|m| (m[j] as f64 - mean).powi(2)).sum::<f64>() / p).sqrt()
                })
                .fold(0.0f64, f64::max);
            offset += n;
            LayerDivergence {
                layer: layer.name.clone(),
                value: worst,
            }
        })
        .collect()
}

/// The per-rank training loop. Every rank must call this with the same
/// config; rank 0 returns the report, other ranks return `None`.
pub fn run_worker(cfg: &RunConfig, topo: &mut Topology) -> Result<Option<RunReport>> {
    cfg.validate()?;
    if topo.world_size() != cfg.clients {
        return Err(Error::config(format!(
            "config asks for {} clients but the world has {} ranks",
            cfg.clients,
            topo.world_size()
        )));
    }
    let Setup { teacher, student } = setup(cfg);
    let dist = cfg.dist_config();
    let rank = topo.rank();
    let client = cfg.stream_client(rank);
    let mut state = WorkerState::new(student);
    let mut rows = Vec::new();
    let (mut compute, mut quant, mut comm) = (Vec::new(), Vec::new(), Vec::new());

    for t in 1..=cfg.steps {
        let started = Instant::now();
        let (loss, grad) = client_gradient(cfg, &teacher, &state.params, client, t)?;
        compute.push(started.elapsed());

        let mut rng = keyed_rng(cfg.quant_seed, client, t);
        let stats = distributed_lion_step(&mut state, &grad, &dist, topo, &mut rng)?;
        let sync_started = Instant::now();
        maybe_sync_momentum(&mut state, &cfg.sync, topo)?;
        quant.push(stats.quantize_time);
        comm.push(stats.communicate_time + sync_started.elapsed());

        let mut payload = Vec::with_capacity(16 + 8 * stats.local_update.len());
        payload.extend_from_slice(&loss.to_le_bytes());
        payload.extend_from_slice(&state.params.bit_hash().to_le_bytes());
        put_f32s(&mut payload, &stats.local_update);
        put_f32s(&mut payload, &state.momentum.flatten());
        let gathered = topo.allgather_bytes(payload)?;
        if rank != 0 {
            continue;
        }

        let n = stats.local_update.len();
        let mut losses = Vec::with_capacity(gathered.len());
        let mut updates = Vec::with_capacity(gathered.len());
        let mut momenta = Vec::with_capacity(gathered.len());
        let my_hash = state.params.bit_hash();
        for (r, bytes) in gathered.iter().enumerate() {
            if bytes.len() != 16 + 8 * n {
                return Err(Error::Format(format!("metrics payload from rank {r} has {} bytes", bytes.len())));
            }
            losses.push(f64::from_le_bytes(bytes[0..8].try_into().unwrap()));
            let hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
            if hash != my_hash {
                return Err(Error::Collective {
                    generation: topo.generation(),
                    phase: "metrics",
                    rank,
                    peer: Some(r),
                    reason: format!("parameters diverged at step {t}"),
                });
            }
            updates.push(get_f32s(&bytes[16..16 + 4 * n]));
            momenta.push(get_f32s(&bytes[16 + 4 * n..]));
        }
        let (sign_match, flip_rate) = sign_agreement(&stats.direction, &updates);
        rows.push(MetricRow {
            step: t,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            tie_rate: stats.tie_rate(),
            sign_match,
            flip_rate,
            divergence: divergence_of(&state.params, &momenta),
        });
    }

    if rank != 0 {
        return Ok(None);
    }
    let phases = PhaseTimings {
        compute: PhaseStat::from_samples(&compute),
        quantize_pack: PhaseStat::from_samples(&quant),
        communicate: PhaseStat::from_samples(&comm),
    };
    let env = RunEnvironment {
        world_size: topo.world_size(),
        transport: topo.transport_kind().to_string(),
    };
    Ok(Some(RunReport::assemble(cfg.clone(), rows, phases, env)))
}

/// Run every client as a thread over the in-process transport.
pub fn run_inproc(cfg: &RunConfig) -> Result<RunReport> {
    run_inproc_with_timeout(cfg, DEFAULT_TIMEOUT)
}

pub fn run_inproc_with_timeout(cfg: &RunConfig, timeout: Duration) -> Result<RunReport> {
    cfg.validate()?;
    let results = run_local(cfg.clients, timeout, |topo| run_worker(cfg, topo));
    let mut report = None;
    for res in results {
        if let Some(r) = res? {
            report = Some(r);
        }
    }
    report.ok_or_else(|| Error::Format("rank 0 produced no report".to_string()))
}

/// Single-worker Lion on client 0's gradient stream, reported in the same
/// format as a distributed run.
pub fn run_reference(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let Setup { teacher, student } = setup(cfg);
    let mut state = WorkerState::new(student);
    let mut rows = Vec::new();
    let mut compute = Vec::new();
    for t in 1..=cfg.steps {
        let started = Instant::now();
        let (loss, grad) = client_gradient(cfg, &teacher, &state.params, 0, t)?;
        compute.push(started.elapsed());
        let b1 = cfg.hyper.beta1 as f32;
        let update: Vec<f32> = state
            .momentum
            .flatten()
            .iter()
            .zip(grad.flatten())
            .map(|(&m, g)| crate::optimizer::interpolate(m, g, b1))
            .collect();
        lion_step(&mut state, &grad, &cfg.hyper)?;
        let direction: Vec<i8> = update
            .iter()
            .map(|&c| crate::quant::SignPolicy::exact().sign(c))
            .collect();
        let ties = update.iter().filter(|&&c| c == 0.0).count();
        let (sign_match, flip_rate) = sign_agreement(&direction, std::slice::from_ref(&update));
        rows.push(MetricRow {
            step: t,
            loss,
            tie_rate: ties as f64 / update.len() as f64,
            sign_match,
            flip_rate,
            divergence: divergence_of(&state.params, &[state.momentum.flatten()]),
        });
    }
    let phases = PhaseTimings {
        compute: PhaseStat::from_samples(&compute),
        ..Default::default()
    };
    let env = RunEnvironment {
        world_size: 1,
        transport: "none".to_string(),
    };
    Ok(RunReport::assemble(cfg.clone(), rows, phases, env))
}
