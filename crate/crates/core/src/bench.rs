//! Sign fidelity of quantized majority votes against full-precision
//! distributed Lion, on synthetic per-worker update vectors.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize, NormOrder, QuantSpec};
use crate::workloads::{synth_update_vectors, SynthDist};

pub const BENCH_CSV_HEADER: &str = "quantizer,sign_match_rate,flip_rate,tie_rate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    /// Plain distributed Lion: each worker sends `sign(c_i)`.
    OneBit,
    /// Max-norm scaling with stochastic rounding.
    MaxNorm,
    /// Max-norm scaling, small values pushed to ±1 instead of 0.
    MaxNormNoZero,
    /// `sign(x)·ln(1 + |x|/s)` with `s = M_1`, max-norm quantized, reverted before summing.
    Log,
    L1,
    L0,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 6] = [
        BenchVariant::OneBit,
        BenchVariant::MaxNorm,
        BenchVariant::MaxNormNoZero,
        BenchVariant::Log,
        BenchVariant::L1,
        BenchVariant::L0,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchVariant::OneBit => "1bit",
            BenchVariant::MaxNorm => "Qinf",
            BenchVariant::MaxNormNoZero => "Qinf_nozero",
            BenchVariant::Log => "log1p_Qinf",
            BenchVariant::L1 => "Q1",
            BenchVariant::L0 => "Q0",
        }
    }

    pub fn spec(&self, bits: u8) -> Option<QuantSpec> {
        match self {
            BenchVariant::OneBit => None,
            BenchVariant::MaxNorm => Some(QuantSpec::max_norm(bits)),
            BenchVariant::MaxNormNoZero => Some(QuantSpec {
                no_zero: true,
                ..QuantSpec::max_norm(bits)
            }),
            BenchVariant::Log => Some(QuantSpec {
                log_transform: true,
                ..QuantSpec::max_norm(bits)
            }),
            BenchVariant::L1 => Some(QuantSpec::lp(bits, NormOrder::Finite(1.0))),
            BenchVariant::L0 => Some(QuantSpec::lp(bits, NormOrder::Zero)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dist: SynthDist,
    pub dim: usize,
    pub workers: usize,
    pub bits: u8,
    /// Weight of a component shared by all workers; 0 gives independent workers.
    pub shared: f64,
    pub seed: u64,
    pub variants: Vec<BenchVariant>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dist: SynthDist::LaplaceWithOutliers { k: 10, ratio: 1e3 },
            dim: 100_000,
            workers: 8,
            bits: 8,
            shared: 0.0,
            seed: 0,
            variants: BenchVariant::ALL.to_vec(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.workers == 0 {
            return Err(Error::config("dim and workers must be positive"));
        }
        if !(self.shared >= 0.0) {
            return Err(Error::config("shared weight must be non-negative"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("no quantizer variants selected"));
        }
        QuantSpec::max_norm(self.bits).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub quantizer: String,
    pub sign_match_rate: f64,
    pub flip_rate: f64,
    pub tie_rate: f64,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Per-worker update vectors `c_i = shared·base + own_i`.
pub fn synth_worker_updates(cfg: &BenchConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = synth_update_vectors(cfg.dist, cfg.dim, &mut rng)?;
    (0..cfg.workers)
        .map(|_| {
            let own = synth_update_vectors(cfg.dist, cfg.dim, &mut rng)?;
            Ok(own
                .iter()
                .zip(&base)
                .map(|(&o, &b)| (cfg.shared * b as f64 + o as f64) as f32)
                .collect())
        })
        .collect()
}

/// Compare `sign(Σ Q(c_i))` with `sign(Σ c_i)`. Aggregate zeros are left
/// unresolved: they count as ties, never as flips.
pub fn evaluate_variant(variant: BenchVariant, bits: u8, updates: &[Vec<f32>], seed: u64) -> Result<BenchRow> {
    let d = updates.first().map_or(0, Vec::len);
    if d == 0 || updates.iter().any(|u| u.len() != d) {
        return Err(Error::config("update vectors must be nonempty and equally long"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = vec![0.0f64; d];
    for u in updates {
        match variant.spec(bits) {
            None => {
                for (a, &v) in agg.iter_mut().zip(u) {
                    *a += sign(v as f64) as f64;
                }
            }
            Some(spec) => {
                let q = quantize(u, &spec, &mut rng)?;
                if spec.log_transform {
                    for (a, v) in agg.iter_mut().zip(q.dequantize()) {
                        *a += v;
                    }
                } else {
                    for (a, &v) in agg.iter_mut().zip(&q.values) {
                        *a += v as f64;
                    }
                }
            }
        }
    }
    let (mut matched, mut flipped, mut ties) = (0usize, 0usize, 0usize);
    for (j, &a) in agg.iter().enumerate() {
        let reference = sign(updates.iter().map(|u| u[j] as f64).sum());
        let got = sign(a);
        if got == 0 {
            ties += 1;
        }
        if got == reference {
            matched += 1;
        } else if got != 0 && reference != 0 {
            flipped += 1;
        }
    }
    let n = d as f64;
    Ok(BenchRow {
        quantizer: variant.name().to_string(),
        sign_match_rate: matched as f64 / n,
        flip_rate: flipped as f64 / n,
        tie_rate: ties as f64 / n,
    })
}

pub fn quant_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let updates = synth_worker_updates(cfg)?;
    cfg.variants
        .iter()
        .enumerate()
        .map(|(i, v)| evaluate_variant(*v, cfg.bits, &updates, cfg.seed.wrapping_add(1 + i as u64)))
        .collect()
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
