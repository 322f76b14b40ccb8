//! Built-in consistency checks: collectives against single-process oracles,
//! pack roundtrips, stochastic rounding bias and MLP gradients.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collectives::{
    allreduce_mean_f32, compressed_allreduce_1bit, direct_allreduce, ps_gather_broadcast,
    run_local, smallest_lane, LaneEncoding,
};
use crate::quant::{pack, sround, unpack, SignPolicy, SUPPORTED_WIDTHS};
use crate::workloads::{init_mlp, mse_loss, mse_loss_grad, MlpDims};

pub const SELFTEST_WORLDS: [usize; 4] = [2, 3, 4, 8];

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfTestOptions {
    /// Flip one payload bit between pack and unpack; the roundtrip check must then fail.
    pub corrupt_pack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, outcome: std::result::Result<String, String>) -> Self {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }
}

type Outcome = std::result::Result<String, String>;

fn random_levels(rng: &mut ChaCha8Rng, p: usize, n: usize, level: i32) -> Vec<Vec<i32>> {
    (0..p)
        .map(|_| (0..n).map(|_| rng.random_range(-level..=level)).collect())
        .collect()
}

fn column_sums(rows: &[Vec<i32>]) -> Vec<i32> {
    let n = rows[0].len();
    (0..n).map(|j| rows.iter().map(|r| r[j]).sum()).collect()
}

fn check_collectives(p: usize) -> Outcome {
    let timeout = Duration::from_secs(10);
    let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
    for n in [1usize, 7, 64] {
        let level = 7;
        let ints = random_levels(&mut rng, p, n, level);
        let expect = column_sums(&ints);
        for efficient in [false, true] {
            let got = run_local(p, timeout, |t| ps_gather_broadcast(t, &ints[t.rank()], level, efficient));
            for (r, res) in got.into_iter().enumerate() {
                let res = res.map_err(|e| e.to_string())?;
                if res.values != expect {
                    return Err(format!("ps(efficient={efficient}) P={p} N={n} rank {r} disagrees"));
                }
            }
        }
        let enc = LaneEncoding::Offset(level);
        let lane = smallest_lane(p, enc).ok_or("no lane fits")?;
        let got = run_local(p, timeout, |t| direct_allreduce(t, &ints[t.rank()], enc, lane));
        for (r, res) in got.into_iter().enumerate() {
            if res.map_err(|e| e.to_string())?.values != expect {
                return Err(format!("direct P={p} N={n} rank {r} disagrees"));
            }
        }

        let reals: Vec<Vec<f32>> = (0..p)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let policy = SignPolicy::alternating(3);
        let signs: Vec<Vec<i32>> = reals
            .iter()
            .map(|v| v.iter().map(|&x| policy.sign(x) as i32).collect())
            .collect();
        let expect_signs: Vec<i32> = column_sums(&signs).into_iter().map(|s| policy.sign(s) as i32).collect();
        let got = run_local(p, timeout, |t| compressed_allreduce_1bit(t, &reals[t.rank()], policy));
        for (r, res) in got.into_iter().enumerate() {
            if res.map_err(|e| e.to_string())?.values != expect_signs {
                return Err(format!("compressed P={p} N={n} rank {r} disagrees"));
            }
        }

        let expect_mean: Vec<f32> = (0..n)
            .map(|j| (reals.iter().map(|v| v[j] as f64).sum::<f64>() / p as f64) as f32)
            .collect();
        let got = run_local(p, timeout, |t| allreduce_mean_f32(t, &reals[t.rank()]));
        for (r, res) in got.into_iter().enumerate() {
            let res = res.map_err(|e| e.to_string())?;
            let within = res.iter().zip(&expect_mean).all(|(a, b)| {
                (a.to_bits() as i64 - b.to_bits() as i64).abs() <= 2 || a == b
            });
            if !within {
                return Err(format!("mean P={p} N={n} rank {r} off by more than 2 ulp"));
            }
        }
    }
    Ok(format!("P={p}: ps, tree ps, direct, 1-bit and mean agree with oracles"))
}

fn check_pack(opts: SelfTestOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for width in SUPPORTED_WIDTHS {
        let half = 1i32 << (width - 1);
        let values: Vec<i32> = (0..257).map(|_| rng.random_range(-half..half)).collect();
        let mut packed = pack(&values, width, half).map_err(|e| e.to_string())?;
        if opts.corrupt_pack {
            packed.payload[0] ^= 0x01;
        }
        let back = unpack(&packed).map_err(|e| e.to_string())?;
        if back != values {
            return Err(format!("width {width}: roundtrip mismatch"));
        }
    }
    Ok("widths 1, 2, 4, 8 roundtrip".to_string())
}

fn check_sround() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    for v in [0.3f64, -1.7, 2.5] {
        let mean = (0..draws).map(|_| sround(v, &mut rng) as f64).sum::<f64>() / draws as f64;
        // 5 sigma of a Bernoulli(1/2) mean
        if (mean - v).abs() > 5.0 * 0.5 / (draws as f64).sqrt() {
            return Err(format!("E[sround({v})] = {mean}"));
        }
    }
    Ok("sround is unbiased on 0.3, -1.7, 2.5".to_string())
}

/// Largest relative error between analytic and central-difference gradients
/// over the first `count` coordinates of each layer.
pub fn gradient_check_error(dims: &MlpDims, seed: u64, eps: f64, count: usize) -> f64 {
    let student = init_mlp(dims, seed);
    let teacher = init_mlp(dims, seed + 1);
    let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (w1, w2) = (f64s(&student.layers[0].values), f64s(&student.layers[1].values));
    let (t1, t2) = (f64s(&teacher.layers[0].values), f64s(&teacher.layers[1].values));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let xs: Vec<f64> = (0..16 * dims.in_dim)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let ys = crate::workloads::forward(dims, &t1, &t2, &xs);
    let (_, g1, g2) = mse_loss_grad(dims, &w1, &w2, &xs, &ys);
    let mut worst = 0.0f64;
    for layer in 0..2 {
        let len = if layer == 0 { w1.len() } else { w2.len() };
        for j in 0..count.min(len) {
            let eval = |delta: f64| {
                let (mut a, mut b) = (w1.clone(), w2.clone());
                if layer == 0 {
                    a[j] += delta;
                } else {
                    b[j] += delta;
                }
                mse_loss(dims, &a, &b, &xs, &ys)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = if layer == 0 { g1[j] } else { g2[j] };
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

fn check_gradients() -> Outcome {
    let dims = MlpDims::default();
    let err = gradient_check_error(&dims, 17, 1e-4, 5);
    if err < 1e-4 {
        Ok(format!("max relative error {err:.2e}"))
    } else {
        Err(format!("max relative error {err:.2e}"))
    }
}

pub fn run_selftest(opts: SelfTestOptions) -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = SELFTEST_WORLDS
        .iter()
        .map(|&p| CheckResult::new(format!("collectives_p{p}"), check_collectives(p)))
        .collect();
    out.push(CheckResult::new("pack_roundtrip", check_pack(opts)));
    out.push(CheckResult::new("sround_unbiased", check_sround()));
    out.push(CheckResult::new("mlp_gradients", check_gradients()));
    out
}
