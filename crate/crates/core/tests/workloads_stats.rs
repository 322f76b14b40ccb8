use lioncub::optimizer::{lion_step, LionHyper, WorkerState};
use lioncub::params::{Layer, ParamSet};
use lioncub::selftest::gradient_check_error;
use lioncub::workloads::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Cauchy, ContinuousCDF, Normal};

fn spec(levy_alpha: f64, scale: f64) -> NoiseSpec {
    NoiseSpec {
        levy_alpha,
        scale,
        per_client_seed: 11,
    }
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[test]
fn gaussian_special_case_passes_ks() {
    let gamma = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = sample_alpha_stable(&spec(2.0, gamma), 100_000, &mut rng).unwrap();
    let normal = Normal::new(0.0, (2.0f64).sqrt() * gamma).unwrap();
    let d = ks_statistic(xs, |x| normal.cdf(x));
    assert!(d < 0.01, "KS statistic {d}");
}

#[test]
fn cauchy_special_case_interquartile_range() {
    let gamma = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut xs = sample_alpha_stable(&spec(1.0, gamma), 100_000, &mut rng).unwrap();
    xs.sort_by(f64::total_cmp);
    let iqr = quantile(&xs, 0.75) - quantile(&xs, 0.25);
    let cauchy = Cauchy::new(0.0, gamma).unwrap();
    let oracle = cauchy.inverse_cdf(0.75) - cauchy.inverse_cdf(0.25);
    assert!((oracle - 2.0 * gamma).abs() < 1e-9);
    assert!((iqr / oracle - 1.0).abs() < 0.02, "iqr {iqr} oracle {oracle}");
}

#[test]
fn half_stable_has_finite_median_but_exploding_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = sample_alpha_stable(&spec(0.5, 1.0), 1_000_000, &mut rng).unwrap();
    let mut abs: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let median = quantile(&abs, 0.5);
    assert!(median.is_finite() && median > 0.0);
    let var = |n: usize| {
        let m = xs[..n].iter().sum::<f64>() / n as f64;
        xs[..n].iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64
    };
    let v: Vec<f64> = [1_000, 10_000, 100_000, 1_000_000].iter().map(|&n| var(n)).collect();
    assert!(v[3] > 1e3 * v[0], "variances {v:?}");
}

#[test]
fn clients_draw_independent_noise() {
    let clean = ParamSet::new(vec![Layer::zeros("w", vec![100_000])]);
    let s = spec(2.0, 1.0);
    let a = noisy_client_grads(&clean, &s, 0, 5).unwrap().flatten();
    let b = noisy_client_grads(&clean, &s, 1, 5).unwrap().flatten();
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().map(|&x| x as f64).sum::<f64>() / n,
        b.iter().map(|&x| x as f64).sum::<f64>() / n,
    );
    let cov: f64 = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum::<f64>() / n;
    let sa = (a.iter().map(|&x| (x as f64 - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|&y| (y as f64 - mb).powi(2)).sum::<f64>() / n).sqrt();
    let corr = cov / (sa * sb);
    assert!(corr.abs() < 0.02, "correlation {corr}");
}

fn excess_kurtosis(x: &[f32]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let m2 = x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|&v| (v as f64 - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

#[test]
fn synthetic_kurtosis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lap = synth_update_vectors(SynthDist::Laplace, 100_000, &mut rng).unwrap();
    let k = excess_kurtosis(&lap);
    assert!((k - 3.0).abs() < 0.3, "laplace kurtosis {k}");
    let gauss = synth_update_vectors(SynthDist::Gaussian, 100_000, &mut rng).unwrap();
    let k = excess_kurtosis(&gauss);
    assert!(k.abs() < 0.2, "gaussian kurtosis {k}");
}

#[test]
fn gradients_match_finite_differences_at_init() {
    for seed in [1, 2, 3] {
        let err = gradient_check_error(&MlpDims::default(), seed, 1e-4, 5);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn gradients_match_finite_differences_after_training() {
    let dims = MlpDims::default();
    let teacher = init_mlp(&dims, 100);
    let mut state = WorkerState::new(init_mlp(&dims, 101));
    let h = LionHyper::constant(1e-3, 0.9, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (_, g) = teacher_student_batch(&dims, &state.params, &teacher, 32, &mut rng).unwrap();
        lion_step(&mut state, &g, &h).unwrap();
    }
    // central differences on every coordinate of a few rows of both layers
    let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (w1, w2) = (f64s(&state.params.layers[0].values), f64s(&state.params.layers[1].values));
    let t1 = f64s(&teacher.layers[0].values);
    let t2 = f64s(&teacher.layers[1].values);
    let xs: Vec<f64> = (0..8 * dims.in_dim).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
    let ys = forward(&dims, &t1, &t2, &xs);
    let (_, g1, g2) = mse_loss_grad(&dims, &w1, &w2, &xs, &ys);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for (layer, len) in [(0, 40), (1, w2.len())] {
        for j in 0..len {
            let eval = |d: f64| {
                let (mut a, mut b) = (w1.clone(), w2.clone());
                if layer == 0 {
                    a[j] += d;
                } else {
                    b[j] += d;
                }
                mse_loss(&dims, &a, &b, &xs, &ys)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = if layer == 0 { g1[j] } else { g2[j] };
            if analytic.abs().max(numeric.abs()) > 1e-6 {
                worst = worst.max((numeric - analytic).abs() / analytic.abs().max(numeric.abs()));
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
