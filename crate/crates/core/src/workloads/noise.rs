use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Symmetric alpha-stable noise. `levy_alpha = 2` is Gaussian with variance
/// `2 scale²`, `levy_alpha = 1` is Cauchy, smaller values have heavier tails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub levy_alpha: f64,
    pub scale: f64,
    pub per_client_seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.levy_alpha > 0.0 && self.levy_alpha <= 2.0) {
            return Err(Error::config(format!(
                "stability exponent must be in (0, 2], got {}",
                self.levy_alpha
            )));
        }
        if !(self.scale >= 0.0) {
            return Err(Error::config("noise scale must be non-negative"));
        }
        Ok(())
    }
}

/// One standard symmetric stable draw by the Chambers-Mallows-Stuck transform.
fn cms_draw<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let u = loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            break PI * (v - 0.5);
        }
    };
    if a == 1.0 {
        return u.tan();
    }
    let w: f64 = loop {
        let w: f64 = rng.sample(Exp1);
        if w > 0.0 {
            break w;
        }
    };
    (a * u).sin() / u.cos().powf(1.0 / a) * ((((1.0 - a) * u).cos()) / w).powf((1.0 - a) / a)
}

pub fn sample_alpha_stable<R: Rng + ?Sized>(spec: &NoiseSpec, count: usize, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok((0..count)
        .map(|_| spec.scale * cms_draw(spec.levy_alpha, rng))
        .collect())
}

/// Deterministic stream for `(seed, client, step)`.
pub fn keyed_rng(seed: u64, client: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&client.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..32].copy_from_slice(b"lvynoise");
    ChaCha8Rng::from_seed(key)
}

/// `clean + noise`, with noise drawn from the stream keyed by `(seed, client, t)`.
pub fn noisy_client_grads(clean: &ParamSet, spec: &NoiseSpec, client: usize, t: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut out = clean.clone();
    if spec.scale == 0.0 {
        return Ok(out);
    }
    let mut rng = keyed_rng(spec.per_client_seed, client as u64, t);
    for v in out.layers.iter_mut().flat_map(|l| l.values.iter_mut()) {
        *v += (spec.scale * cms_draw(spec.levy_alpha, &mut rng)) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Layer;

    #[test]
    fn rejects_bad_exponent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in [0.0, -1.0, 2.5, f64::NAN] {
            let spec = NoiseSpec {
                levy_alpha: a,
                scale: 1.0,
                per_client_seed: 0,
            };
            assert!(matches!(sample_alpha_stable(&spec, 3, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_scale_is_identity() {
        let clean = ParamSet::new(vec![Layer {
            name: "w".into(),
            shape: vec![3],
            values: vec![1.0, 2.0, 3.0],
        }]);
        let spec = NoiseSpec {
            levy_alpha: 0.5,
            scale: 0.0,
            per_client_seed: 9,
        };
        assert_eq!(noisy_client_grads(&clean, &spec, 3, 7).unwrap(), clean);
    }

    #[test]
    fn noise_is_keyed() {
        let clean = ParamSet::new(vec![Layer::zeros("w", vec![64])]);
        let spec = NoiseSpec {
            levy_alpha: 1.5,
            scale: 1.0,
            per_client_seed: 9,
        };
        let a = noisy_client_grads(&clean, &spec, 2, 5).unwrap();
        let b = noisy_client_grads(&clean, &spec, 2, 5).unwrap();
        let c = noisy_client_grads(&clean, &spec, 3, 5).unwrap();
        let d = noisy_client_grads(&clean, &spec, 2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
