use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic update-vector distributions for quantizer benchmarks (unit scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthDist {
    Laplace,
    Gaussian,
    /// Laplace plus `k` entries of magnitude `ratio` at random positions with random signs.
    LaplaceWithOutliers { k: usize, ratio: f64 },
}

fn laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let a: f64 = rng.sample(Exp1);
    let b: f64 = rng.sample(Exp1);
    a - b
}

pub fn synth_update_vectors<R: Rng + ?Sized>(dist: SynthDist, d: usize, rng: &mut R) -> Result<Vec<f32>> {
    if d == 0 {
        return Err(Error::Domain("vector length must be at least 1".to_string()));
    }
    let out = match dist {
        SynthDist::Laplace => (0..d).map(|_| laplace(rng) as f32).collect(),
        SynthDist::Gaussian => (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect(),
        SynthDist::LaplaceWithOutliers { k, ratio } => {
            if k > d {
                return Err(Error::config(format!("{k} outliers do not fit in {d} entries")));
            }
            let mut v: Vec<f32> = (0..d).map(|_| laplace(rng) as f32).collect();
            for idx in sample(rng, d, k) {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                v[idx] = (sign * ratio) as f32;
            }
            v
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{lp_mean_norm, NormOrder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outliers_dominate_max_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = synth_update_vectors(SynthDist::LaplaceWithOutliers { k: 1, ratio: 1e6 }, 10_000, &mut rng).unwrap();
        let inf = lp_mean_norm(&v, NormOrder::Infinity).unwrap();
        let l1 = lp_mean_norm(&v, NormOrder::Finite(1.0)).unwrap();
        assert!(inf / l1 > 5e3, "{}", inf / l1);
    }

    #[test]
    fn empty_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(synth_update_vectors(SynthDist::Laplace, 0, &mut rng).is_err());
        assert!(synth_update_vectors(SynthDist::LaplaceWithOutliers { k: 3, ratio: 1.0 }, 2, &mut rng).is_err());
    }
}
