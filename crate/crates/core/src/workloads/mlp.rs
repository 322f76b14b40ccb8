use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet};

pub const INPUT_LAYER: &str = "input";
pub const HEAD_LAYER: &str = "head";

/// Two-layer tanh MLP. Layer `input` has shape `[hidden, in_dim + 1]` and layer
/// `head` has shape `[out_dim, hidden + 1]`; each row is the weights followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for MlpDims {
    fn default() -> Self {
        MlpDims {
            in_dim: 16,
            hidden: 32,
            out_dim: 1,
        }
    }
}

impl MlpDims {
    pub fn input_len(&self) -> usize {
        self.hidden * (self.in_dim + 1)
    }

    pub fn head_len(&self) -> usize {
        self.out_dim * (self.hidden + 1)
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let ok = params.layers.len() == 2
            && params.layers[0].name == INPUT_LAYER
            && params.layers[0].values.len() == self.input_len()
            && params.layers[1].name == HEAD_LAYER
            && params.layers[1].values.len() == self.head_len();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("parameter set does not match MLP {self:?}")))
        }
    }
}

/// Weights and biases drawn from `N(0, 1/fan_in)`.
pub fn init_mlp(dims: &MlpDims, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, fan_in: usize| -> Vec<f32> {
        let std = (1.0 / fan_in as f64).sqrt();
        (0..n)
            .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    };
    let input = draw(dims.input_len(), dims.in_dim);
    let head = draw(dims.head_len(), dims.hidden);
    ParamSet::new(vec![
        Layer {
            name: INPUT_LAYER.into(),
            shape: vec![dims.hidden, dims.in_dim + 1],
            values: input,
        },
        Layer {
            name: HEAD_LAYER.into(),
            shape: vec![dims.out_dim, dims.hidden + 1],
            values: head,
        },
    ])
}

fn hidden_activations(dims: &MlpDims, w1: &[f64], x: &[f64]) -> Vec<f64> {
    let row = dims.in_dim + 1;
    (0..dims.hidden)
        .map(|j| {
            let r = &w1[j * row..(j + 1) * row];
            let pre: f64 = r[..dims.in_dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + r[dims.in_dim];
            pre.tanh()
        })
        .collect()
}

fn outputs(dims: &MlpDims, w2: &[f64], h: &[f64]) -> Vec<f64> {
    let row = dims.hidden + 1;
    (0..dims.out_dim)
        .map(|k| {
            let r = &w2[k * row..(k + 1) * row];
            r[..dims.hidden].iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + r[dims.hidden]
        })
        .collect()
}

/// Forward pass for a batch of row-major inputs `xs` (`B × in_dim`).
pub fn forward(dims: &MlpDims, w1: &[f64], w2: &[f64], xs: &[f64]) -> Vec<f64> {
    xs.chunks_exact(dims.in_dim)
        .flat_map(|x| outputs(dims, w2, &hidden_activations(dims, w1, x)))
        .collect()
}

/// Mean squared error over batch and outputs.
pub fn mse_loss(dims: &MlpDims, w1: &[f64], w2: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    let pred = forward(dims, w1, w2, xs);
    pred.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / ys.len() as f64
}

/// Loss and its analytic gradient with respect to both layers.
pub fn mse_loss_grad(
    dims: &MlpDims,
    w1: &[f64],
    w2: &[f64],
    xs: &[f64],
    ys: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g1 = vec![0.0; w1.len()];
    let mut g2 = vec![0.0; w2.len()];
    let denom = ys.len() as f64;
    let (row1, row2) = (dims.in_dim + 1, dims.hidden + 1);
    let mut loss = 0.0;
    for (x, y) in xs.chunks_exact(dims.in_dim).zip(ys.chunks_exact(dims.out_dim)) {
        let h = hidden_activations(dims, w1, x);
        let out = outputs(dims, w2, &h);
        let mut dh = vec![0.0; dims.hidden];
        for k in 0..dims.out_dim {
            let err = out[k] - y[k];
            loss += err * err;
            let dout = 2.0 * err / denom;
            let r = &mut g2[k * row2..(k + 1) * row2];
            for j in 0..dims.hidden {
                r[j] += dout * h[j];
                dh[j] += dout * w2[k * row2 + j];
            }
            r[dims.hidden] += dout;
        }
        for j in 0..dims.hidden {
            let dpre = dh[j] * (1.0 - h[j] * h[j]);
            let r = &mut g1[j * row1..(j + 1) * row1];
            for (gi, xi) in r[..dims.in_dim].iter_mut().zip(x) {
                *gi += dpre * xi;
            }
            r[dims.in_dim] += dpre;
        }
    }
    (loss / denom, g1, g2)
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Draw a batch `x ~ N(0, I)`, label it with the teacher, and return the
/// student's loss and gradients.
pub fn teacher_student_batch<R: Rng + ?Sized>(
    dims: &MlpDims,
    student: &ParamSet,
    teacher: &ParamSet,
    batch: usize,
    rng: &mut R,
) -> Result<(f64, ParamSet)> {
    dims.check(student)?;
    dims.check(teacher)?;
    let xs: Vec<f64> = (0..batch * dims.in_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let ys = forward(
        dims,
        &to_f64(&teacher.layers[0].values),
        &to_f64(&teacher.layers[1].values),
        &xs,
    );
    let (loss, g1, g2) = mse_loss_grad(
        dims,
        &to_f64(&student.layers[0].values),
        &to_f64(&student.layers[1].values),
        &xs,
        &ys,
    );
    let mut grads = student.zeros_like();
    for (dst, src) in grads.layers[0].values.iter_mut().zip(&g1) {
        *dst = *src as f32;
    }
    for (dst, src) in grads.layers[1].values.iter_mut().zip(&g2) {
        *dst = *src as f32;
    }
    Ok((loss, grads))
}
