//! Update-vector quantization.
//!
//! Two families live here. The max-norm quantizer rescales by `‖x‖_∞` and
//! rounds stochastically; the mean-norm (`L_p`) quantizer rescales by
//! `(2^{n-1}-1) / (2 M_p(x))` and rounds to nearest, clamping the few entries
//! that land outside the representable range. Because `M_p` for small `p`
//! barely moves when one coordinate is huge, the `L_p` family keeps most
//! coordinates nonzero on Laplace-like update vectors with outliers.
//!
//! Sign handling (exact ternary vs. alternating zero resolution) and the
//! bit-level packing used on the wire are also in this module.

mod pack;

pub use pack::{pack, pack_signs, unpack, unpack_signs, PackedBits, SUPPORTED_WIDTHS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order `p` of the mean norm `M_p(x) = (1/d Σ |x_j|^p)^{1/p}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormRepr", into = "NormRepr")]
pub enum NormOrder {
    /// The `p → 0` limit: geometric mean of the nonzero magnitudes.
    Zero,
    Finite(f64),
    Infinity,
}

impl NormOrder {
    pub fn label(&self) -> String {
        match self {
            NormOrder::Zero => "L0".to_string(),
            NormOrder::Finite(p) => format!("L{p}"),
            NormOrder::Infinity => "Linf".to_string(),
        }
    }
}

/// JSON form: a number (`0` means the geometric-mean limit) or `"inf"`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NormRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<NormRepr> for NormOrder {
    type Error = String;

    fn try_from(repr: NormRepr) -> std::result::Result<Self, Self::Error> {
        match repr {
            NormRepr::Number(p) if p == 0.0 => Ok(NormOrder::Zero),
            NormRepr::Number(p) if p.is_infinite() && p > 0.0 => Ok(NormOrder::Infinity),
            NormRepr::Number(p) if p.is_finite() && p > 0.0 => Ok(NormOrder::Finite(p)),
            NormRepr::Number(p) => Err(format!("norm order must be 0, positive or inf, got {p}")),
            NormRepr::Text(s) => match s.to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "max" => Ok(NormOrder::Infinity),
                other => other
                    .parse::<f64>()
                    .map_err(|e| format!("bad norm order {other:?}: {e}"))
                    .and_then(|p| NormOrder::try_from(NormRepr::Number(p))),
            },
        }
    }
}

impl From<NormOrder> for NormRepr {
    fn from(order: NormOrder) -> Self {
        match order {
            NormOrder::Zero => NormRepr::Number(0.0),
            NormOrder::Finite(p) => NormRepr::Number(p),
            NormOrder::Infinity => NormRepr::Text("inf".to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round half to even.
    Nearest,
    /// Unbiased stochastic rounding.
    Stochastic,
}

/// Configuration of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// Output bitwidth `n`; levels span `[-(2^{n-1}-1), 2^{n-1}-1]`.
    pub bits: u8,
    pub norm: NormOrder,
    pub rounding: Rounding,
    /// Quantize `sign(x) ln(1 + |x|/M_1(x))` instead of `x`.
    #[serde(default)]
    pub log_transform: bool,
    /// Map entries that would round to zero (but are not zero) to `±1`.
    #[serde(default)]
    pub no_zero: bool,
}

impl QuantSpec {
    /// Mean-norm quantizer with nearest rounding.
    pub fn lp(bits: u8, norm: NormOrder) -> Self {
        QuantSpec {
            bits,
            norm,
            rounding: Rounding::Nearest,
            log_transform: false,
            no_zero: false,
        }
    }

    /// The classic max-norm quantizer with stochastic rounding.
    pub fn max_norm(bits: u8) -> Self {
        QuantSpec {
            bits,
            norm: NormOrder::Infinity,
            rounding: Rounding::Stochastic,
            log_transform: false,
            no_zero: false,
        }
    }

    /// Largest representable magnitude, `2^{n-1} - 1`.
    pub fn max_level(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    pub fn validate(&self) -> Result<()> {
        // one bit leaves no nonzero level; the sign codec covers that case
        if self.bits < 2 || self.bits > 16 {
            return Err(Error::config(format!(
                "quantizer bitwidth must be in 2..=16, got {}",
                self.bits
            )));
        }
        if let NormOrder::Finite(p) = self.norm {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::config(format!("invalid norm order {p}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut s = format!("{}bit-{}", self.bits, self.norm.label());
        if self.log_transform {
            s.push_str("-log");
        }
        if self.no_zero {
            s.push_str("-nozero");
        }
        if self.rounding == Rounding::Stochastic && self.norm != NormOrder::Infinity {
            s.push_str("-sround");
        }
        s
    }
}

/// `(1/d Σ |x_j|^p)^{1/p}`, the max norm for `p = ∞`, and the geometric mean
/// of the nonzero magnitudes for `p = 0` (zero if every entry is zero).
pub fn lp_mean_norm(x: &[f32], order: NormOrder) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Domain("mean norm of an empty vector".to_string()));
    }
    let max = x.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    match order {
        NormOrder::Infinity => Ok(max),
        NormOrder::Zero => {
            // relative to the max, so power-of-two rescaling commutes exactly
            let (sum, n) = x
                .iter()
                .filter(|v| **v != 0.0)
                .fold((0.0f64, 0usize), |(s, n), &v| (s + ((v as f64).abs() / max).ln(), n + 1));
            if n == 0 {
                Ok(0.0)
            } else {
                Ok(max * (sum / n as f64).exp())
            }
        }
        NormOrder::Finite(p) => {
            if max == 0.0 {
                return Ok(0.0);
            }
            // normalize by the max so |x|^p cannot overflow
            let mean = x
                .iter()
                .map(|&v| ((v as f64).abs() / max).powf(p))
                .sum::<f64>()
                / x.len() as f64;
            Ok(max * mean.powf(1.0 / p))
        }
    }
}

/// Stochastic rounding: `⌊v⌋` with probability `⌈v⌉ - v`, else `⌈v⌉`.
pub fn sround<R: Rng + ?Sized>(v: f64, rng: &mut R) -> i64 {
    let floor = v.floor();
    let frac = v - floor;
    if frac > 0.0 && rng.random::<f64>() < frac {
        floor as i64 + 1
    } else {
        floor as i64
    }
}

/// Integer codes together with what is needed to map them back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: Vec<i32>,
    /// Codes are `round(scale * y)` where `y` is the (possibly log-transformed) input.
    pub scale: f64,
    /// `Some(s)` when the log transform with base scale `s` was applied.
    pub log_scale: Option<f64>,
}

impl Quantized {
    pub fn dequantize(&self) -> Vec<f64> {
        if self.scale == 0.0 {
            return vec![0.0; self.values.len()];
        }
        self.values
            .iter()
            .map(|&q| {
                let y = q as f64 / self.scale;
                match self.log_scale {
                    Some(s) => y.signum() * s * (y.abs().exp_m1()),
                    None => y,
                }
            })
            .collect()
    }
}

/// Quantize `x` under `spec`. The random stream is only consumed for stochastic rounding.
pub fn quantize<R: Rng + ?Sized>(x: &[f32], spec: &QuantSpec, rng: &mut R) -> Result<Quantized> {
    spec.validate()?;
    if x.is_empty() {
        return Err(Error::Domain("cannot quantize an empty vector".to_string()));
    }
    let levels = spec.max_level() as f64;

    let (input, log_scale) = if spec.log_transform {
        let s = lp_mean_norm(x, NormOrder::Finite(1.0))?;
        if s == 0.0 {
            (vec![0.0f32; x.len()], Some(0.0))
        } else {
            let y = x
                .iter()
                .map(|&v| {
                    let v = v as f64;
                    (v.signum() * (v.abs() / s).ln_1p()) as f32
                })
                .collect();
            (y, Some(s))
        }
    } else {
        (x.to_vec(), None)
    };

    let norm = lp_mean_norm(&input, spec.norm)?;
    if norm == 0.0 {
        return Ok(Quantized {
            values: vec![0; x.len()],
            scale: 0.0,
            log_scale,
        });
    }
    let scale = match spec.norm {
        NormOrder::Infinity => levels / norm,
        _ => levels / (2.0 * norm),
    };

    let values = input
        .iter()
        .zip(x)
        .map(|(&y, &orig)| {
            let v = scale * y as f64;
            let r = match spec.rounding {
                Rounding::Nearest => v.round_ties_even() as i64,
                Rounding::Stochastic => sround(v, rng),
            };
            let mut q = r.clamp(-(levels as i64), levels as i64) as i32;
            if spec.no_zero && q == 0 && orig != 0.0 {
                q = if orig > 0.0 { 1 } else { -1 };
            }
            q
        })
        .collect();

    Ok(Quantized {
        values,
        scale,
        log_scale,
    })
}

/// How exact zeros are resolved when taking a sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMode {
    /// `sign(0) = 0`.
    ExactTernary,
    /// `0 → +1` on odd iterations and `0 → -1` on even ones.
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignPolicy {
    pub mode: ZeroMode,
    pub iteration: u64,
}

impl SignPolicy {
    pub fn exact() -> Self {
        SignPolicy {
            mode: ZeroMode::ExactTernary,
            iteration: 0,
        }
    }

    pub fn alternating(iteration: u64) -> Self {
        SignPolicy {
            mode: ZeroMode::Alternating,
            iteration,
        }
    }

    /// The value a zero maps to under this policy.
    pub fn zero_value(&self) -> i8 {
        match self.mode {
            ZeroMode::ExactTernary => 0,
            ZeroMode::Alternating if self.iteration % 2 == 1 => 1,
            ZeroMode::Alternating => -1,
        }
    }

    pub fn sign<T: Signum>(&self, v: T) -> i8 {
        match v.signum_i8() {
            0 => self.zero_value(),
            s => s,
        }
    }
}

/// Three-valued sign for the scalar types that flow through the pipeline.
pub trait Signum: Copy {
    fn signum_i8(self) -> i8;
}

macro_rules! impl_signum {
    (float: $($t:ty),*) => {$(
        impl Signum for $t {
            fn signum_i8(self) -> i8 {
                if self > 0.0 { 1 } else if self < 0.0 { -1 } else { 0 }
            }
        }
    )*};
    (int: $($t:ty),*) => {$(
        impl Signum for $t {
            fn signum_i8(self) -> i8 {
                self.signum() as i8
            }
        }
    )*};
}

impl_signum!(float: f32, f64);
impl_signum!(int: i8, i32, i64);

/// Elementwise sign with zeros resolved by `policy`.
pub fn apply_sign<T: Signum>(x: &[T], policy: SignPolicy) -> Vec<i8> {
    x.iter().map(|&v| policy.sign(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn mean_norm_examples() {
        let x = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(lp_mean_norm(&x, NormOrder::Finite(1.0)).unwrap(), 1.0);
        assert_eq!(lp_mean_norm(&[3.0, 4.0], NormOrder::Infinity).unwrap(), 4.0);
        let g = lp_mean_norm(&[1.0, 4.0], NormOrder::Zero).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
        // the small-p limit approaches the geometric mean
        let near = lp_mean_norm(&[1.0, 4.0], NormOrder::Finite(1e-4)).unwrap();
        assert!((near - g).abs() < 1e-3, "{near}");
        assert!(matches!(
            lp_mean_norm(&[], NormOrder::Finite(1.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn geometric_mean_skips_zeros() {
        assert_eq!(lp_mean_norm(&[0.0, 0.0], NormOrder::Zero).unwrap(), 0.0);
        let g = lp_mean_norm(&[0.0, 2.0, 8.0], NormOrder::Zero).unwrap();
        assert!((g - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mean_norm_handles_huge_values() {
        let x = [3.0e38f32, 3.0e38];
        let m = lp_mean_norm(&x, NormOrder::Finite(2.0)).unwrap();
        assert!((m / 3.0e38 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l1_quantize_examples() {
        let spec = QuantSpec::lp(4, NormOrder::Finite(1.0));
        let q = quantize(&[1.0, -1.0, 1.0, -1.0], &spec, &mut rng()).unwrap();
        assert_eq!(q.values, vec![4, -4, 4, -4]);
        let q = quantize(&[7.0, 1.0, 1.0, 1.0], &spec, &mut rng()).unwrap();
        assert_eq!(q.values, vec![7, 1, 1, 1]);
    }

    #[test]
    fn max_norm_collapses_small_entries() {
        let spec = QuantSpec::max_norm(4);
        let mut r = rng();
        let trials = 2000;
        let collapsed = (0..trials)
            .filter(|_| quantize(&[1000.0, 1.0, 1.0, 1.0], &spec, &mut r).unwrap().values == [7, 0, 0, 0])
            .count();
        assert!(collapsed as f64 / trials as f64 >= 0.97, "{collapsed}");
    }

    #[test]
    fn zero_vector_quantizes_to_zero() {
        let spec = QuantSpec::lp(8, NormOrder::Finite(1.0));
        let q = quantize(&[0.0; 5], &spec, &mut rng()).unwrap();
        assert_eq!(q.values, vec![0; 5]);
        assert_eq!(q.dequantize(), vec![0.0; 5]);
    }

    #[test]
    fn no_zero_maps_small_entries_to_unit() {
        let mut spec = QuantSpec::max_norm(4);
        spec.rounding = Rounding::Nearest;
        spec.no_zero = true;
        let q = quantize(&[1000.0, 1.0, -1.0, 0.0], &spec, &mut rng()).unwrap();
        assert_eq!(q.values, vec![7, 1, -1, 0]);
    }

    #[test]
    fn log_transform_roundtrips_approximately() {
        let mut spec = QuantSpec::lp(8, NormOrder::Finite(1.0));
        spec.log_transform = true;
        let x = [0.5f32, -2.0, 0.1, 1.5, -1.0];
        let q = quantize(&x, &spec, &mut rng()).unwrap();
        assert!(q.log_scale.is_some());
        let back = q.dequantize();
        for (a, b) in x.iter().zip(&back) {
            assert_eq!(a.signum() as f64, b.signum());
            assert!((*a as f64 - b).abs() < 0.2 * (*a as f64).abs().max(0.2), "{a} {b}");
        }
    }

    #[test]
    fn sround_examples() {
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(sround(3.0, &mut r), 3);
            let v = sround(-0.5, &mut r);
            assert!(v == -1 || v == 0);
        }
    }

    #[test]
    fn sign_policies() {
        assert_eq!(apply_sign(&[2.5f32, -0.1, 0.0], SignPolicy::exact()), vec![1, -1, 0]);
        assert_eq!(apply_sign(&[0.0f32], SignPolicy::alternating(3)), vec![1]);
        assert_eq!(apply_sign(&[0.0f32], SignPolicy::alternating(4)), vec![-1]);
        assert_eq!(apply_sign(&[2i32, 0, -5], SignPolicy::alternating(1)), vec![1, 1, -1]);
    }

    #[test]
    fn bad_bitwidth_is_config_error() {
        let spec = QuantSpec::lp(0, NormOrder::Finite(1.0));
        assert!(matches!(quantize(&[1.0], &spec, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn norm_order_json_forms() {
        let parse = |s: &str| serde_json::from_str::<NormOrder>(s).unwrap();
        assert_eq!(parse("0"), NormOrder::Zero);
        assert_eq!(parse("1"), NormOrder::Finite(1.0));
        assert_eq!(parse("\"inf\""), NormOrder::Infinity);
        assert!(serde_json::from_str::<NormOrder>("-1").is_err());
        let text = serde_json::to_string(&NormOrder::Infinity).unwrap();
        assert_eq!(serde_json::from_str::<NormOrder>(&text).unwrap(), NormOrder::Infinity);
    }
}
