//! Alpha-beta cost model for the four majority-vote implementations.
//!
//! `alpha` is seconds per message, `beta` seconds per bit. Pack/unpack compute
//! is not modeled.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostAlgo {
    PsNaive,
    PsEfficient,
    DirectAllreduce,
    Compressed1Bit,
}

impl CostAlgo {
    pub const ALL: [CostAlgo; 4] = [
        CostAlgo::PsNaive,
        CostAlgo::PsEfficient,
        CostAlgo::DirectAllreduce,
        CostAlgo::Compressed1Bit,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CostAlgo::PsNaive => "ps_naive",
            CostAlgo::PsEfficient => "ps_efficient",
            CostAlgo::DirectAllreduce => "direct_allreduce",
            CostAlgo::Compressed1Bit => "compressed_1bit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub alpha: f64,
    pub beta: f64,
    pub workers: u32,
    pub params: u64,
    pub word_bits: u32,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("alpha and beta must be non-negative"));
        }
        if self.workers < 2 || self.params == 0 || self.word_bits == 0 {
            return Err(Error::config("need P >= 2, N >= 1 and b >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub latency_s: f64,
    pub bandwidth_s: f64,
    pub total_s: f64,
}

/// Closed-form latency and bandwidth terms; `log2` is real-valued.
pub fn cost(algo: CostAlgo, cp: &CostParams) -> Cost {
    let p = cp.workers as f64;
    let n = cp.params as f64;
    let b = cp.word_bits as f64;
    let lg = p.log2();
    let frac = (p - 1.0) / p;
    let (lat, bw) = match algo {
        CostAlgo::PsNaive => (2.0 * (p - 1.0), 2.0 * p * n * b),
        CostAlgo::PsEfficient => (2.0 * lg, 3.0 * frac * n * b),
        CostAlgo::DirectAllreduce => (2.0 * lg, 2.0 * frac * n * (lg + 1.0)),
        CostAlgo::Compressed1Bit => (p - 1.0 + lg, (1.0 + frac) * n),
    };
    let latency_s = lat * cp.alpha;
    let bandwidth_s = bw * cp.beta;
    Cost {
        latency_s,
        bandwidth_s,
        total_s: latency_s + bandwidth_s,
    }
}

/// Grid for [`sweep`]. Every `(P, N, beta)` combination is paired with each
/// `alpha/beta` ratio, so `alpha = ratio * beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub workers: Vec<u32>,
    pub params: Vec<u64>,
    pub betas: Vec<f64>,
    pub alpha_beta_ratios: Vec<f64>,
    pub word_bits: u32,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            workers: vec![2, 4, 8, 16, 32, 64, 128],
            params: vec![1_000_000, 100_000_000],
            betas: vec![1e-10, 1e-9],
            alpha_beta_ratios: vec![0.0, 1e3, 1e6, 1e9],
            word_bits: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub algo: String,
    #[serde(rename = "P")]
    pub workers: u32,
    #[serde(rename = "N")]
    pub params: u64,
    pub alpha: f64,
    pub beta: f64,
    pub latency_s: f64,
    pub bandwidth_s: f64,
    pub total_s: f64,
    pub is_argmin: bool,
}

pub const COST_CSV_HEADER: &str = "algo,P,N,alpha,beta,latency_s,bandwidth_s,total_s,is_argmin";

/// One row per algorithm per grid point; the cheapest algorithm at each point
/// is flagged (earlier algorithms win exact ties).
pub fn sweep(grid: &SweepGrid) -> Result<Vec<CostRow>> {
    if grid.workers.is_empty()
        || grid.params.is_empty()
        || grid.betas.is_empty()
        || grid.alpha_beta_ratios.is_empty()
    {
        return Err(Error::config("sweep grid has an empty axis"));
    }
    let mut rows = Vec::new();
    for &workers in &grid.workers {
        for &params in &grid.params {
            for &beta in &grid.betas {
                for &ratio in &grid.alpha_beta_ratios {
                    let cp = CostParams {
                        alpha: ratio * beta,
                        beta,
                        workers,
                        params,
                        word_bits: grid.word_bits,
                    };
                    cp.validate()?;
                    let costs: Vec<Cost> = CostAlgo::ALL.iter().map(|a| cost(*a, &cp)).collect();
                    let best = costs
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, c)| if c.total_s < costs[best].total_s { i } else { best });
                    rows.extend(CostAlgo::ALL.iter().zip(&costs).enumerate().map(|(i, (a, c))| CostRow {
                        algo: a.name().to_string(),
                        workers,
                        params,
                        alpha: cp.alpha,
                        beta,
                        latency_s: c.latency_s,
                        bandwidth_s: c.bandwidth_s,
                        total_s: c.total_s,
                        is_argmin: i == best,
                    }));
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_cost_csv<W: Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(p: u32, n: u64, alpha: f64, beta: f64) -> CostParams {
        CostParams {
            alpha,
            beta,
            workers: p,
            params: n,
            word_bits: 32,
        }
    }

    #[test]
    fn two_workers_bandwidth() {
        let cp = point(2, 1000, 0.0, 1.0);
        assert_eq!(cost(CostAlgo::DirectAllreduce, &cp).bandwidth_s, 2000.0);
        assert_eq!(cost(CostAlgo::Compressed1Bit, &cp).bandwidth_s, 1500.0);
    }

    #[test]
    fn latency_terms() {
        let cp = point(8, 10, 1.0, 0.0);
        assert_eq!(cost(CostAlgo::PsNaive, &cp).latency_s, 14.0);
        assert_eq!(cost(CostAlgo::PsEfficient, &cp).latency_s, 6.0);
        assert_eq!(cost(CostAlgo::DirectAllreduce, &cp).latency_s, 6.0);
        assert_eq!(cost(CostAlgo::Compressed1Bit, &cp).latency_s, 10.0);
        // non power of two uses real log2
        let cp = point(6, 10, 1.0, 0.0);
        assert!((cost(CostAlgo::DirectAllreduce, &cp).latency_s - 2.0 * 6f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn single_point_sweep() {
        let grid = SweepGrid {
            workers: vec![8],
            params: vec![1000],
            betas: vec![1e-9],
            alpha_beta_ratios: vec![0.0],
            word_bits: 32,
        };
        let rows = sweep(&grid).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.is_argmin).count(), 1);
        assert!(rows.iter().find(|r| r.is_argmin).unwrap().algo == "compressed_1bit");
    }

    #[test]
    fn empty_axis_rejected() {
        let mut grid = SweepGrid::default();
        grid.workers.clear();
        assert!(sweep(&grid).is_err());
    }

    #[test]
    fn monotone_in_n() {
        for algo in CostAlgo::ALL {
            let mut last = 0.0;
            for n in [1u64, 10, 100, 1000, 1_000_000] {
                let c = cost(algo, &point(8, n, 1e-6, 1e-9)).total_s;
                assert!(c >= last);
                last = c;
            }
        }
    }

    #[test]
    fn csv_header() {
        let rows = sweep(&SweepGrid {
            workers: vec![4],
            params: vec![10],
            betas: vec![1.0],
            alpha_beta_ratios: vec![1.0],
            word_bits: 32,
        })
        .unwrap();
        let mut buf = Vec::new();
        write_cost_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), COST_CSV_HEADER);
        assert_eq!(text.lines().count(), 5);
    }
}
