//! Picks hash-table parameters `(K, L, R)` for a sparse layer.
//!
//! With `d` neurons hashed into `2^K` buckets per table, a well spread index
//! holds `d / 2^K` neurons per bucket, so `L` tables return about
//! `L * d / 2^K` candidates. Asking for `c1` times the `s * d` neurons we
//! need gives `L = c1 * s * 2^K`. Hashing costs `K * L` and evaluating the
//! sample costs `s * d` (both per input coordinate), which must stay within
//! `c2 * d`. We scan `K = 1, 2, ...` and keep the last `K` that satisfies the
//! cost budget and `L <= l_max`. Buckets are capped at twice their expected
//! occupancy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of hash bits considered.
pub const MAX_K: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutotuneConfig {
    /// Safety factor on the expected number of retrieved neurons.
    pub c1: f64,
    /// Target sparse/dense cost ratio.
    pub c2: f64,
    pub l_max: u32,
}

impl Default for AutotuneConfig {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 0.1,
            l_max: 256,
        }
    }
}

impl AutotuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::InvalidArgument(format!("c1 must be > 0, got {}", self.c1)));
        }
        if !(self.c2 > 0.0 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "c2 must lie in (0, 1), got {}",
                self.c2
            )));
        }
        if self.l_max == 0 {
            return Err(Error::InvalidArgument("l_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutotunePlan {
    pub k_bits: u32,
    pub num_tables: u32,
    pub bucket_cap: u32,
    pub config: AutotuneConfig,
    pub layer_dim: usize,
    pub prev_dim: usize,
    pub sparsity: f64,
}

impl AutotunePlan {
    /// Builds a plan with explicit `(K, L, R)`, bypassing the search. Used for
    /// grid searches and hand-built indexes.
    pub fn manual(
        k_bits: u32,
        num_tables: u32,
        bucket_cap: u32,
        layer_dim: usize,
        prev_dim: usize,
        sparsity: f64,
    ) -> Result<Self> {
        if !(1..=MAX_K).contains(&k_bits) {
            return Err(Error::InvalidArgument(format!("K must lie in 1..=32, got {k_bits}")));
        }
        if num_tables == 0 || bucket_cap == 0 {
            return Err(Error::InvalidArgument("L and R must be at least 1".into()));
        }
        if layer_dim == 0 || prev_dim == 0 {
            return Err(Error::InvalidArgument("layer dims must be positive".into()));
        }
        if !(sparsity > 0.0 && sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must lie in (0, 1], got {sparsity}"
            )));
        }
        Ok(Self {
            k_bits,
            num_tables,
            bucket_cap,
            config: AutotuneConfig::default(),
            layer_dim,
            prev_dim,
            sparsity,
        })
    }

    pub fn num_buckets(&self) -> usize {
        1usize << self.k_bits
    }
}

/// `L(K) = max(1, floor(c1 * s * 2^K + 0.5))`.
pub fn tables_for(k_bits: u32, sparsity: f64, c1: f64) -> u64 {
    let raw = c1 * sparsity * 2f64.powi(k_bits as i32);
    ((raw + 0.5).floor() as u64).max(1)
}

/// `R = ceil(2 * d / 2^K)`.
pub fn bucket_cap_for(k_bits: u32, dim: usize) -> u32 {
    let buckets = 1u64 << k_bits;
    let cap = (2 * dim as u64).div_ceil(buckets);
    cap.max(1) as u32
}

fn within_budget(k_bits: u32, tables: u64, sparsity: f64, dim: usize, c2: f64) -> bool {
    let hashing = (k_bits as u64 * tables) as f64;
    hashing + sparsity * dim as f64 <= c2 * dim as f64
}

pub fn autotune(dim: usize, prev_dim: usize, sparsity: f64, cfg: &AutotuneConfig) -> Result<AutotunePlan> {
    cfg.validate()?;
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("layer dim must be >= 2, got {dim}")));
    }
    if prev_dim == 0 {
        return Err(Error::InvalidArgument("previous layer dim must be positive".into()));
    }
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must lie in (0, 1), got {sparsity}"
        )));
    }

    let mut best: Option<(u32, u64)> = None;
    for k in 1..=MAX_K {
        let l = tables_for(k, sparsity, cfg.c1);
        if !within_budget(k, l, sparsity, dim, cfg.c2) || l > cfg.l_max as u64 {
            break;
        }
        best = Some((k, l));
    }

    let (k_bits, num_tables) = best.ok_or(Error::InfeasibleSparsity {
        sparsity,
        dim,
        budget: cfg.c2 * dim as f64,
    })?;
    Ok(AutotunePlan {
        k_bits,
        num_tables: num_tables as u32,
        bucket_cap: bucket_cap_for(k_bits, dim),
        config: *cfg,
        layer_dim: dim,
        prev_dim,
        sparsity,
    })
}

/// Predicted sparse/dense cost ratio `(K*L + s*d) / d`.
pub fn plan_cost_ratio(plan: &AutotunePlan) -> f64 {
    let d = plan.layer_dim as f64;
    (plan.k_bits as f64 * plan.num_tables as f64 + plan.sparsity * d) / d
}
