//! Run configuration shared by mining, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CvrError, Result};

/// `start + i * 0.1` for `i in 0..count`, computed from integers so grid
/// points print and compare exactly.
pub fn tenths(start_tenths: u32, count: u32) -> Vec<f64> {
    (0..count).map(|i| f64::from(start_tenths + i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Embedding dimension; 0 means "take it from the clip store".
    pub d: usize,
    /// Context window: maximum number of preceding clips.
    #[serde(rename = "L")]
    pub context_len: usize,
    pub pool_size: usize,
    pub max_state_negs: usize,
    pub max_ident_negs: usize,
    pub tau: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub wv_grid: Vec<f64>,
    pub wp_grid: Vec<f64>,
    pub dropout_rate: f64,
    pub n_heads: usize,
    /// Drop zero-vector fallback negatives from the local losses instead of
    /// keeping them in the denominator with similarity 0.
    pub drop_zero_negatives: bool,
    /// Weight of the visual term in heuristic late fusion.
    pub alpha: f64,
    /// Fraction of training videos used for fitting; the rest is the
    /// held-out validation subset for ensemble-weight selection.
    pub fit_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 0,
            context_len: 5,
            pool_size: 10,
            max_state_negs: 3,
            max_ident_negs: 3,
            tau: 0.07,
            lambda_s: 5.0,
            lambda_i: 1.0,
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 300,
            seed: 42,
            wv_grid: tenths(0, 6),
            wp_grid: tenths(2, 14),
            dropout_rate: 0.1,
            n_heads: 8,
            drop_zero_negatives: false,
            alpha: 0.5,
            fit_frac: 0.8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CvrError::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.pool_size < 2 {
            return bad("pool_size must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.n_heads == 0 {
            return bad("n_heads must be positive");
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return bad("lr and weight_decay must be nonnegative");
        }
        if self.lambda_s < 0.0 || self.lambda_i < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        if !(self.fit_frac > 0.0 && self.fit_frac < 1.0) {
            return bad("fit_frac must lie in (0, 1)");
        }
        if self.wv_grid.iter().chain(&self.wp_grid).any(|w| *w < 0.0 || !w.is_finite()) {
            return bad("ensemble grids must hold nonnegative finite weights");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| CvrError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
