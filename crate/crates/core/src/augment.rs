//! Two noisy full-row views of a clean batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};

/// What happens to a masked entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Set to zero, the same marker used for zero-filled rows.
    #[default]
    Zero,
    /// Replace with the same column's value from a random row of the batch.
    Swap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of the Gaussian added to the second view.
    pub noise_level: f64,
    /// Per-entry masking probability.
    pub mask_prob: f64,
    pub second_view_gaussian: bool,
    pub mask_mode: MaskMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_level: 0.1,
            mask_prob: 0.2,
            second_view_gaussian: true,
            mask_mode: MaskMode::Zero,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidParameter(format!(
                "mask probability must lie in [0, 1], got {}",
                self.mask_prob
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise level must be a finite value >= 0, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Zeroes each entry independently with probability `p`.
pub fn binomial_mask(m: &Matrix, p: f64, rng: &mut RngStream) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        if rng.random_bool(p) {
            *v = 0.0;
        }
    }
    out
}

/// Swap noise: each entry, with probability `p`, takes the value of the same
/// column in a uniformly chosen row.
pub fn swap_mask(m: &Matrix, p: f64, rng: &mut RngStream) -> Matrix {
    let mut out = m.clone();
    if m.rows() == 0 {
        return out;
    }
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if rng.random_bool(p) {
                let src = rng.random_range(0..m.rows());
                out.set(r, c, m.get(src, c));
            }
        }
    }
    out
}

/// Adds i.i.d. `N(0, σ²)` to every entry.
pub fn gaussian_noise(m: &Matrix, sigma: f64, rng: &mut RngStream) -> Matrix {
    if sigma == 0.0 {
        return m.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated as finite and >= 0");
    let mut out = m.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}

fn mask(m: &Matrix, cfg: &AugmentConfig, rng: &mut RngStream) -> Matrix {
    match cfg.mask_mode {
        MaskMode::Zero => binomial_mask(m, cfg.mask_prob, rng),
        MaskMode::Swap => swap_mask(m, cfg.mask_prob, rng),
    }
}

/// View 1 is the masked batch; view 2 is an independently masked batch plus
/// Gaussian noise. Both keep the full row; the clean batch is not touched.
pub fn make_views(b: &Matrix, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    let view1 = mask(b, cfg, rng);
    let mut view2 = mask(b, cfg, rng);
    if cfg.second_view_gaussian {
        view2 = gaussian_noise(&view2, cfg.noise_level, rng);
    }
    Ok((view1, view2))
}
