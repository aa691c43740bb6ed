//! Effective per-user channels, SINR, and Shannon rates for one time slot.
//!
//! Every user sees the direct BS link plus the cascade through the panel side
//! it lives on: eff_k = h_b,k + h_r,k·Θ_k·H_br, a 1×M row. Rates follow the
//! usual treat-interference-as-noise SINR with a single receiver noise term.

use ndarray::Array2;

use crate::channel::ChannelRealization;
use crate::geometry::Region;
use crate::starris::{build_matrices, DiagonalMatrix, StarElements};
use crate::{C64, Error, Result};

/// BS precoding matrix, one column per user.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    /// M×K complex matrix.
    pub w: Array2<C64>,
}

impl Beamformer {
    /// Total transmit power Σ_k ||w_k||².
    pub fn total_power(&self) -> f64 {
        self.w.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn validate(&self, p_max: f64) -> Result<()> {
        let p = self.total_power();
        if p > p_max + 1e-9 {
            return Err(Error::Config(format!(
                "beamformer power {} exceeds the {} W budget",
                p, p_max
            )));
        }
        Ok(())
    }
}

/// Receiver noise and the BS power budget.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    /// Noise power in watts.
    pub sigma2: f64,
    /// Bandwidth in Hz.
    pub b: f64,
    /// BS transmit power budget in watts.
    pub p_max: f64,
}

impl NoiseModel {
    /// Noise power from a dBm figure.
    pub fn from_dbm(noise_dbm: f64, b: f64, p_max: f64) -> Self {
        Self {
            sigma2: 10f64.powf((noise_dbm - 30.0) / 10.0),
            b,
            p_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.b > 0.0 && self.p_max > 0.0) {
            return Err(Error::Config(
                "noise power, bandwidth, and power budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Effective 1×M channel of one user: direct link plus the panel cascade.
pub fn effective_channel(
    h_bk: &[C64],
    h_rk: &[C64],
    theta_k: &DiagonalMatrix,
    h_br: &Array2<C64>,
) -> Result<Vec<C64>> {
    let m = h_bk.len();
    let n = h_rk.len();
    if theta_k.len() != n || h_br.nrows() != n || h_br.ncols() != m {
        return Err(Error::Shape(format!(
            "effective_channel: h_bk 1x{}, h_rk 1x{}, theta {}x{}, h_br {}x{}",
            m,
            n,
            theta_k.len(),
            theta_k.len(),
            h_br.nrows(),
            h_br.ncols()
        )));
    }
    let mut eff = h_bk.to_vec();
    for i in 0..n {
        let scale = h_rk[i] * theta_k.diag[i];
        if scale == C64::new(0.0, 0.0) {
            continue;
        }
        for (j, e) in eff.iter_mut().enumerate() {
            *e += scale * h_br[(i, j)];
        }
    }
    Ok(eff)
}

/// SINR of user `k` for effective channels `eff` (one row per user).
pub fn sinr(k: usize, w: &Beamformer, eff: &[Vec<C64>], noise: &NoiseModel) -> f64 {
    let row = &eff[k];
    let dot = |col: usize| -> C64 {
        row.iter()
            .zip(w.w.column(col).iter())
            .map(|(a, b)| a * b)
            .sum()
    };
    let signal = dot(k).norm_sqr();
    let mut interference = 0.0;
    for u in 0..w.w.ncols() {
        if u != k {
            interference += dot(u).norm_sqr();
        }
    }
    signal / (interference + noise.sigma2)
}

/// Shannon rate in bits/s for SINR `gamma` over bandwidth `b` Hz.
pub fn rate(gamma: f64, b: f64) -> f64 {
    b * (1.0 + gamma).log2()
}

/// Per-user rates given pre-built panel matrices. `mats` may be all-zero
/// diagonals to model a disabled panel.
pub fn user_rates(
    channels: &ChannelRealization,
    regions: &[Region],
    mats: &(DiagonalMatrix, DiagonalMatrix),
    w: &Beamformer,
    noise: &NoiseModel,
) -> Result<Vec<f64>> {
    let k_total = channels.h_bu.ncols();
    if regions.len() != k_total || channels.h_ru.ncols() != k_total || w.w.ncols() != k_total {
        return Err(Error::Shape(format!(
            "user_rates: {} regions, {} direct columns, {} cascade columns, {} beams",
            regions.len(),
            channels.h_bu.ncols(),
            channels.h_ru.ncols(),
            w.w.ncols()
        )));
    }
    let mut eff = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let h_bk: Vec<C64> = channels.h_bu.column(k).to_vec();
        let h_rk: Vec<C64> = channels.h_ru.column(k).to_vec();
        let theta_k = crate::starris::select_theta(regions[k], mats);
        eff.push(effective_channel(&h_bk, &h_rk, theta_k, &channels.h_br)?);
    }
    Ok((0..k_total)
        .map(|k| rate(sinr(k, w, &eff, noise), noise.b))
        .collect())
}

/// Achievable sum rate in bits/s for one slot.
pub fn sum_rate(
    channels: &ChannelRealization,
    regions: &[Region],
    e: &StarElements,
    w: &Beamformer,
    noise: &NoiseModel,
) -> Result<f64> {
    let mats = build_matrices(e)?;
    Ok(user_rates(channels, regions, &mats, w, noise)?.iter().sum())
}
