//! Per-slot channel synthesis: Rician BS→RIS with planar/linear array steering,
//! Rayleigh BS→user and RIS→user, all scaled by a 3GPP-style urban path loss.
//!
//! Synthesis is split into fading draws (unit-variance complex Gaussians) and a
//! deterministic composition with geometry, so a panel move inside a slot can
//! rescale the same fading realization instead of drawing a fresh one.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::Position3D;
use crate::{C64, Error, RandomStream, Result};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Static channel-model parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ChannelConfig {
    /// Carrier frequency in GHz (the path-loss formulas take GHz directly).
    pub f_c: f64,
    /// Rician factor, linear scale. 0 is pure NLoS, large values pure LoS.
    pub q: f64,
    /// BS antenna spacing in meters.
    pub d_a: f64,
    /// RIS element spacing in meters.
    pub d_e: f64,
    /// Elements per RIS panel row.
    pub n_x: usize,
}

impl ChannelConfig {
    /// Half-wavelength spacings at carrier `f_c` GHz with `n_x` elements per row.
    pub fn half_wavelength(f_c: f64, q: f64, n_x: usize) -> Self {
        let lambda = SPEED_OF_LIGHT / (f_c * 1e9);
        Self {
            f_c,
            q,
            d_a: lambda / 2.0,
            d_e: lambda / 2.0,
            n_x,
        }
    }

    /// Carrier wavelength in meters.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / (self.f_c * 1e9)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.f_c > 0.0) {
            return Err(Error::Config("carrier frequency must be positive".into()));
        }
        if !(self.q >= 0.0) {
            return Err(Error::Config("Rician factor must be nonnegative".into()));
        }
        if !(self.d_a > 0.0 && self.d_e > 0.0) {
            return Err(Error::Config("array spacings must be positive".into()));
        }
        if self.n_x == 0 || n % self.n_x != 0 {
            return Err(Error::Config(format!(
                "n_x = {} must divide the element count {}",
                self.n_x, n
            )));
        }
        Ok(())
    }
}

/// The three channel matrices of one time slot.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// BS→RIS, N×M.
    pub h_br: Array2<C64>,
    /// BS→user, M×K, one column per user.
    pub h_bu: Array2<C64>,
    /// RIS→user, N×K, one column per user.
    pub h_ru: Array2<C64>,
}

/// Azimuth angle of arrival at the RIS, azimuth angle of departure at the BS,
/// and elevation angle of arrival, from the BS→RIS geometry.
///
/// All three use the horizontal BS–RIS distance as denominator; the elevation
/// ratio is clamped to the arcsin domain so steep geometries stay finite.
pub fn angles(bs: &Position3D, ris: &Position3D) -> Result<(f64, f64, f64)> {
    let d_h = bs.horizontal_distance(ris);
    if d_h < 1e-9 {
        return Err(Error::DegenerateGeometry(
            "BS and RIS coincide in the horizontal plane".into(),
        ));
    }
    let phi_a = ((ris.y - bs.y) / d_h).clamp(-1.0, 1.0).asin();
    let phi_d = std::f64::consts::FRAC_PI_2 - phi_a;
    let psi_a = ((ris.z - bs.z) / d_h).clamp(-1.0, 1.0).asin();
    Ok((phi_a, phi_d, psi_a))
}

/// BS uniform-linear-array response for departure angle `phi_d`.
pub fn steering_bs(m: usize, phi_d: f64, cfg: &ChannelConfig) -> Vec<C64> {
    let step = 2.0 * std::f64::consts::PI * cfg.d_a * phi_d.sin() / cfg.wavelength();
    (0..m)
        .map(|i| C64::from_polar(1.0, step * i as f64))
        .collect()
}

/// RIS uniform-planar-array response for arrival angles `(phi_a, psi_a)`.
/// Element `n` sits in row `n / n_x`, column `n % n_x`.
pub fn steering_ris(n: usize, phi_a: f64, psi_a: f64, cfg: &ChannelConfig) -> Result<Vec<C64>> {
    if cfg.n_x == 0 || n % cfg.n_x != 0 {
        return Err(Error::Config(format!(
            "n_x = {} must divide the element count {}",
            cfg.n_x, n
        )));
    }
    let scale = 2.0 * std::f64::consts::PI * cfg.d_e / cfg.wavelength();
    let row_term = phi_a.sin() * psi_a.sin();
    let col_term = phi_a.sin() * psi_a.cos();
    Ok((0..n)
        .map(|i| {
            let row = (i / cfg.n_x) as f64;
            let col = (i % cfg.n_x) as f64;
            C64::from_polar(1.0, scale * (row * row_term + col * col_term))
        })
        .collect())
}

/// Line-of-sight urban path loss in dB at distance `d` meters, carrier `f_c` GHz.
/// Distances under a meter are treated as one meter.
pub fn pathloss_los_db(d: f64, f_c: f64) -> f64 {
    let d = d.max(1.0);
    22.0 * d.log10() + 28.0 + 20.0 * f_c.log10()
}

/// Non-line-of-sight urban path loss in dB: the worse of the LoS and NLoS
/// closed forms, with a transmitter-height correction above the 1.5 m user plane.
pub fn pathloss_nlos_db(d: f64, f_c: f64, z_tx: f64) -> f64 {
    let d = d.max(1.0);
    let nlos = 36.7 * d.log10() + 22.7 + 26.0 * f_c.log10() - 0.3 * (z_tx - 1.5);
    pathloss_los_db(d, f_c).max(nlos)
}

/// Linear power gain for a path loss in dB.
pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// Path loss in dB for a linear power gain.
pub fn gain_to_db(gain: f64) -> f64 {
    -10.0 * gain.log10()
}

/// Draws a rows×cols matrix of i.i.d. unit-variance circularly-symmetric
/// complex Gaussians.
pub fn draw_unit_fading(rows: usize, cols: usize, rng: &mut RandomStream) -> Array2<C64> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    Array2::from_shape_fn((rows, cols), |_| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * scale, im * scale)
    })
}

/// Composes the Rician BS→RIS matrix from a unit-variance NLoS fading block
/// and the current geometry: √L_br (√(Q/(Q+1)) a_r a_bᴴ + √(1/(Q+1)) G).
pub fn compose_h_br(
    m: usize,
    cfg: &ChannelConfig,
    bs: &Position3D,
    ris: &Position3D,
    fading: &Array2<C64>,
) -> Result<Array2<C64>> {
    let n = fading.nrows();
    if fading.ncols() != m {
        return Err(Error::Shape(format!(
            "BS->RIS fading is {}x{}, expected {}x{}",
            fading.nrows(),
            fading.ncols(),
            n,
            m
        )));
    }
    let (phi_a, phi_d, psi_a) = angles(bs, ris)?;
    let a_r = steering_ris(n, phi_a, psi_a, cfg)?;
    let a_b = steering_bs(m, phi_d, cfg);
    let amp = db_to_gain(pathloss_los_db(bs.distance(ris), cfg.f_c)).sqrt();
    let w_los = (cfg.q / (cfg.q + 1.0)).sqrt();
    let w_nlos = (1.0 / (cfg.q + 1.0)).sqrt();
    Ok(Array2::from_shape_fn((n, m), |(i, j)| {
        amp * (w_los * a_r[i] * a_b[j].conj() + w_nlos * fading[(i, j)])
    }))
}

/// Draws a fresh Rician BS→RIS channel of shape `n`×`m`.
pub fn synth_h_br(
    n: usize,
    m: usize,
    cfg: &ChannelConfig,
    bs: &Position3D,
    ris: &Position3D,
    rng: &mut RandomStream,
) -> Result<Array2<C64>> {
    let fading = draw_unit_fading(n, m, rng);
    compose_h_br(m, cfg, bs, ris, &fading)
}

/// Scales unit-variance fading columns by the per-user NLoS path gain from
/// transmitter `tx` at effective height `z_tx`.
pub fn compose_rayleigh(
    cfg: &ChannelConfig,
    tx: &Position3D,
    users: &[Position3D],
    z_tx: f64,
    fading: &Array2<C64>,
) -> Result<Array2<C64>> {
    if fading.ncols() != users.len() {
        return Err(Error::Shape(format!(
            "fading has {} columns for {} users",
            fading.ncols(),
            users.len()
        )));
    }
    let mut out = fading.clone();
    for (k, user) in users.iter().enumerate() {
        let amp = db_to_gain(pathloss_nlos_db(tx.distance(user), cfg.f_c, z_tx)).sqrt();
        out.column_mut(k).mapv_inplace(|v| v * amp);
    }
    Ok(out)
}

/// Draws a fresh Rayleigh channel block: `rows`×K, column `k` scaled by the
/// path gain of user `k`.
pub fn synth_rayleigh(
    cfg: &ChannelConfig,
    tx: &Position3D,
    users: &[Position3D],
    rows: usize,
    z_tx: f64,
    rng: &mut RandomStream,
) -> Result<Array2<C64>> {
    let fading = draw_unit_fading(rows, users.len(), rng);
    compose_rayleigh(cfg, tx, users, z_tx, &fading)
}
