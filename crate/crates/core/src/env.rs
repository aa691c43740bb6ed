//! The control loop seen by the agent: observations of the three channel
//! matrices plus region bits, a flat action vector in [-1,1] that decodes into
//! panel coefficients, BS beams, a panel move, and an orientation, and a
//! sum-rate reward.
//!
//! Slot timing. Small-scale fading is drawn once per slot and shown to the
//! agent in the observation. When the action arrives, the panel moves, users
//! take their random step, and the slot's channels are recomposed at the new
//! geometry from that same fading draw; the reward is the sum rate of those
//! channels. Fresh fading is then drawn for the next observation. Redrawing
//! fading before the reward instead would decouple the reward from the CSI
//! the agent just saw, and with it any incentive to beamform against that
//! CSI, so the observed draw is the one that pays out.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::channel::{
    compose_h_br, compose_rayleigh, db_to_gain, draw_unit_fading, pathloss_los_db,
    pathloss_nlos_db, ChannelConfig, ChannelRealization,
};
use crate::geometry::{
    classify_region, move_ris, place_users, step_users, BoundaryMode, MobilityConfig,
    Orientation2D, Position3D, Region,
};
use crate::link::{user_rates, Beamformer, NoiseModel};
use crate::starris::{build_matrices, wrap_phase, DiagonalMatrix, StarElements};
use crate::{C64, Error, RandomStream, Result};

use rand::SeedableRng;
use std::f64::consts::{FRAC_PI_2, PI};

fn pow2_near(x: f64) -> f64 {
    2f64.powi(x.log2().round() as i32)
}

/// Multipliers applied to the channel blocks before they enter the state
/// vector, so entries sit near unit scale for the networks instead of at
/// path-loss magnitudes. Constructors snap to powers of two, which makes the
/// flatten/unflatten pair exactly invertible in floating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateScale {
    pub h_bu: f64,
    pub h_br: f64,
    pub h_ru: f64,
}

impl StateScale {
    /// One factor for all three blocks, snapped to the nearest power of two.
    pub fn uniform(factor: f64) -> Self {
        let s = pow2_near(factor);
        Self {
            h_bu: s,
            h_br: s,
            h_ru: s,
        }
    }

    /// Per-block factors sized from the path loss at characteristic
    /// distances: BS→RIS for the panel backhaul, BS→square-center for the
    /// direct links, and the mean center-to-user offset for the panel→user
    /// links. The blocks span several orders of magnitude (a kilometer-scale
    /// NLoS direct link against a tens-of-meters panel hop), so one shared
    /// factor either starves the weak block or saturates the hidden layer
    /// with the strong one.
    pub fn from_geometry(
        channel: &ChannelConfig,
        bs: &Position3D,
        ris: &Position3D,
        mobility: &MobilityConfig,
        user_height: f64,
    ) -> Self {
        let center = Position3D::new(mobility.center.0, mobility.center.1, user_height);
        let amp_bu = db_to_gain(pathloss_nlos_db(bs.distance(&center), channel.f_c, bs.z)).sqrt();
        let amp_br = db_to_gain(pathloss_los_db(bs.distance(ris), channel.f_c)).sqrt();
        // Mean distance from the center of a square to a uniform point in it
        // is 0.3826 side lengths.
        let r = 0.3826 * mobility.square_side;
        let dz = ris.z - user_height;
        let d_ru = (r * r + dz * dz).sqrt().max(1.0);
        let amp_ru = db_to_gain(pathloss_nlos_db(d_ru, channel.f_c, ris.z)).sqrt();
        Self {
            h_bu: pow2_near(1.0 / amp_bu),
            h_br: pow2_near(1.0 / amp_br),
            h_ru: pow2_near(1.0 / amp_ru),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_bu > 0.0 && self.h_br > 0.0 && self.h_ru > 0.0) {
            return Err(Error::Config("state scales must be positive".into()));
        }
        Ok(())
    }
}

/// Everything that defines one system instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    /// BS antennas.
    pub m: usize,
    /// Panel elements.
    pub n: usize,
    /// Users.
    pub k: usize,
    /// Slots per episode.
    pub t: usize,
    pub bs: Position3D,
    pub ris_init: Position3D,
    /// Initial panel orientation, radians from the x-axis.
    pub ris_init_angle: f64,
    /// Per-slot panel movement bound, meters per axis.
    pub x_max: f64,
    pub y_max: f64,
    pub user_height: f64,
    pub channel: ChannelConfig,
    pub noise: NoiseModel,
    pub mobility: MobilityConfig,
    pub state_scale: StateScale,
    /// Zero out the panel cascade in the reward; the no-panel baseline.
    pub disable_panel: bool,
}

impl Default for EnvConfig {
    /// Full-scale system: 4 antennas, 25 elements, 6 users in a 1 km square,
    /// BS 2.8 km out, 5 GHz carrier, 1 MHz bandwidth, -104 dBm noise, 1 W
    /// budget, 50-slot episodes, 5 m panel moves.
    fn default() -> Self {
        let bs = Position3D::new(2000.0, 2000.0, 5.0);
        let ris_init = Position3D::new(0.0, 0.0, 10.0);
        let channel = ChannelConfig::half_wavelength(5.0, 10.0, 5);
        let mobility = MobilityConfig {
            square_side: 1000.0,
            max_step: 1.0,
            boundary_mode: BoundaryMode::Reflect,
            center: (0.0, 0.0),
        };
        let user_height = 1.5;
        Self {
            m: 4,
            n: 25,
            k: 6,
            t: 50,
            bs,
            ris_init,
            ris_init_angle: 0.0,
            x_max: 5.0,
            y_max: 5.0,
            user_height,
            state_scale: StateScale::from_geometry(
                &channel,
                &bs,
                &ris_init,
                &mobility,
                user_height,
            ),
            channel,
            noise: NoiseModel::from_dbm(-104.0, 1e6, 1.0),
            mobility,
            disable_panel: false,
        }
    }
}

impl EnvConfig {
    /// Smaller instance for fast training runs and the end-to-end tests:
    /// 2 antennas, 16 elements, 3 users in a 12 m square. Fading is
    /// redrawn every slot, so element phases cannot stay aligned with it
    /// and the panel's reliable contribution is the incoherent cascade,
    /// whose power share scales with the element count and with how close
    /// the panel flies to the users. The geometry is built around that
    /// share: the panel flies low (6 m) over a tight square, the BS sits
    /// far out so its direct link (NLoS, exponent 3.67) decays faster than
    /// the line-of-sight BS-to-panel leg (exponent 2.2), and the 1 W
    /// budget binds so the beam projection normalizes transmit power.
    /// The panel starts west of the square with its boundary line slicing
    /// the users in half: moving in multiplies the cascade share several
    /// times over, and rotating the boundary off the users lets the
    /// amplitude split concentrate on one face; schemes that freeze those
    /// controls pay for it, and the no-panel baseline keeps only the
    /// direct link.
    pub fn reduced_profile() -> Self {
        let bs = Position3D::new(4000.0, 4000.0, 5.0);
        let ris_init = Position3D::new(-8.5, 0.0, 4.5);
        let channel = ChannelConfig::half_wavelength(5.0, 10.0, 4);
        let mobility = MobilityConfig {
            square_side: 12.0,
            max_step: 1.0,
            boundary_mode: BoundaryMode::Reflect,
            center: (0.0, 0.0),
        };
        let user_height = 1.5;
        Self {
            m: 2,
            n: 16,
            k: 3,
            t: 50,
            bs,
            ris_init,
            ris_init_angle: std::f64::consts::FRAC_PI_2,
            x_max: 5.0,
            y_max: 5.0,
            user_height,
            state_scale: StateScale::from_geometry(
                &channel,
                &bs,
                &ris_init,
                &mobility,
                user_height,
            ),
            channel,
            noise: NoiseModel::from_dbm(-114.0, 1e6, 1.0),
            mobility,
            disable_panel: false,
        }
    }

    /// State vector length: real and imaginary parts of the three channel
    /// blocks plus one region bit per user.
    pub fn obs_dim(&self) -> usize {
        2 * (self.m * self.k + self.n * self.m + self.n * self.k) + self.k
    }

    /// Action vector length: panel phase/split/sign triplet per element, BS
    /// phase and amplitude per antenna-user pair, panel move, orientation.
    pub fn action_dim(&self) -> usize {
        3 * self.n + 2 * self.m * self.k + 3
    }

    /// Index of the first movement entry (dx); dy and the orientation angle
    /// follow it.
    pub fn movement_offset(&self) -> usize {
        3 * self.n + 2 * self.m * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 || self.t == 0 {
            return Err(Error::Config(
                "antenna, element, user, and slot counts must be positive".into(),
            ));
        }
        self.channel.validate(self.n)?;
        self.noise.validate()?;
        self.mobility.validate()?;
        self.state_scale.validate()?;
        if !(self.x_max >= 0.0 && self.y_max >= 0.0) {
            return Err(Error::Config("movement bounds must be nonnegative".into()));
        }
        if self.bs.horizontal_distance(&self.ris_init) < 1e-6 {
            return Err(Error::Config(
                "BS and panel cannot share a horizontal position".into(),
            ));
        }
        if !self.ris_init_angle.is_finite() {
            return Err(Error::Config("initial orientation angle must be finite".into()));
        }
        Ok(())
    }
}

/// An action vector decoded into physical quantities.
#[derive(Debug, Clone)]
pub struct DecodedAction {
    pub elements: StarElements,
    pub w: Beamformer,
    pub dx: f64,
    pub dy: f64,
    pub orientation: Orientation2D,
}

/// Maps a raw [-1,1] action into panel coefficients, beams, a move, and an
/// orientation. Entries outside [-1,1] are clamped.
///
/// Layout: element transmission phases (N), amplitude splits (N), phase-offset
/// signs (N), then BS beam phases (M·K) and amplitudes (M·K) listed user by
/// user with antennas contiguous, then dx, dy, and the orientation angle.
pub fn decode_action(a: &[f64], cfg: &EnvConfig) -> Result<DecodedAction> {
    let d = cfg.action_dim();
    if a.len() != d {
        return Err(Error::Shape(format!(
            "action has {} entries, expected {}",
            a.len(),
            d
        )));
    }
    let (n, m, k) = (cfg.n, cfg.m, cfg.k);
    let get = |i: usize| a[i].clamp(-1.0, 1.0);

    let mut elements = StarElements {
        beta: Vec::with_capacity(n),
        theta_t: Vec::with_capacity(n),
        theta_r: Vec::with_capacity(n),
    };
    for i in 0..n {
        let theta_t = wrap_phase(PI * get(i));
        let beta = (get(n + i) + 1.0) / 2.0;
        let offset = if get(2 * n + i) > 0.0 {
            FRAC_PI_2
        } else {
            -FRAC_PI_2
        };
        elements.theta_t.push(theta_t);
        elements.beta.push(beta);
        elements.theta_r.push(wrap_phase(theta_t + offset));
    }

    let phase_base = 3 * n;
    let amp_base = 3 * n + m * k;
    let mut w = Array2::from_elem((m, k), C64::new(0.0, 0.0));
    for col in 0..k {
        for row in 0..m {
            let idx = col * m + row;
            let amp = (get(amp_base + idx) + 1.0) / 2.0;
            w[(row, col)] = C64::from_polar(amp, PI * get(phase_base + idx));
        }
    }
    let power: f64 = w.iter().map(|v| v.norm_sqr()).sum();
    if power > cfg.noise.p_max {
        let scale = (cfg.noise.p_max / power).sqrt();
        w.mapv_inplace(|v| v * scale);
    }

    let mv = cfg.movement_offset();
    let dx = cfg.x_max * get(mv);
    let dy = cfg.y_max * get(mv + 1);
    let orientation = Orientation2D::from_angle(PI * get(mv + 2));

    Ok(DecodedAction {
        elements,
        w: Beamformer { w },
        dx,
        dy,
        orientation,
    })
}

/// Flattens one slot into the state vector. Order: H_bu real then imaginary,
/// H_br real then imaginary, H_ru real then imaginary (row-major within each
/// block, users as columns), then one region bit per user. Reflection is 1,
/// transmission 0.
pub fn build_state(
    channels: &ChannelRealization,
    regions: &[Region],
    scale: &StateScale,
) -> Vec<f64> {
    let blocks: [(&Array2<C64>, f64); 3] = [
        (&channels.h_bu, scale.h_bu),
        (&channels.h_br, scale.h_br),
        (&channels.h_ru, scale.h_ru),
    ];
    let mut out = Vec::with_capacity(
        2 * blocks.iter().map(|(b, _)| b.len()).sum::<usize>() + regions.len(),
    );
    for (block, s) in blocks {
        out.extend(block.iter().map(|v| v.re * s));
        out.extend(block.iter().map(|v| v.im * s));
    }
    out.extend(regions.iter().map(|r| match r {
        Region::Reflection => 1.0,
        Region::Transmission => 0.0,
    }));
    out
}

/// Inverse of [`build_state`] given the dimensions; exact because the scales
/// are powers of two.
pub fn parse_state(
    obs: &[f64],
    m: usize,
    n: usize,
    k: usize,
    scale: &StateScale,
) -> Result<(ChannelRealization, Vec<Region>)> {
    let expected = 2 * (m * k + n * m + n * k) + k;
    if obs.len() != expected {
        return Err(Error::Shape(format!(
            "state has {} entries, expected {}",
            obs.len(),
            expected
        )));
    }
    let mut pos = 0;
    let mut take_block = |rows: usize, cols: usize, s: f64| -> Array2<C64> {
        let len = rows * cols;
        let re = &obs[pos..pos + len];
        let im = &obs[pos + len..pos + 2 * len];
        pos += 2 * len;
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let idx = i * cols + j;
            C64::new(re[idx] / s, im[idx] / s)
        })
    };
    let h_bu = take_block(m, k, scale.h_bu);
    let h_br = take_block(n, m, scale.h_br);
    let h_ru = take_block(n, k, scale.h_ru);
    let regions = obs[pos..]
        .iter()
        .map(|&b| {
            if b > 0.5 {
                Region::Reflection
            } else {
                Region::Transmission
            }
        })
        .collect();
    Ok((ChannelRealization { h_br, h_bu, h_ru }, regions))
}

/// Per-step diagnostics alongside the reward.
#[derive(Debug, Clone)]
pub struct StepInfo {
    /// Individual user rates in bits/s; they sum to the reward.
    pub rates: Vec<f64>,
    pub ris: Position3D,
    pub orientation: Orientation2D,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Vec<f64>,
    /// Sum rate in bits/s.
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One system instance. Owns its random stream; equal seeds and equal action
/// sequences reproduce every observation and reward bit for bit.
pub struct StarEnv {
    cfg: EnvConfig,
    rng: RandomStream,
    ris: Position3D,
    orientation: Orientation2D,
    users: Vec<Position3D>,
    fading_br: Array2<C64>,
    fading_bu: Array2<C64>,
    fading_ru: Array2<C64>,
    channels: ChannelRealization,
    regions: Vec<Region>,
    t: usize,
    done: bool,
}

impl StarEnv {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ris = cfg.ris_init;
        let orientation = Orientation2D::from_angle(cfg.ris_init_angle);
        let mut env = Self {
            rng: RandomStream::seed_from_u64(seed),
            ris,
            orientation,
            users: Vec::new(),
            fading_br: Array2::zeros((cfg.n, cfg.m)),
            fading_bu: Array2::zeros((cfg.m, cfg.k)),
            fading_ru: Array2::zeros((cfg.n, cfg.k)),
            channels: ChannelRealization {
                h_br: Array2::zeros((cfg.n, cfg.m)),
                h_bu: Array2::zeros((cfg.m, cfg.k)),
                h_ru: Array2::zeros((cfg.n, cfg.k)),
            },
            regions: Vec::new(),
            t: 0,
            done: false,
            cfg,
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Restores the initial pose, replaces the users, and draws fresh
    /// channels. Returns the first observation.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        self.rng = RandomStream::seed_from_u64(seed);
        self.ris = self.cfg.ris_init;
        self.orientation = Orientation2D::from_angle(self.cfg.ris_init_angle);
        self.users = place_users(
            self.cfg.k,
            &self.cfg.mobility,
            self.cfg.user_height,
            &mut self.rng,
        );
        self.t = 0;
        self.done = false;
        self.draw_fading();
        self.refresh_channels()?;
        Ok(self.observation())
    }

    fn draw_fading(&mut self) {
        self.fading_br = draw_unit_fading(self.cfg.n, self.cfg.m, &mut self.rng);
        self.fading_bu = draw_unit_fading(self.cfg.m, self.cfg.k, &mut self.rng);
        self.fading_ru = draw_unit_fading(self.cfg.n, self.cfg.k, &mut self.rng);
    }

    /// Composes the slot's channels from the stored fading at the current
    /// geometry and reclassifies regions.
    fn refresh_channels(&mut self) -> Result<()> {
        self.channels = self.compose()?;
        self.regions = self
            .users
            .iter()
            .map(|u| classify_region(u, &self.cfg.bs, &self.ris, &self.orientation))
            .collect();
        Ok(())
    }

    fn compose(&self) -> Result<ChannelRealization> {
        Ok(ChannelRealization {
            h_br: compose_h_br(
                self.cfg.m,
                &self.cfg.channel,
                &self.cfg.bs,
                &self.ris,
                &self.fading_br,
            )?,
            h_bu: compose_rayleigh(
                &self.cfg.channel,
                &self.cfg.bs,
                &self.users,
                self.cfg.bs.z,
                &self.fading_bu,
            )?,
            h_ru: compose_rayleigh(
                &self.cfg.channel,
                &self.ris,
                &self.users,
                self.ris.z,
                &self.fading_ru,
            )?,
        })
    }

    /// Current observation; what `reset` and `step` hand back.
    pub fn observation(&self) -> Vec<f64> {
        build_state(&self.channels, &self.regions, &self.cfg.state_scale)
    }

    pub fn users(&self) -> &[Position3D] {
        &self.users
    }

    pub fn ris_position(&self) -> Position3D {
        self.ris
    }

    pub fn orientation(&self) -> Orientation2D {
        self.orientation
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Applies one action: move and reorient the panel, step the users,
    /// recompose this slot's channels at the new geometry, pay the sum rate,
    /// then draw the next slot's fading.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeOver);
        }
        let decoded = decode_action(action, &self.cfg)?;
        self.ris = move_ris(
            &self.ris,
            decoded.dx,
            decoded.dy,
            self.cfg.x_max,
            self.cfg.y_max,
        );
        self.orientation = decoded.orientation;
        self.users = step_users(&self.users, &self.cfg.mobility, &mut self.rng);

        // The slot's payout: observed fading, post-move geometry.
        self.refresh_channels()?;
        let mats = if self.cfg.disable_panel {
            (
                DiagonalMatrix::zero(self.cfg.n),
                DiagonalMatrix::zero(self.cfg.n),
            )
        } else {
            build_matrices(&decoded.elements)?
        };
        let rates = user_rates(
            &self.channels,
            &self.regions,
            &mats,
            &decoded.w,
            &self.cfg.noise,
        )?;
        let reward = rates.iter().sum();

        self.t += 1;
        self.done = self.t >= self.cfg.t;

        // Next slot's draw, composed at the geometry that now holds.
        self.draw_fading();
        self.refresh_channels()?;

        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.done,
            info: StepInfo {
                rates,
                ris: self.ris,
                orientation: self.orientation,
            },
        })
    }
}
