//! Positions, STAR-RIS orientation, reflection/transmission region classification,
//! panel movement bounds, and the bounded random walk that moves users.

use rand::Rng;

use crate::{Error, RandomStream, Result};

/// A point in meters. Ground level is z = 0; users live at a fixed height,
/// the BS and RIS at theirs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Straight-line distance to another point.
    pub fn distance(&self, other: &Position3D) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Distance ignoring the vertical axis.
    pub fn horizontal_distance(&self, other: &Position3D) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Unit vector in the horizontal plane giving the direction of the line that
/// splits the service area into the reflection and transmission sides.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Orientation2D {
    x_ori: f64,
    y_ori: f64,
}

impl Orientation2D {
    /// Normalizes an arbitrary direction vector. Near-zero input has no
    /// direction and is rejected.
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let norm = (x * x + y * y).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidOrientation);
        }
        Ok(Self {
            x_ori: x / norm,
            y_ori: y / norm,
        })
    }

    /// Direction at `angle` radians from the x-axis.
    pub fn from_angle(angle: f64) -> Self {
        Self {
            x_ori: angle.cos(),
            y_ori: angle.sin(),
        }
    }

    pub fn x(&self) -> f64 {
        self.x_ori
    }

    pub fn y(&self) -> f64 {
        self.y_ori
    }

    pub fn negated(&self) -> Self {
        Self {
            x_ori: -self.x_ori,
            y_ori: -self.y_ori,
        }
    }
}

/// Which side of the STAR-RIS a user is on: the BS side reflects, the far
/// side receives through transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Reflection,
    Transmission,
}

/// Sign argument of the region test: the product of the two line evaluations,
/// one at the BS and one at the user, for the boundary line through the RIS
/// along `ori`. Positive means same side as the BS.
pub fn region_discriminant(
    user: &Position3D,
    bs: &Position3D,
    ris: &Position3D,
    ori: &Orientation2D,
) -> f64 {
    // Line constant written as x_ori*y_RIS - y_ori*x_RIS (the expanded
    // (x_RIS+x_ori)*y_RIS - (y_RIS+y_ori)*x_RIS collapses to this): every term
    // is linear in the orientation, so negating it flips each intermediate
    // exactly in floating point and the product below is bit-stable under
    // ori -> -ori.
    let c = ori.x_ori * ris.y - ori.y_ori * ris.x;
    let at_bs = ori.y_ori * bs.x - ori.x_ori * bs.y + c;
    let at_user = ori.y_ori * user.x - ori.x_ori * user.y + c;
    at_bs * at_user
}

/// Classifies a user into the reflection region (same side as the BS) or the
/// transmission region. The boundary itself counts as transmission.
pub fn classify_region(
    user: &Position3D,
    bs: &Position3D,
    ris: &Position3D,
    ori: &Orientation2D,
) -> Region {
    if region_discriminant(user, bs, ris, ori) > 0.0 {
        Region::Reflection
    } else {
        Region::Transmission
    }
}

/// Applies one horizontal panel move. Displacements are clamped to the
/// per-slot bounds (the action decoder already guarantees this); height never
/// changes.
pub fn move_ris(ris: &Position3D, dx: f64, dy: f64, x_max: f64, y_max: f64) -> Position3D {
    let dx = dx.clamp(-x_max, x_max);
    let dy = dy.clamp(-y_max, y_max);
    Position3D::new(ris.x + dx, ris.y + dy, ris.z)
}

/// How the boundary of the service square is treated when a user steps out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BoundaryMode {
    /// Positions past an edge fold back inside by the overshoot.
    Reflect,
}

/// Random-walk parameters for user movement inside a square service area.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MobilityConfig {
    /// Side length of the service square, meters.
    pub square_side: f64,
    /// Maximum per-axis displacement per time slot, meters.
    pub max_step: f64,
    pub boundary_mode: BoundaryMode,
    /// Center of the square in the horizontal plane (the initial RIS position).
    pub center: (f64, f64),
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.square_side > 0.0) {
            return Err(Error::Config("square_side must be positive".into()));
        }
        if !(self.max_step >= 0.0) {
            return Err(Error::Config("max_step must be nonnegative".into()));
        }
        Ok(())
    }
}

fn reflect_into(mut v: f64, lo: f64, hi: f64) -> f64 {
    // A single fold suffices for steps smaller than the square, but loop so
    // oversized configured steps still land inside.
    let mut guard = 0;
    while (v < lo || v > hi) && guard < 64 {
        if v > hi {
            v = hi - (v - hi);
        } else if v < lo {
            v = lo + (lo - v);
        }
        guard += 1;
    }
    v.clamp(lo, hi)
}

/// Moves every user by an independent uniform step per axis, folding overshoot
/// back into the service square. Heights are untouched.
pub fn step_users(
    users: &[Position3D],
    cfg: &MobilityConfig,
    rng: &mut RandomStream,
) -> Vec<Position3D> {
    let half = cfg.square_side / 2.0;
    let (cx, cy) = cfg.center;
    users
        .iter()
        .map(|u| {
            let (dx, dy) = if cfg.max_step > 0.0 {
                (
                    rng.gen_range(-cfg.max_step..=cfg.max_step),
                    rng.gen_range(-cfg.max_step..=cfg.max_step),
                )
            } else {
                (0.0, 0.0)
            };
            let BoundaryMode::Reflect = cfg.boundary_mode;
            Position3D::new(
                reflect_into(u.x + dx, cx - half, cx + half),
                reflect_into(u.y + dy, cy - half, cy + half),
                u.z,
            )
        })
        .collect()
}

/// Draws `k` user positions uniformly inside the service square at the given
/// height.
pub fn place_users(
    k: usize,
    cfg: &MobilityConfig,
    height: f64,
    rng: &mut RandomStream,
) -> Vec<Position3D> {
    let half = cfg.square_side / 2.0;
    let (cx, cy) = cfg.center;
    (0..k)
        .map(|_| {
            let x = rng.gen_range(cx - half..=cx + half);
            let y = rng.gen_range(cy - half..=cy + half);
            Position3D::new(x, y, height)
        })
        .collect()
}
