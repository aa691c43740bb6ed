//! Energy-splitting STAR-RIS element state and the diagonal reflection and
//! transmission beamforming matrices built from it.
//!
//! Each element splits unit incident energy into a reflected share β_n² and a
//! transmitted share 1−β_n². Lossless elements couple the two phase shifts:
//! β_n·√(1−β_n²)·cos(θ_R,n − θ_T,n) = 0, so away from the β ∈ {0,1} edges the
//! phases must differ by ±π/2.

use crate::{C64, Error, Result};

/// Wraps a phase into (−π, π].
pub fn wrap_phase(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut w = x.rem_euclid(tau);
    if w > std::f64::consts::PI {
        w -= tau;
    }
    w
}

/// Per-element amplitude/phase state of the panel.
#[derive(Debug, Clone, PartialEq)]
pub struct StarElements {
    /// Reflection amplitudes β_n ∈ [0,1]; transmission amplitude is √(1−β_n²).
    pub beta: Vec<f64>,
    /// Transmission phases, (−π, π].
    pub theta_t: Vec<f64>,
    /// Reflection phases, (−π, π].
    pub theta_r: Vec<f64>,
}

impl StarElements {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Checks lengths, ranges, and the lossless coupling law.
    pub fn validate(&self) -> Result<()> {
        let n = self.beta.len();
        if self.theta_t.len() != n || self.theta_r.len() != n {
            return Err(Error::ElementState(format!(
                "length mismatch: beta {}, theta_t {}, theta_r {}",
                n,
                self.theta_t.len(),
                self.theta_r.len()
            )));
        }
        for i in 0..n {
            let b = self.beta[i];
            if !(0.0..=1.0).contains(&b) || !b.is_finite() {
                return Err(Error::ElementState(format!("beta[{}] = {} outside [0,1]", i, b)));
            }
            let residual = b * (1.0 - b * b).max(0.0).sqrt() * (self.theta_r[i] - self.theta_t[i]).cos();
            if residual.abs() > 1e-9 {
                return Err(Error::ElementState(format!(
                    "element {} violates the phase-coupling law (residual {:.3e})",
                    i, residual
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute value of the coupling-law left-hand side over elements.
    pub fn coupling_residual(&self) -> f64 {
        self.beta
            .iter()
            .zip(self.theta_r.iter().zip(self.theta_t.iter()))
            .map(|(&b, (&tr, &tt))| (b * (1.0 - b * b).max(0.0).sqrt() * (tr - tt).cos()).abs())
            .fold(0.0, f64::max)
    }
}

/// Diagonal complex N×N matrix stored by its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMatrix {
    pub diag: Vec<C64>,
}

impl DiagonalMatrix {
    pub fn zero(n: usize) -> Self {
        Self { diag: vec![C64::new(0.0, 0.0); n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Materializes the dense matrix; off-diagonals are exactly zero.
    pub fn to_dense(&self) -> ndarray::Array2<C64> {
        let n = self.diag.len();
        let mut m = ndarray::Array2::zeros((n, n));
        for i in 0..n {
            m[(i, i)] = self.diag[i];
        }
        m
    }
}

/// Builds the reflection and transmission matrices Θ_R = diag(β_n e^{jθ_R,n})
/// and Θ_T = diag(√(1−β_n²) e^{jθ_T,n}).
pub fn build_matrices(e: &StarElements) -> Result<(DiagonalMatrix, DiagonalMatrix)> {
    e.validate()?;
    let n = e.len();
    let mut r = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let b = e.beta[i];
        let tb = (1.0 - b * b).max(0.0).sqrt();
        r.push(C64::from_polar(b, e.theta_r[i]));
        t.push(C64::from_polar(tb, e.theta_t[i]));
    }
    Ok((DiagonalMatrix { diag: r }, DiagonalMatrix { diag: t }))
}

/// Picks the matrix that applies to a user on the given side of the panel.
pub fn select_theta<'a>(
    region: crate::geometry::Region,
    mats: &'a (DiagonalMatrix, DiagonalMatrix),
) -> &'a DiagonalMatrix {
    match region {
        crate::geometry::Region::Reflection => &mats.0,
        crate::geometry::Region::Transmission => &mats.1,
    }
}
