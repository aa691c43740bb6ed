//! Two-layer perceptron with hand-written reverse-mode gradients and Adam.
//!
//! Actor and critic both use this: input → 64 tanh units → output, where the
//! actor squashes the output through tanh as well and the critic leaves it
//! linear. Everything is f64 and batched through ndarray matmuls; gradients
//! are exact, so finite differences agree to ~1e-10 and the tests pin that.
//!
//! Parameters flatten to one `Vec<f64>` in the fixed order [w1, b1, w2, b2]
//! (row-major weights). Adam, checkpointing, and the finite-difference
//! oracle all work on that flat view, which keeps the optimizer independent
//! of network shape.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, RandomStream, Result};

/// Hidden layer width shared by actor and critic.
pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Actor mean squashes the output through tanh; the critic does not.
    pub tanh_out: bool,
}

/// Activations cached by a forward pass, consumed by `backward`.
pub struct ForwardCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
    output: Array2<f64>,
}

/// Gradients with the same shapes as [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn uniform_fan_in(rows: usize, cols: usize, gain: f64, rng: &mut RandomStream) -> Array2<f64> {
    // Uniform in ±gain·√(3/fan_in) keeps per-unit output variance at
    // gain²/fan_in regardless of width.
    let bound = gain * (3.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl Mlp {
    /// Fresh network with the standard 64-unit hidden layer.
    pub fn new(input: usize, output: usize, tanh_out: bool, rng: &mut RandomStream) -> Self {
        Self::with_hidden(input, HIDDEN, output, tanh_out, rng)
    }

    /// Explicit hidden width, used by the gradient-check tests.
    pub fn with_hidden(
        input: usize,
        hidden: usize,
        output: usize,
        tanh_out: bool,
        rng: &mut RandomStream,
    ) -> Self {
        // Small output gain for the actor starts the policy near the action
        // midpoint instead of saturating tanh.
        let out_gain = if tanh_out { 0.01 } else { 1.0 };
        Self {
            w1: uniform_fan_in(input, hidden, std::f64::consts::SQRT_2, rng),
            b1: Array1::zeros(hidden),
            w2: uniform_fan_in(hidden, output, out_gain, rng),
            b2: Array1::zeros(output),
            tanh_out,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// Batched forward pass; rows of `x` are independent inputs.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.w1.nrows() {
            return Err(Error::Shape(format!(
                "forward: input has {} features, layer expects {}",
                x.ncols(),
                self.w1.nrows()
            )));
        }
        let mut hidden = x.dot(&self.w1) + &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut output = hidden.dot(&self.w2) + &self.b2;
        if self.tanh_out {
            output.mapv_inplace(f64::tanh);
        }
        let cache = ForwardCache {
            x: x.clone(),
            hidden: hidden.clone(),
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Single-input convenience wrapper.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (y, _) = self.forward_batch(&xm)?;
        Ok(y.row(0).to_vec())
    }

    /// Gradients of Σ_batch upstreamᵀ·output with respect to every parameter.
    ///
    /// `upstream` is dL/d(output), one row per batch element. tanh' is taken
    /// from the cached post-activation values as 1 − y².
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> MlpGrad {
        let d_out = if self.tanh_out {
            upstream * &cache.output.mapv(|y| 1.0 - y * y)
        } else {
            upstream.clone()
        };
        let g_w2 = cache.hidden.t().dot(&d_out);
        let g_b2 = d_out.sum_axis(Axis(0));
        let d_hidden = d_out.dot(&self.w2.t()) * &cache.hidden.mapv(|h| 1.0 - h * h);
        let g_w1 = cache.x.t().dot(&d_hidden);
        let g_b1 = d_hidden.sum_axis(Axis(0));
        MlpGrad {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in the canonical flat order [w1, b1, w2, b2], row-major.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    /// Overwrite parameters from the canonical flat order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "assign_flat: got {} values, network has {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        for v in self.w1.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.b1.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.w2.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.b2.iter_mut() {
            *v = it.next().unwrap();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.ncols() != self.b1.len()
            || self.w1.ncols() != self.w2.nrows()
            || self.w2.ncols() != self.b2.len()
        {
            return Err(Error::Shape("inconsistent layer shapes".into()));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                batch: 0,
                what: "network parameters".into(),
            });
        }
        Ok(())
    }
}

impl MlpGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            w1: Array2::zeros(net.w1.dim()),
            b1: Array1::zeros(net.b1.len()),
            w2: Array2::zeros(net.w2.dim()),
            b2: Array1::zeros(net.b2.len()),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }
}

/// Adam over a flat parameter vector. Bias-corrected moments, the textbook
/// update; one instance per optimized vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> RandomStream {
        RandomStream::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::with_hidden(3, 5, 2, false, &mut rng(1));
        let zeros = vec![0.0; net.n_params()];
        net.assign_flat(&zeros).unwrap();
        let y = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn one_by_one_net_composes_tanh() {
        let mut net = Mlp::with_hidden(1, 1, 1, true, &mut rng(2));
        net.assign_flat(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        for x in [-2.0, -0.3, 0.0, 0.7, 1.9] {
            let y = net.forward(&[x]).unwrap();
            assert_relative_eq!(y[0], x.tanh().tanh(), max_relative = 1e-15);
        }
    }

    #[test]
    fn actor_outputs_stay_inside_the_open_unit_interval() {
        let mut r = rng(3);
        let net = Mlp::new(7, 4, true, &mut r);
        for _ in 0..200 {
            let x: Vec<f64> = (0..7).map(|_| r.gen_range(-50.0..50.0)).collect();
            for y in net.forward(&x).unwrap() {
                assert!(y > -1.0 && y < 1.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Mlp::new(5, 3, false, &mut rng(4));
        let x = vec![0.1, -0.2, 0.3, -0.4, 0.5];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let net = Mlp::new(5, 3, false, &mut rng(5));
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::with_hidden(4, 6, 3, true, &mut rng(6));
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (_, cache) = net.forward_batch(&x).unwrap();
        let g = net.backward(&cache, &Array2::zeros((5, 3)));
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_output_bias_gradient_equals_summed_upstream() {
        let net = Mlp::with_hidden(4, 6, 2, false, &mut rng(7));
        let x = Array2::from_shape_fn((3, 4), |(i, j)| 0.1 * (i * 4 + j) as f64);
        let (_, cache) = net.forward_batch(&x).unwrap();
        let upstream = Array2::from_shape_fn((3, 2), |(i, j)| (i + 1) as f64 * (j as f64 - 0.5));
        let g = net.backward(&cache, &upstream);
        let want = upstream.sum_axis(Axis(0));
        for (a, b) in g.b2.iter().zip(want.iter()) {
            assert_eq!(a, b);
        }
    }

    /// Loss upstreamᵀ·forward(x) recomputed with parameter i nudged ±h.
    fn fd_gradient(net: &Mlp, x: &Array2<f64>, upstream: &Array2<f64>, i: usize) -> f64 {
        let h = 1e-5;
        let mut flat = net.flat();
        let mut probe = net.clone();
        flat[i] += h;
        probe.assign_flat(&flat).unwrap();
        let (y_plus, _) = probe.forward_batch(x).unwrap();
        flat[i] -= 2.0 * h;
        probe.assign_flat(&flat).unwrap();
        let (y_minus, _) = probe.forward_batch(x).unwrap();
        let loss_plus = (&y_plus * upstream).sum();
        let loss_minus = (&y_minus * upstream).sum();
        (loss_plus - loss_minus) / (2.0 * h)
    }

    fn check_gradients(input: usize, hidden: usize, output: usize, tanh_out: bool, seed: u64) {
        let mut r = rng(seed);
        let net = Mlp::with_hidden(input, hidden, output, tanh_out, &mut r);
        let x = Array2::from_shape_fn((4, input), |_| r.gen_range(-1.5..1.5));
        let upstream = Array2::from_shape_fn((4, output), |_| r.gen_range(-1.0..1.0));
        let (_, cache) = net.forward_batch(&x).unwrap();
        let analytic = net.backward(&cache, &upstream).flat();
        for i in 0..net.n_params() {
            let numeric = fd_gradient(&net, &x, &upstream, i);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "param {}: analytic {} vs finite difference {}",
                i,
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_small_nets() {
        check_gradients(3, 5, 2, false, 10);
        check_gradients(3, 5, 2, true, 11);
        check_gradients(1, 1, 1, true, 12);
        check_gradients(6, 8, 4, false, 13);
    }

    #[test]
    fn gradients_match_finite_differences_full_width() {
        check_gradients(10, HIDDEN, 6, true, 14);
    }

    #[test]
    fn flat_round_trip_is_value_identical() {
        let net = Mlp::new(9, 4, true, &mut rng(15));
        let mut copy = Mlp::new(9, 4, true, &mut rng(99));
        copy.assign_flat(&net.flat()).unwrap();
        assert_eq!(net, copy);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![1.0, -2.0, 3.0];
        let mut opt = Adam::new(3);
        opt.update(&mut params, &[0.0, 0.0, 0.0], 0.1);
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_zero_lr_leaves_parameters_unchanged() {
        let mut params = vec![0.5, 0.5];
        let mut opt = Adam::new(2);
        opt.update(&mut params, &[1.0, -1.0], 0.0);
        assert_eq!(params, vec![0.5, 0.5]);
    }

    #[test]
    fn adam_constant_gradient_step_magnitude_approaches_lr() {
        let lr = 1e-3;
        let mut params = vec![0.0, 10.0];
        let mut opt = Adam::new(2);
        let grad = [0.7, -2.3];
        let mut prev = params.clone();
        let mut last_delta = [0.0; 2];
        for _ in 0..1000 {
            opt.update(&mut params, &grad, lr);
            last_delta = [params[0] - prev[0], params[1] - prev[1]];
            prev = params.clone();
        }
        // With a constant gradient m̂/√v̂ → sign(g), so the per-step move
        // tends to lr in magnitude.
        for (d, g) in last_delta.iter().zip(grad.iter()) {
            assert_relative_eq!(d.abs(), lr, max_relative = 0.01);
            assert_eq!(d.signum(), -g.signum());
        }
    }

    #[test]
    fn adam_step_is_bounded_by_lr() {
        let mut r = rng(16);
        let mut params: Vec<f64> = (0..50).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut opt = Adam::new(50);
        for _ in 0..20 {
            let grad: Vec<f64> = (0..50).map(|_| r.gen_range(-5.0..5.0)).collect();
            let before = params.clone();
            opt.update(&mut params, &grad, 1e-2);
            for (a, b) in params.iter().zip(before.iter()) {
                // First-step bias correction makes m̂/√v̂ = sign(g) exactly,
                // so the bound is lr up to the ε wiggle.
                assert!((a - b).abs() <= 1e-2 * 1.001);
            }
        }
    }

    #[test]
    fn initialization_is_seed_reproducible_and_bounded() {
        let a = Mlp::new(12, 5, true, &mut rng(17));
        let b = Mlp::new(12, 5, true, &mut rng(17));
        assert_eq!(a, b);
        let bound1 = std::f64::consts::SQRT_2 * (3.0f64 / 12.0).sqrt();
        assert!(a.w1.iter().all(|v| v.abs() < bound1));
        let bound2 = 0.01 * (3.0 / HIDDEN as f64).sqrt();
        assert!(a.w2.iter().all(|v| v.abs() < bound2));
        assert!(a.b1.iter().chain(a.b2.iter()).all(|&v| v == 0.0));
    }
}
