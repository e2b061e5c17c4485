//! Squared-exponential kernel with closed-form mixed derivatives.
//!
//! For a stationary kernel `k(t, t') = a^2 exp(-(t - t')^2 / (2 l^2))` every
//! mixed partial reduces to a derivative in the lag `tau = t - t'`:
//!
//! ```text
//! d^m/dt^m d^n/dt'^n k(t, t') = (-1)^n k^(m+n)(tau)
//! k^(s)(tau) = a^2 (-1)^s He_s(r) exp(-r^2 / 2) / l^s,   r = tau / l
//! ```
//!
//! where `He_s` are the probabilists' Hermite polynomials. One recursion
//! therefore covers every order pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest derivative order supported on either kernel argument.
pub const MAX_ORDER: usize = 4;

/// Largest combined order `m + n`.
pub const MAX_TOTAL_ORDER: usize = 2 * MAX_ORDER;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    amplitude: f64,
    length_scale: f64,
}

/// Derivative-kernel value together with its hyperparameter partials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperGrad {
    pub value: f64,
    pub d_amplitude: f64,
    pub d_length_scale: f64,
}

/// Lag derivatives `k^(s)(tau)` for `s = 0..=MAX_TOTAL_ORDER`, plus their
/// partials with respect to the length scale.
#[derive(Debug, Clone, Copy)]
pub struct LagDerivatives {
    pub value: [f64; MAX_TOTAL_ORDER + 1],
    pub d_length_scale: [f64; MAX_TOTAL_ORDER + 1],
}

impl LagDerivatives {
    /// `d^m/dt^m d^n/dt'^n k` at the lag this table was built for.
    #[inline]
    pub fn mixed(&self, m: usize, n: usize) -> f64 {
        if n.is_multiple_of(2) {
            self.value[m + n]
        } else {
            -self.value[m + n]
        }
    }

    #[inline]
    pub fn mixed_d_length_scale(&self, m: usize, n: usize) -> f64 {
        if n.is_multiple_of(2) {
            self.d_length_scale[m + n]
        } else {
            -self.d_length_scale[m + n]
        }
    }
}

impl SeKernel {
    pub fn new(amplitude: f64, length_scale: f64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::domain(format!("amplitude must be positive, got {amplitude}")));
        }
        if !(length_scale.is_finite() && length_scale > 0.0) {
            return Err(Error::domain(format!(
                "length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Self { amplitude, length_scale })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn variance(&self) -> f64 {
        self.amplitude * self.amplitude
    }

    /// Plain kernel value `k(t, t2)`.
    pub fn eval(&self, t: f64, t2: f64) -> f64 {
        let r = (t - t2) / self.length_scale;
        self.variance() * (-0.5 * r * r).exp()
    }

    /// Builds the full lag-derivative table at `tau = t - t'`.
    pub fn lag_derivatives(&self, tau: f64) -> LagDerivatives {
        self.lag_derivatives_upto(tau, MAX_TOTAL_ORDER, true)
    }

    /// Lag table filled up to combined order `max_total`; length-scale
    /// partials only when `with_length_scale`. Other entries are zero.
    #[inline]
    pub fn lag_derivatives_upto(&self, tau: f64, max_total: usize, with_length_scale: bool) -> LagDerivatives {
        let top = max_total.min(MAX_TOTAL_ORDER);
        let l = self.length_scale;
        let r = tau / l;
        let e = self.variance() * (-0.5 * r * r).exp();

        let mut he = [0.0; MAX_TOTAL_ORDER + 1];
        he[0] = 1.0;
        he[1] = r;
        for s in 1..top {
            he[s + 1] = r * he[s] - s as f64 * he[s - 1];
        }

        let mut value = [0.0; MAX_TOTAL_ORDER + 1];
        let mut d_length_scale = [0.0; MAX_TOTAL_ORDER + 1];
        let inv_l = 1.0 / l;
        let mut scale = e;
        for s in 0..=top {
            let signed = if s % 2 == 0 { scale } else { -scale };
            value[s] = signed * he[s];
            if with_length_scale {
                let sf = s as f64;
                let he_prev = if s == 0 { 0.0 } else { he[s - 1] };
                d_length_scale[s] = signed * (r * r * he[s] - sf * he[s] - sf * r * he_prev) * inv_l;
            }
            scale *= inv_l;
        }
        LagDerivatives { value, d_length_scale }
    }

    /// `d^m/dt^m d^n/dt2^n k(t, t2)`.
    pub fn eval_deriv(&self, m: usize, n: usize, t: f64, t2: f64) -> Result<f64> {
        check_orders(m, n)?;
        check_finite(t, t2)?;
        Ok(self.lag_derivatives(t - t2).mixed(m, n))
    }

    /// Derivative-kernel value with partials in amplitude and length scale.
    pub fn eval_hyper_grad(&self, m: usize, n: usize, t: f64, t2: f64) -> Result<HyperGrad> {
        check_orders(m, n)?;
        check_finite(t, t2)?;
        let table = self.lag_derivatives(t - t2);
        let value = table.mixed(m, n);
        Ok(HyperGrad {
            value,
            d_amplitude: 2.0 * value / self.amplitude,
            d_length_scale: table.mixed_d_length_scale(m, n),
        })
    }
}

pub(crate) fn check_orders(m: usize, n: usize) -> Result<()> {
    if m > MAX_ORDER || n > MAX_ORDER {
        return Err(Error::UnsupportedOrder { m, n, max: MAX_ORDER });
    }
    Ok(())
}

fn check_finite(t: f64, t2: f64) -> Result<()> {
    if !t.is_finite() || !t2.is_finite() {
        return Err(Error::domain(format!("non-finite kernel input ({t}, {t2})")));
    }
    Ok(())
}

/// Diagonal noise and regularization levels added at Gram-assembly time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// One standard deviation per observed component.
    pub obs_noise: Vec<f64>,
    /// Standard deviation of the constraint-residual regularizer; never optimized.
    pub constraint_reg: f64,
}

impl NoiseSpec {
    pub fn new(obs_noise: Vec<f64>, constraint_reg: f64) -> Result<Self> {
        if obs_noise.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::domain("observation noise levels must be positive"));
        }
        if !(constraint_reg.is_finite() && constraint_reg > 0.0) {
            return Err(Error::domain("constraint regularization must be positive"));
        }
        Ok(Self { obs_noise, constraint_reg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-derived kernel partials up to first order in each argument.
    fn analytic(a: f64, l: f64, m: usize, n: usize, t: f64, t2: f64) -> f64 {
        let tau = t - t2;
        let e = a * a * (-0.5 * tau * tau / (l * l)).exp();
        match (m, n) {
            (0, 0) => e,
            (1, 0) => -tau / (l * l) * e,
            (0, 1) => tau / (l * l) * e,
            (1, 1) => (1.0 / (l * l) - tau * tau / l.powi(4)) * e,
            _ => unreachable!(),
        }
    }

    /// Central-difference oracle for orders up to (2, 2) with step `h`.
    fn fd_mixed(a: f64, l: f64, m: usize, n: usize, t: f64, t2: f64, h: f64) -> f64 {
        let (bm, bn) = (m.min(1), n.min(1));
        let base = |t: f64, t2: f64| analytic(a, l, bm, bn, t, t2);
        let along_t = |t2: f64| {
            if m == 2 {
                (base(t + h, t2) - base(t - h, t2)) / (2.0 * h)
            } else {
                base(t, t2)
            }
        };
        if n == 2 {
            (along_t(t2 + h) - along_t(t2 - h)) / (2.0 * h)
        } else {
            along_t(t2)
        }
    }

    #[test]
    fn diagonal_is_variance() {
        let k = SeKernel::new(1.0, 1.0).unwrap();
        assert_eq!(k.eval_deriv(0, 0, 0.0, 0.0).unwrap(), 1.0);
        let k = SeKernel::new(2.5, 0.3).unwrap();
        assert!((k.eval_deriv(0, 0, 4.2, 4.2).unwrap() - 6.25).abs() < 1e-15);
    }

    #[test]
    fn odd_derivative_vanishes_at_zero_lag() {
        let k = SeKernel::new(1.0, 1.0).unwrap();
        assert_eq!(k.eval_deriv(1, 0, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn second_mixed_matches_finite_differences() {
        let k = SeKernel::new(1.0, 1.0).unwrap();
        let exact = k.eval_deriv(2, 2, 0.3, -0.4).unwrap();
        let fd = fd_mixed(1.0, 1.0, 2, 2, 0.3, -0.4, 1e-4);
        assert!(((exact - fd) / exact).abs() < 1e-6, "exact {exact} fd {fd}");
    }

    #[test]
    fn every_order_pair_matches_finite_differences() {
        let k = SeKernel::new(0.8, 1.3).unwrap();
        for m in 0..=2 {
            for n in 0..=2 {
                for &(t, t2) in &[(0.1, 0.9), (2.0, -0.5), (-1.0, -1.4)] {
                    let exact = k.eval_deriv(m, n, t, t2).unwrap();
                    let fd = fd_mixed(0.8, 1.3, m, n, t, t2, 1e-4);
                    assert!((exact - fd).abs() < 1e-6 * exact.abs().max(1e-2), "({m},{n}) at ({t},{t2})");
                }
            }
        }
    }

    #[test]
    fn hyper_grad_diagonal() {
        let k = SeKernel::new(2.0, 1.0).unwrap();
        let g = k.eval_hyper_grad(0, 0, 0.7, 0.7).unwrap();
        assert_eq!(g.value, 4.0);
        assert_eq!(g.d_amplitude, 4.0);
        assert_eq!(g.d_length_scale, 0.0);
    }

    #[test]
    fn hyper_grad_matches_finite_differences() {
        let h = 1e-5;
        let k = SeKernel::new(1.0, 0.5).unwrap();
        let g = k.eval_hyper_grad(0, 0, 0.0, 1.0).unwrap();
        let fd = (SeKernel::new(1.0, 0.5 + h).unwrap().eval(0.0, 1.0)
            - SeKernel::new(1.0, 0.5 - h).unwrap().eval(0.0, 1.0))
            / (2.0 * h);
        assert!(((g.d_length_scale - fd) / fd).abs() < 1e-5);

        let k = SeKernel::new(1.0, 1.0).unwrap();
        let g = k.eval_hyper_grad(1, 1, 0.0, 0.7).unwrap();
        let fd_val = fd_mixed(1.0, 1.0, 1, 1, 0.0, 0.7, 1e-4);
        let at = |a: f64, l: f64| SeKernel::new(a, l).unwrap().eval_deriv(1, 1, 0.0, 0.7).unwrap();
        let fd_a = (at(1.0 + h, 1.0) - at(1.0 - h, 1.0)) / (2.0 * h);
        let fd_l = (at(1.0, 1.0 + h) - at(1.0, 1.0 - h)) / (2.0 * h);
        assert!(((g.value - fd_val) / fd_val).abs() < 1e-5);
        assert!(((g.d_amplitude - fd_a) / fd_a).abs() < 1e-5);
        assert!(((g.d_length_scale - fd_l) / fd_l).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = SeKernel::new(1.0, 1.0).unwrap();
        assert!(matches!(
            k.eval_deriv(MAX_ORDER + 1, 0, 0.0, 0.0),
            Err(Error::UnsupportedOrder { .. })
        ));
        assert!(matches!(k.eval_deriv(0, 0, f64::NAN, 0.0), Err(Error::Domain(_))));
        assert!(SeKernel::new(0.0, 1.0).is_err());
        assert!(SeKernel::new(1.0, -1.0).is_err());
        assert!(NoiseSpec::new(vec![0.1, 0.0], 1e-4).is_err());
        assert!(NoiseSpec::new(vec![0.1], 1e-4).is_ok());
    }

    #[test]
    fn derivative_gram_is_psd() {
        let k = SeKernel::new(1.3, 0.8).unwrap();
        let pts: Vec<(usize, f64)> =
            (0..24).map(|i| (i % 3, 0.37 * i as f64 - 2.0)).collect();
        let n = pts.len();
        let g = faer::Mat::<f64>::from_fn(n, n, |i, j| {
            k.eval_deriv(pts[i].0, pts[j].0, pts[i].1, pts[j].1).unwrap()
        });
        let trace: f64 = (0..n).map(|i| g[(i, i)]).sum();
        let eig = g.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8 * trace, "min eigenvalue {min}");
    }

    proptest! {
        #[test]
        fn symmetry_under_argument_swap(m in 0usize..=MAX_ORDER, n in 0usize..=MAX_ORDER,
                                        t in -5.0f64..5.0, t2 in -5.0f64..5.0,
                                        a in 0.2f64..3.0, l in 0.2f64..3.0) {
            let k = SeKernel::new(a, l).unwrap();
            let lhs = k.eval_deriv(m, n, t, t2).unwrap();
            let rhs = k.eval_deriv(n, m, t2, t).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn first_derivative_sign_alternation(t in -5.0f64..5.0, t2 in -5.0f64..5.0) {
            let k = SeKernel::new(1.1, 0.9).unwrap();
            let a = k.eval_deriv(1, 0, t, t2).unwrap();
            let b = k.eval_deriv(0, 1, t, t2).unwrap();
            prop_assert!((a + b).abs() < 1e-15);
        }
    }
}
