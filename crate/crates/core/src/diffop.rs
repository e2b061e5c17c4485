//! Linear differential operators with parameter-dependent coefficients and
//! the covariances they induce on a squared-exponential prior.
//!
//! Coefficients are treated as locally constant when an operator is applied:
//! derivatives act on the kernel only. This matches piecewise-constant
//! linearization coefficients, which are never differentiated in time.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::{LagDerivatives, SeKernel, MAX_ORDER};

/// Divisors smaller than this in magnitude are rejected.
pub const MIN_DIVISOR: f64 = 1e-12;

type CoefFn = dyn Fn(f64, &[f64], &mut [f64]) -> Result<f64> + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    Constant,
    Parametric,
    PiecewiseConstant,
}

/// A scalar coefficient `c(t; theta)` that reports its parameter gradient.
///
/// The evaluator overwrites the whole gradient buffer, whose length is the
/// model's parameter count.
#[derive(Clone)]
pub struct Coefficient {
    kind: CoefficientKind,
    constant: Option<f64>,
    eval: Arc<CoefFn>,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.constant {
            Some(c) => write!(f, "Coefficient::Constant({c})"),
            None => write!(f, "Coefficient::{:?}", self.kind),
        }
    }
}

impl Coefficient {
    pub fn constant(value: f64) -> Self {
        Self {
            kind: CoefficientKind::Constant,
            constant: Some(value),
            eval: Arc::new(move |_, _, grad: &mut [f64]| {
                grad.fill(0.0);
                Ok(value)
            }),
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    /// The `index`-th model parameter itself.
    pub fn param(index: usize) -> Self {
        Self::parametric(move |_, theta, grad| {
            grad.fill(0.0);
            grad[index] = 1.0;
            Ok(theta[index])
        })
    }

    pub fn parametric<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) -> Result<f64> + Send + Sync + 'static,
    {
        Self { kind: CoefficientKind::Parametric, constant: None, eval: Arc::new(f) }
    }

    pub fn piecewise<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) -> Result<f64> + Send + Sync + 'static,
    {
        Self { kind: CoefficientKind::PiecewiseConstant, constant: None, eval: Arc::new(f) }
    }

    pub fn kind(&self) -> CoefficientKind {
        self.kind
    }

    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }

    /// Evaluates into a caller-provided gradient buffer.
    #[inline]
    pub fn evaluate(&self, t: f64, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        (self.eval)(t, theta, grad)
    }

    pub fn value_and_grad(&self, t: f64, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; theta.len()];
        let v = self.evaluate(t, theta, &mut grad)?;
        Ok((v, grad))
    }

    pub fn value(&self, t: f64, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(t, theta)?.0)
    }

    fn combined_kind(&self, other: &Self) -> CoefficientKind {
        use CoefficientKind::*;
        match (self.kind, other.kind) {
            (PiecewiseConstant, _) | (_, PiecewiseConstant) => PiecewiseConstant,
            (Parametric, _) | (_, Parametric) => Parametric,
            _ => Constant,
        }
    }

    fn binary<F>(&self, other: &Self, op: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64], &mut [f64]) -> Result<f64> + Send + Sync + 'static,
    {
        let kind = self.combined_kind(other);
        let (a, b) = (self.eval.clone(), other.eval.clone());
        Self {
            kind,
            constant: None,
            eval: Arc::new(move |t, theta, grad: &mut [f64]| {
                let mut ga = vec![0.0; theta.len()];
                let mut gb = vec![0.0; theta.len()];
                let va = a(t, theta, &mut ga)?;
                let vb = b(t, theta, &mut gb)?;
                op(va, &ga, vb, &gb, grad)
            }),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        if let (Some(a), Some(b)) = (self.constant, other.constant) {
            return Self::constant(a + b);
        }
        if other.constant == Some(0.0) {
            return self.clone();
        }
        if self.constant == Some(0.0) {
            return other.clone();
        }
        self.binary(other, |va, ga, vb, gb, grad| {
            for (g, (x, y)) in grad.iter_mut().zip(ga.iter().zip(gb)) {
                *g = x + y;
            }
            Ok(va + vb)
        })
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn scale(&self, factor: f64) -> Self {
        if let Some(c) = self.constant {
            return Self::constant(c * factor);
        }
        if factor == 1.0 {
            return self.clone();
        }
        let inner = self.eval.clone();
        Self {
            kind: self.kind,
            constant: None,
            eval: Arc::new(move |t, theta, grad: &mut [f64]| {
                let v = inner(t, theta, grad)?;
                grad.iter_mut().for_each(|g| *g *= factor);
                Ok(v * factor)
            }),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        if let (Some(a), Some(b)) = (self.constant, other.constant) {
            return Self::constant(a * b);
        }
        if let Some(c) = self.constant {
            return other.scale(c);
        }
        if let Some(c) = other.constant {
            return self.scale(c);
        }
        self.binary(other, |va, ga, vb, gb, grad| {
            for (g, (x, y)) in grad.iter_mut().zip(ga.iter().zip(gb)) {
                *g = x * vb + va * y;
            }
            Ok(va * vb)
        })
    }

    /// Quotient `self / other`; evaluation fails where `|other| < MIN_DIVISOR`.
    pub fn div(&self, other: &Self) -> Self {
        self.binary(other, |va, ga, vb, gb, grad| {
            if !(vb.abs() >= MIN_DIVISOR) {
                return Err(Error::domain(format!("division by near-zero coefficient {vb:e}")));
            }
            let q = va / vb;
            for (g, (x, y)) in grad.iter_mut().zip(ga.iter().zip(gb)) {
                *g = (x - q * y) / vb;
            }
            Ok(q)
        })
    }
}

#[derive(Debug, Clone)]
pub struct Term {
    pub order: usize,
    pub coeff: Coefficient,
}

/// `L u = sum_m c_m(t; theta) d^m u / dt^m + offset(t; theta)`.
///
/// The offset shifts the mean of `L u` and never enters a covariance.
#[derive(Debug, Clone)]
pub struct DiffOperator {
    terms: Vec<Term>,
    offset: Coefficient,
}

impl DiffOperator {
    /// Builds an operator, merging terms that share an order.
    pub fn new(terms: Vec<(usize, Coefficient)>, offset: Coefficient) -> Result<Self> {
        let mut merged: Vec<Term> = Vec::with_capacity(terms.len());
        for (order, coeff) in terms {
            if order > MAX_ORDER {
                return Err(Error::UnsupportedOrder { m: order, n: 0, max: MAX_ORDER });
            }
            match merged.iter_mut().find(|t| t.order == order) {
                Some(existing) => existing.coeff = existing.coeff.add(&coeff),
                None => merged.push(Term { order, coeff }),
            }
        }
        merged.retain(|t| t.coeff.as_constant() != Some(0.0));
        merged.sort_by_key(|t| t.order);
        Ok(Self { terms: merged, offset })
    }

    pub fn identity() -> Self {
        Self { terms: vec![Term { order: 0, coeff: Coefficient::one() }], offset: Coefficient::zero() }
    }

    /// `d^order/dt^order`.
    pub fn derivative(order: usize) -> Result<Self> {
        Self::new(vec![(order, Coefficient::one())], Coefficient::zero())
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn offset(&self) -> &Coefficient {
        &self.offset
    }

    pub fn max_order(&self) -> usize {
        self.terms.iter().map(|t| t.order).max().unwrap_or(0)
    }

    pub fn is_identity(&self) -> bool {
        self.terms.len() == 1
            && self.terms[0].order == 0
            && self.terms[0].coeff.as_constant() == Some(1.0)
            && self.offset.as_constant() == Some(0.0)
    }

    pub fn with_offset(mut self, offset: Coefficient) -> Self {
        self.offset = offset;
        self
    }

    /// Term-wise sum; offsets add.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let terms = self
            .terms
            .iter()
            .chain(other.terms.iter())
            .map(|t| (t.order, t.coeff.clone()))
            .collect();
        Self::new(terms, self.offset.add(&other.offset))
    }

    /// Multiplies every coefficient, and the offset, by `factor`.
    pub fn scale(&self, factor: &Coefficient) -> Result<Self> {
        let terms = self.terms.iter().map(|t| (t.order, t.coeff.mul(factor))).collect();
        Self::new(terms, self.offset.mul(factor))
    }

    /// `self` applied after `inner`: `self(inner u + nu_inner) + nu_self`.
    ///
    /// With locally constant coefficients only the order-0 term of `self`
    /// sees the inner offset.
    pub fn compose(&self, inner: &Self) -> Result<Self> {
        let mut terms = Vec::with_capacity(self.terms.len() * inner.terms.len());
        for a in &self.terms {
            for b in &inner.terms {
                terms.push((a.order + b.order, a.coeff.mul(&b.coeff)));
            }
        }
        let mut offset = self.offset.clone();
        if let Some(a0) = self.terms.iter().find(|t| t.order == 0) {
            offset = offset.add(&a0.coeff.mul(&inner.offset));
        }
        Self::new(terms, offset)
    }

    /// `d^order/dt^order` applied after `self`; offsets drop for `order > 0`.
    pub fn then_derivative(&self, order: usize) -> Result<Self> {
        if order == 0 {
            return Ok(self.clone());
        }
        let terms = self.terms.iter().map(|t| (t.order + order, t.coeff.clone())).collect();
        Self::new(terms, Coefficient::zero())
    }

    /// Freezes coefficient values and gradients at one time point.
    pub fn evaluate_at(&self, t: f64, theta: &[f64]) -> Result<EvaluatedOperator> {
        let p = theta.len();
        let mut orders = Vec::with_capacity(self.terms.len());
        let mut values = Vec::with_capacity(self.terms.len());
        let mut grads = vec![0.0; self.terms.len() * p];
        for (k, term) in self.terms.iter().enumerate() {
            let v = term.coeff.evaluate(t, theta, &mut grads[k * p..(k + 1) * p])?;
            if !v.is_finite() {
                return Err(Error::domain(format!("non-finite coefficient at t={t}")));
            }
            orders.push(term.order);
            values.push(v);
        }
        let mut offset_grad = vec![0.0; p];
        let offset = self.offset.evaluate(t, theta, &mut offset_grad)?;
        Ok(EvaluatedOperator { t, n_params: p, orders, values, grads, offset, offset_grad })
    }
}

/// An operator with its coefficients frozen at one time point.
#[derive(Debug, Clone)]
pub struct EvaluatedOperator {
    pub t: f64,
    pub n_params: usize,
    pub orders: Vec<usize>,
    pub values: Vec<f64>,
    /// Row-major `terms x n_params`.
    pub grads: Vec<f64>,
    pub offset: f64,
    pub offset_grad: Vec<f64>,
}

impl EvaluatedOperator {
    /// `sum_m sum_n a_m b_n d^m_t d^n_t' k` for a precomputed lag table.
    #[inline]
    pub fn cov(&self, other: &Self, lag: &LagDerivatives) -> f64 {
        let mut acc = 0.0;
        for (&ma, &ca) in self.orders.iter().zip(&self.values) {
            let mut inner = 0.0;
            for (&nb, &cb) in other.orders.iter().zip(&other.values) {
                inner += cb * lag.mixed(ma, nb);
            }
            acc += ca * inner;
        }
        acc
    }

    /// Covariance together with its partials. `grad_theta` is overwritten;
    /// the returned pair holds partials in amplitude and length scale.
    pub fn cov_grad(
        &self,
        other: &Self,
        lag: &LagDerivatives,
        amplitude: f64,
        grad_theta: &mut [f64],
    ) -> (f64, f64, f64) {
        grad_theta.fill(0.0);
        let p = self.n_params;
        let mut value = 0.0;
        let mut d_len = 0.0;
        for (ia, (&ma, &ca)) in self.orders.iter().zip(&self.values).enumerate() {
            let mut inner = 0.0;
            for (ib, (&nb, &cb)) in other.orders.iter().zip(&other.values).enumerate() {
                let kd = lag.mixed(ma, nb);
                inner += cb * kd;
                d_len += ca * cb * lag.mixed_d_length_scale(ma, nb);
                let gb = &other.grads[ib * p..(ib + 1) * p];
                for (g, &x) in grad_theta.iter_mut().zip(gb) {
                    *g += ca * x * kd;
                }
            }
            value += ca * inner;
            let ga = &self.grads[ia * p..(ia + 1) * p];
            for (g, &x) in grad_theta.iter_mut().zip(ga) {
                *g += x * inner;
            }
        }
        (value, 2.0 * value / amplitude, d_len)
    }
}

/// Operator-transformed covariance `a_t b_t' k(t, t')`.
pub fn op_cov(
    a: &DiffOperator,
    b: &DiffOperator,
    kernel: &SeKernel,
    t: f64,
    t2: f64,
    theta: &[f64],
) -> Result<f64> {
    check_pair(a, b, t, t2)?;
    let ea = a.evaluate_at(t, theta)?;
    let eb = b.evaluate_at(t2, theta)?;
    Ok(ea.cov(&eb, &kernel.lag_derivatives(t - t2)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCovGrad {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    /// Partials in (amplitude, length scale).
    pub grad_hyper: (f64, f64),
}

pub fn op_cov_grad(
    a: &DiffOperator,
    b: &DiffOperator,
    kernel: &SeKernel,
    t: f64,
    t2: f64,
    theta: &[f64],
) -> Result<OpCovGrad> {
    check_pair(a, b, t, t2)?;
    let ea = a.evaluate_at(t, theta)?;
    let eb = b.evaluate_at(t2, theta)?;
    let mut grad_theta = vec![0.0; theta.len()];
    let (value, d_amp, d_len) =
        ea.cov_grad(&eb, &kernel.lag_derivatives(t - t2), kernel.amplitude(), &mut grad_theta);
    Ok(OpCovGrad { value, grad_theta, grad_hyper: (d_amp, d_len) })
}

/// Additive offset of `a` at `(t, theta)`.
pub fn op_offset(a: &DiffOperator, t: f64, theta: &[f64]) -> Result<f64> {
    a.offset().value(t, theta)
}

fn check_pair(a: &DiffOperator, b: &DiffOperator, t: f64, t2: f64) -> Result<()> {
    crate::kernel::check_orders(a.max_order(), b.max_order())?;
    if !t.is_finite() || !t2.is_finite() {
        return Err(Error::domain("non-finite operator time"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain_constraint() -> DiffOperator {
        // d^2 + (th1 + th2) d + th1 th2
        let sum = Coefficient::param(0).add(&Coefficient::param(1));
        let prod = Coefficient::param(0).mul(&Coefficient::param(1));
        DiffOperator::new(vec![(2, Coefficient::one()), (1, sum), (0, prod)], Coefficient::zero())
            .unwrap()
    }

    /// Plain SE kernel derivatives written out by hand for orders <= 2.
    fn k_lag(a: f64, l: f64, s: usize, tau: f64) -> f64 {
        let e = a * a * (-0.5 * tau * tau / (l * l)).exp();
        let l2 = l * l;
        match s {
            0 => e,
            1 => -tau / l2 * e,
            2 => (tau * tau / (l2 * l2) - 1.0 / l2) * e,
            _ => unreachable!(),
        }
    }

    /// Double central difference of the hand-written second lag derivative.
    fn fd_k(a: f64, l: f64, m: usize, n: usize, t: f64, t2: f64) -> f64 {
        // d^m_t d^n_t' k = (-1)^n k^(m+n); orders 3 and 4 by differencing order 2.
        let h = 1e-4;
        let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
        let tau = t - t2;
        let s = m + n;
        let v = match s {
            0..=2 => k_lag(a, l, s, tau),
            3 => (k_lag(a, l, 2, tau + h) - k_lag(a, l, 2, tau - h)) / (2.0 * h),
            4 => {
                (k_lag(a, l, 2, tau + h) - 2.0 * k_lag(a, l, 2, tau) + k_lag(a, l, 2, tau - h))
                    / (h * h)
            }
            _ => unreachable!(),
        };
        sign * v
    }

    #[test]
    fn identity_leaves_kernel_unchanged() {
        let k = SeKernel::new(1.2, 0.7).unwrap();
        let id = DiffOperator::identity();
        assert!(id.is_identity());
        let v = op_cov(&id, &id, &k, 0.4, 1.1, &[]).unwrap();
        assert_eq!(v, k.eval(0.4, 1.1));
        let g = op_cov_grad(&id, &id, &k, 0.4, 1.1, &[1.0, 2.0]).unwrap();
        assert_eq!(g.grad_theta, vec![0.0, 0.0]);
        assert_eq!(op_offset(&id, 3.0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn time_varying_first_order_operator() {
        // w = (t-1)^2 dx/dt + x, cross-covariance with x.
        let coef = Coefficient::parametric(|t, _, g| {
            g.fill(0.0);
            Ok((t - 1.0) * (t - 1.0))
        });
        let a = DiffOperator::new(vec![(1, coef), (0, Coefficient::one())], Coefficient::zero())
            .unwrap();
        let id = DiffOperator::identity();
        let (alpha, l) = (1.3, 0.8);
        let k = SeKernel::new(alpha, l).unwrap();
        for &(t, t2) in &[(0.0, 0.5), (2.0, 1.3), (-0.7, 0.9)] {
            let kxx = k.eval(t, t2);
            let expected = -(t - 1.0) * (t - 1.0) * (t - t2) / (l * l) * kxx + kxx;
            let got = op_cov(&a, &id, &k, t, t2, &[]).unwrap();
            assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        }
    }

    #[test]
    fn nine_term_constraint_kernel() {
        let (a, l) = (1.0, 1.0);
        let k = SeKernel::new(a, l).unwrap();
        let op = chain_constraint();
        let theta = [1.0, 1.0];
        let (s, p) = (theta[0] + theta[1], theta[0] * theta[1]);
        for &(t, t2) in &[(0.2, 0.9), (3.0, 1.5), (5.0, 5.0)] {
            let expected = fd_k(a, l, 2, 2, t, t2)
                + s * fd_k(a, l, 2, 1, t, t2)
                + p * fd_k(a, l, 2, 0, t, t2)
                + s * fd_k(a, l, 1, 2, t, t2)
                + s * s * fd_k(a, l, 1, 1, t, t2)
                + s * p * fd_k(a, l, 1, 0, t, t2)
                + p * fd_k(a, l, 0, 2, t, t2)
                + s * p * fd_k(a, l, 0, 1, t, t2)
                + p * p * fd_k(a, l, 0, 0, t, t2);
            let got = op_cov(&op, &op, &k, t, t2, &theta).unwrap();
            assert!((got - expected).abs() < 1e-6 * expected.abs().max(1.0), "{got} vs {expected}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let k = SeKernel::new(0.9, 1.4).unwrap();
        let op = chain_constraint();
        let h = 1e-5;
        for &(t, t2) in &[(0.3, 1.9), (4.0, 2.2), (7.5, 7.0)] {
            let theta = [1.0, 1.0];
            let g = op_cov_grad(&op, &op, &k, t, t2, &theta).unwrap();
            for i in 0..2 {
                let mut tp = theta;
                let mut tm = theta;
                tp[i] += h;
                tm[i] -= h;
                let fd = (op_cov(&op, &op, &k, t, t2, &tp).unwrap()
                    - op_cov(&op, &op, &k, t, t2, &tm).unwrap())
                    / (2.0 * h);
                assert!((g.grad_theta[i] - fd).abs() < 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn hyper_gradient_matches_finite_differences() {
        let op = chain_constraint();
        let x1 = DiffOperator::new(
            vec![(1, Coefficient::one().div(&Coefficient::param(0))),
                 (0, Coefficient::param(1).div(&Coefficient::param(0)))],
            Coefficient::zero(),
        )
        .unwrap();
        let theta = [0.8, 1.3];
        let h = 1e-5;
        for (a_op, b_op) in [(&op, &op), (&op, &x1), (&x1, &x1)] {
            let (a, l, t, t2) = (1.1, 0.9, 0.4, 1.7);
            let g = op_cov_grad(a_op, b_op, &SeKernel::new(a, l).unwrap(), t, t2, &theta).unwrap();
            let f = |a: f64, l: f64| {
                op_cov(a_op, b_op, &SeKernel::new(a, l).unwrap(), t, t2, &theta).unwrap()
            };
            let fd_a = (f(a + h, l) - f(a - h, l)) / (2.0 * h);
            let fd_l = (f(a, l + h) - f(a, l - h)) / (2.0 * h);
            assert!((g.grad_hyper.0 - fd_a).abs() < 1e-5 * fd_a.abs().max(1e-3));
            assert!((g.grad_hyper.1 - fd_l).abs() < 1e-5 * fd_l.abs().max(1e-3));
        }
    }

    #[test]
    fn composition_and_derivative() {
        let d = DiffOperator::derivative(1).unwrap();
        let x1 = DiffOperator::new(
            vec![(1, Coefficient::constant(2.0)), (0, Coefficient::constant(3.0))],
            Coefficient::constant(0.5),
        )
        .unwrap();
        let c = d.compose(&x1).unwrap();
        assert_eq!(c.terms().len(), 2);
        assert_eq!(c.terms()[0].order, 1);
        assert_eq!(c.terms()[1].coeff.as_constant(), Some(2.0));
        assert_eq!(op_offset(&c, 0.0, &[]).unwrap(), 0.0);
        let scaled = DiffOperator::identity().scale(&Coefficient::constant(4.0)).unwrap();
        let c2 = scaled.compose(&x1).unwrap();
        assert_eq!(op_offset(&c2, 0.0, &[]).unwrap(), 2.0);
        assert!(DiffOperator::derivative(MAX_ORDER + 1).is_err());
        let shifted = x1.then_derivative(2).unwrap();
        assert_eq!(shifted.max_order(), 3);
        assert_eq!(op_offset(&shifted, 0.0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn guarded_division() {
        let q = Coefficient::one().div(&Coefficient::param(0));
        assert!(q.value(0.0, &[0.0]).is_err());
        let (v, g) = q.value_and_grad(0.0, &[4.0]).unwrap();
        assert_eq!(v, 0.25);
        assert!((g[0] + 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn operator_gram_is_psd() {
        let k = SeKernel::new(1.0, 1.2).unwrap();
        let theta = [0.7, 1.6];
        let ops = [chain_constraint(), DiffOperator::identity()];
        let pts: Vec<(usize, f64)> = (0..30).map(|i| (i % 2, 0.33 * i as f64)).collect();
        let n = pts.len();
        let g = faer::Mat::<f64>::from_fn(n, n, |i, j| {
            op_cov(&ops[pts[i].0], &ops[pts[j].0], &k, pts[i].1, pts[j].1, &theta).unwrap()
        });
        let trace: f64 = (0..n).map(|i| g[(i, i)]).sum();
        let eig = g.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8 * trace, "min eigenvalue {min}");
    }

    proptest! {
        #[test]
        fn bilinear_in_first_argument(t in 0.0f64..10.0, t2 in 0.0f64..10.0,
                                      th1 in 0.1f64..3.0, th2 in 0.1f64..3.0) {
            let k = SeKernel::new(1.0, 1.1).unwrap();
            let a1 = chain_constraint();
            let a2 = DiffOperator::new(vec![(1, Coefficient::param(1)), (3, Coefficient::one())],
                                       Coefficient::zero()).unwrap();
            let b = DiffOperator::derivative(1).unwrap();
            let theta = [th1, th2];
            let sum = op_cov(&a1.add(&a2).unwrap(), &b, &k, t, t2, &theta).unwrap();
            let parts = op_cov(&a1, &b, &k, t, t2, &theta).unwrap()
                + op_cov(&a2, &b, &k, t, t2, &theta).unwrap();
            prop_assert!((sum - parts).abs() <= 1e-10 * (1.0 + parts.abs()));
        }

        #[test]
        fn adjoint_symmetry(t in 0.0f64..10.0, t2 in 0.0f64..10.0,
                            th1 in 0.1f64..3.0, th2 in 0.1f64..3.0) {
            let k = SeKernel::new(0.8, 0.9).unwrap();
            let a = chain_constraint();
            let b = DiffOperator::new(vec![(1, Coefficient::param(0)), (0, Coefficient::one())],
                                      Coefficient::zero()).unwrap();
            let theta = [th1, th2];
            let ab = op_cov(&a, &b, &k, t, t2, &theta).unwrap();
            let ba = op_cov(&b, &a, &k, t2, t, &theta).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab.abs()));
        }

        #[test]
        fn gradients_match_finite_differences(t in 0.0f64..10.0, dt in -2.0f64..2.0,
                                              th1 in 0.3f64..3.0, th2 in 0.3f64..3.0,
                                              a in 0.5f64..2.0, l in 0.5f64..2.0) {
            let t2 = t + dt;
            let op = chain_constraint();
            let x1 = DiffOperator::new(
                vec![(1, Coefficient::one().div(&Coefficient::param(0))),
                     (0, Coefficient::param(1).div(&Coefficient::param(0)))],
                Coefficient::zero()).unwrap();
            let theta = [th1, th2];
            let h = 1e-5;
            let g = op_cov_grad(&op, &x1, &SeKernel::new(a, l).unwrap(), t, t2, &theta).unwrap();
            let f = |theta: &[f64], a: f64, l: f64| {
                op_cov(&op, &x1, &SeKernel::new(a, l).unwrap(), t, t2, theta).unwrap()
            };
            let scale = f(&theta, a, l).abs().max(1.0);
            for i in 0..2 {
                let mut tp = theta; tp[i] += h;
                let mut tm = theta; tm[i] -= h;
                let fd = (f(&tp, a, l) - f(&tm, a, l)) / (2.0 * h);
                prop_assert!((g.grad_theta[i] - fd).abs() < 1e-4 * fd.abs().max(1e-2 * scale));
            }
            let fd_a = (f(&theta, a + h, l) - f(&theta, a - h, l)) / (2.0 * h);
            let fd_l = (f(&theta, a, l + h) - f(&theta, a, l - h)) / (2.0 * h);
            prop_assert!((g.grad_hyper.0 - fd_a).abs() < 1e-4 * fd_a.abs().max(1e-2 * scale));
            prop_assert!((g.grad_hyper.1 - fd_l).abs() < 1e-4 * fd_l.abs().max(1e-2 * scale));
        }
    }
}
