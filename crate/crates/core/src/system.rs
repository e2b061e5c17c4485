//! Latent-variable form of a dynamical system: every component is an
//! operator applied to one latent component `u`, plus one differential
//! constraint on `u` that must vanish.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, StackedEntry};
use crate::diffop::{Coefficient, DiffOperator};
use crate::error::{Error, Result};
use crate::field::{FitzHughNagumoField, LinearChainField, VanDerPolField, VectorField};
use crate::linearizer::{linearize, FixedPointTable, StateSource};

/// Bounds for parameters that appear in denominators.
pub const DEFAULT_BOUNDS: (f64, f64) = (1e-3, 1e3);
/// Lower bound keeping the FitzHugh-Nagumo coupling away from zero.
pub const FHN_COUPLING_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    LinearChain,
    VanDerPol,
    FitzHughNagumo,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [Self::LinearChain, Self::VanDerPol, Self::FitzHughNagumo];

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearChain => "linear-chain",
            Self::VanDerPol => "van-der-pol",
            Self::FitzHughNagumo => "fitzhugh-nagumo",
        }
    }

    pub fn field(self) -> Arc<dyn VectorField> {
        match self {
            Self::LinearChain => Arc::new(LinearChainField),
            Self::VanDerPol => Arc::new(VanDerPolField),
            Self::FitzHughNagumo => Arc::new(FitzHughNagumoField),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::LinearChain => 3,
            Self::VanDerPol | Self::FitzHughNagumo => 2,
        }
    }

    pub fn param_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Self::LinearChain => &["theta1", "theta2"],
            Self::VanDerPol => &["theta"],
            Self::FitzHughNagumo => &["theta1", "theta2", "theta3"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn default_truth(self) -> Vec<f64> {
        match self {
            Self::LinearChain => vec![1.0, 1.0],
            Self::VanDerPol => vec![0.5],
            Self::FitzHughNagumo => vec![0.2, 0.2, 3.0],
        }
    }

    pub fn initial_state(self) -> Vec<f64> {
        match self {
            Self::LinearChain => vec![1.0, 0.0, 0.0],
            Self::VanDerPol => vec![2.0, 0.0],
            Self::FitzHughNagumo => vec![-1.0, 1.0],
        }
    }

    pub fn default_t_max(self) -> f64 {
        match self {
            Self::LinearChain => 10.0,
            Self::VanDerPol | Self::FitzHughNagumo => 20.0,
        }
    }

    /// Components that carry observations.
    pub fn observed_mask(self) -> Vec<bool> {
        match self {
            Self::LinearChain => vec![false, true, false],
            Self::VanDerPol => vec![true, false],
            Self::FitzHughNagumo => vec![true, true],
        }
    }

    pub fn param_bounds(self) -> Vec<(f64, f64)> {
        match self {
            Self::LinearChain => vec![DEFAULT_BOUNDS; 2],
            Self::VanDerPol => vec![(-DEFAULT_BOUNDS.1, DEFAULT_BOUNDS.1)],
            Self::FitzHughNagumo => vec![
                (-DEFAULT_BOUNDS.1, DEFAULT_BOUNDS.1),
                (-DEFAULT_BOUNDS.1, DEFAULT_BOUNDS.1),
                (FHN_COUPLING_MIN, DEFAULT_BOUNDS.1),
            ],
        }
    }

    /// State entries the linearization needs, and where they come from.
    pub fn fixed_point_sources(self) -> Option<Vec<StateSource>> {
        match self {
            Self::LinearChain => None,
            Self::VanDerPol => Some(vec![StateSource::Observed(0), StateSource::DerivativeOf(0)]),
            Self::FitzHughNagumo => Some(vec![StateSource::Observed(0), StateSource::Observed(1)]),
        }
    }

    pub fn needs_fixed_points(self) -> bool {
        self.fixed_point_sources().is_some()
    }

    /// Builds the model; nonlinear systems require a fixed-point table.
    pub fn build(self, fixed_points: Option<Arc<FixedPointTable>>) -> Result<SystemModel> {
        match (self, fixed_points) {
            (Self::LinearChain, _) => Ok(build_linear_chain()),
            (Self::VanDerPol, Some(t)) => build_van_der_pol(t),
            (Self::FitzHughNagumo, Some(t)) => build_fitzhugh_nagumo(t),
            (kind, None) => Err(Error::config(format!("{kind} needs a fixed-point table"))),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "linear-chain" | "linear" => Ok(Self::LinearChain),
            "van-der-pol" | "vdp" => Ok(Self::VanDerPol),
            "fitzhugh-nagumo" | "fhn" => Ok(Self::FitzHughNagumo),
            other => Err(Error::config(format!(
                "unknown system `{other}` (expected linear-chain, van-der-pol or fitzhugh-nagumo)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    kind: SystemKind,
    latent_index: usize,
    component_ops: Vec<DiffOperator>,
    constraint_op: DiffOperator,
    param_names: Vec<String>,
    param_bounds: Vec<(f64, f64)>,
    observed_mask: Vec<bool>,
    fixed_points: Option<Arc<FixedPointTable>>,
}

impl SystemModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: SystemKind,
        latent_index: usize,
        component_ops: Vec<DiffOperator>,
        constraint_op: DiffOperator,
        param_names: Vec<String>,
        param_bounds: Vec<(f64, f64)>,
        observed_mask: Vec<bool>,
        fixed_points: Option<Arc<FixedPointTable>>,
    ) -> Result<Self> {
        let d = component_ops.len();
        if latent_index >= d || !component_ops[latent_index].is_identity() {
            return Err(Error::config("the latent component's operator must be the identity"));
        }
        if observed_mask.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: observed_mask.len() });
        }
        if !observed_mask.iter().any(|&m| m) {
            return Err(Error::config("at least one component must be observed"));
        }
        if constraint_op.max_order() < 1 {
            return Err(Error::config("the constraint operator must contain a derivative"));
        }
        if param_bounds.len() != param_names.len() {
            return Err(Error::DimensionMismatch { expected: param_names.len(), got: param_bounds.len() });
        }
        if param_bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::config("parameter bounds must satisfy lower < upper"));
        }
        Ok(Self {
            kind,
            latent_index,
            component_ops,
            constraint_op,
            param_names,
            param_bounds,
            observed_mask,
            fixed_points,
        })
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        self.component_ops.len()
    }

    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    pub fn latent_index(&self) -> usize {
        self.latent_index
    }

    pub fn component_op(&self, j: usize) -> &DiffOperator {
        &self.component_ops[j]
    }

    pub fn component_ops(&self) -> &[DiffOperator] {
        &self.component_ops
    }

    pub fn constraint_op(&self) -> &DiffOperator {
        &self.constraint_op
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_bounds(&self) -> &[(f64, f64)] {
        &self.param_bounds
    }

    pub fn with_param_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: bounds.len() });
        }
        self.param_bounds = bounds;
        Ok(self)
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed_mask
    }

    pub fn fixed_points(&self) -> Option<&Arc<FixedPointTable>> {
        self.fixed_points.as_ref()
    }

    /// Clamps `theta` into the parameter box.
    pub fn project(&self, theta: &mut [f64]) {
        for (x, (lo, hi)) in theta.iter_mut().zip(&self.param_bounds) {
            *x = x.clamp(*lo, *hi);
        }
    }

    /// Observed-channel values minus their operator offsets, followed by
    /// `-offset` of the constraint operator at each constraint time.
    pub fn center_observations(
        &self,
        values: &[f64],
        entries: &[StackedEntry],
        constraint_times: &[f64],
        theta: &[f64],
    ) -> Result<Vec<f64>> {
        let mut z = Vec::with_capacity(values.len() + constraint_times.len());
        for (v, e) in values.iter().zip(entries) {
            z.push(v - self.component_ops[e.component].offset().value(e.t, theta)?);
        }
        for &t in constraint_times {
            z.push(-self.constraint_op.offset().value(t, theta)?);
        }
        Ok(z)
    }

    /// Checks that `dataset` has the model's shape and observes what the mask
    /// says.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        dataset.validate()?;
        if dataset.dim() != self.dim() {
            return Err(Error::config(format!(
                "{} has {} components but the data has {} columns",
                self.name(),
                self.dim(),
                dataset.dim()
            )));
        }
        for (j, &m) in self.observed_mask.iter().enumerate() {
            if m && !dataset.has_component(j) {
                return Err(Error::config(format!("component {} is marked observed but has no data", j + 1)));
            }
        }
        Ok(())
    }
}

/// `x1 -> x2 -> x3` with `u = x2`:
/// `x1 = (u' + th2 u) / th1`, `x3 = 1 - x1 - u`,
/// constraint `u'' + (th1 + th2) u' + th1 th2 u = 0`.
pub fn build_linear_chain() -> SystemModel {
    let (t1, t2) = (Coefficient::param(0), Coefficient::param(1));
    let inv_t1 = Coefficient::one().div(&t1);
    let x1 = DiffOperator::new(vec![(1, inv_t1.clone()), (0, t2.mul(&inv_t1))], Coefficient::zero())
        .expect("orders within limit");
    let x3 = DiffOperator::new(
        vec![(1, inv_t1.neg()), (0, t2.mul(&inv_t1).add(&Coefficient::one()).neg())],
        Coefficient::one(),
    )
    .expect("orders within limit");
    let constraint = DiffOperator::new(
        vec![(2, Coefficient::one()), (1, t1.add(&t2)), (0, t1.mul(&t2))],
        Coefficient::zero(),
    )
    .expect("orders within limit");
    let kind = SystemKind::LinearChain;
    SystemModel::new(
        kind,
        1,
        vec![x1, DiffOperator::identity(), x3],
        constraint,
        kind.param_names(),
        kind.param_bounds(),
        kind.observed_mask(),
        None,
    )
    .expect("linear chain model is valid")
}

/// `u' = w`, `w' = th (1 - u^2) w - u`, linearized as
/// `u'' - J22 u' - J21 u - c2 = 0` on each segment.
pub fn build_van_der_pol(table: Arc<FixedPointTable>) -> Result<SystemModel> {
    let kind = SystemKind::VanDerPol;
    let lin = linearize(kind.field(), table.clone())?;
    let constraint = DiffOperator::new(
        vec![(2, Coefficient::one()), (1, lin.jacobian(1, 1).neg()), (0, lin.jacobian(1, 0).neg())],
        lin.offset(1).neg(),
    )?;
    SystemModel::new(
        kind,
        0,
        vec![DiffOperator::identity(), DiffOperator::derivative(1)?],
        constraint,
        kind.param_names(),
        kind.param_bounds(),
        kind.observed_mask(),
        Some(table),
    )
}

/// FitzHugh-Nagumo with `u = x1`:
/// `x2 = (u' - J11 u - c1) / J12`, constraint
/// `x2' - J21 u - J22 x2 - c2 = 0` with `x2` substituted.
pub fn build_fitzhugh_nagumo(table: Arc<FixedPointTable>) -> Result<SystemModel> {
    let kind = SystemKind::FitzHughNagumo;
    let lin = linearize(kind.field(), table.clone())?;
    let j12 = lin.jacobian(0, 1);
    let inv_j12 = Coefficient::one().div(j12);
    let x2 = DiffOperator::new(
        vec![(1, inv_j12.clone()), (0, lin.jacobian(0, 0).mul(&inv_j12).neg())],
        lin.offset(0).mul(&inv_j12).neg(),
    )?;
    let minus_j21 = DiffOperator::new(vec![(0, lin.jacobian(1, 0).neg())], Coefficient::zero())?;
    let constraint = x2
        .then_derivative(1)?
        .add(&minus_j21)?
        .add(&x2.scale(&lin.jacobian(1, 1).neg())?)?;
    let offset = constraint.offset().sub(lin.offset(1));
    let constraint = constraint.with_offset(offset);
    SystemModel::new(
        kind,
        0,
        vec![DiffOperator::identity(), x2],
        constraint,
        kind.param_names(),
        kind.param_bounds(),
        kind.observed_mask(),
        Some(table),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffop::op_cov;
    use crate::kernel::SeKernel;
    use crate::linearizer::Anchor;

    fn single_anchor(state: Vec<f64>) -> Arc<FixedPointTable> {
        Arc::new(FixedPointTable::new(vec![Anchor { t: 0.0, state }]).unwrap())
    }

    fn term_values(op: &DiffOperator, theta: &[f64]) -> Vec<(usize, f64)> {
        op.terms().iter().map(|t| (t.order, t.coeff.value(0.0, theta).unwrap())).collect()
    }

    #[test]
    fn linear_chain_structure() {
        let m = build_linear_chain();
        assert_eq!(m.dim(), 3);
        assert!(m.component_op(1).is_identity());
        assert_eq!(term_values(m.constraint_op(), &[1.0, 1.0]), vec![(0, 1.0), (1, 2.0), (2, 1.0)]);
        assert_eq!(m.observed_mask(), &[false, true, false]);
    }

    #[test]
    fn linear_chain_constraint_kernel_matches_nine_terms() {
        let m = build_linear_chain();
        let k = SeKernel::new(1.2, 0.8).unwrap();
        let (th1, th2) = (0.7, 1.6);
        let (s, p) = (th1 + th2, th1 * th2);
        let (t, t2) = (0.4, 1.3);
        let kd = |a, b| k.eval_deriv(a, b, t, t2).unwrap();
        let expected = kd(2, 2) + s * kd(2, 1) + p * kd(2, 0)
            + s * kd(1, 2) + s * s * kd(1, 1) + s * p * kd(1, 0)
            + p * kd(0, 2) + s * p * kd(0, 1) + p * p * kd(0, 0);
        let got = op_cov(m.constraint_op(), m.constraint_op(), &k, t, t2, &[th1, th2]).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn linear_chain_components_follow_mass_balance() {
        // u = t e^{-t} at theta = (1, 1): x1 = e^{-t}, x3 = 1 - e^{-t} - t e^{-t}
        let m = build_linear_chain();
        let t: f64 = 0.7;
        let (u, du) = (t * (-t).exp(), (1.0 - t) * (-t).exp());
        let apply = |op: &DiffOperator| {
            let mut acc = op.offset().value(t, &[1.0, 1.0]).unwrap();
            for term in op.terms() {
                let d = [u, du][term.order];
                acc += term.coeff.value(t, &[1.0, 1.0]).unwrap() * d;
            }
            acc
        };
        assert!((apply(m.component_op(0)) - (-t).exp()).abs() < 1e-14);
        assert!((apply(m.component_op(2)) - (1.0 - (-t).exp() - u)).abs() < 1e-14);
    }

    #[test]
    fn van_der_pol_coefficients() {
        let m = build_van_der_pol(single_anchor(vec![2.0, 0.0])).unwrap();
        // u'' - J22 u' - J21 u with J22 = -1.5, J21 = -1
        assert_eq!(term_values(m.constraint_op(), &[0.5]), vec![(0, 1.0), (1, 1.5), (2, 1.0)]);
        assert_eq!(m.constraint_op().offset().value(0.0, &[0.5]).unwrap(), 0.0);
        let m = build_van_der_pol(single_anchor(vec![0.0, 0.0])).unwrap();
        assert_eq!(term_values(m.constraint_op(), &[0.5])[0], (0, 1.0));
        assert!(m.component_op(0).is_identity());
    }

    #[test]
    fn van_der_pol_constraint_target_is_the_offset() {
        // u = 2, w = 1, theta = 0.1: c2 = 2 * 0.1 * 4 * 1 = 0.8
        let m = build_van_der_pol(single_anchor(vec![2.0, 1.0])).unwrap();
        let z = m.center_observations(&[], &[], &[0.0], &[0.1]).unwrap();
        assert!((z[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn fitzhugh_nagumo_coefficients() {
        let theta = [0.2, 0.2, 3.0];
        let m = build_fitzhugh_nagumo(single_anchor(vec![-1.0, 0.5])).unwrap();
        let x2 = m.component_op(1);
        // J11 = 0 at u = -1, so x2 = u'/3 + 2/3
        assert_eq!(term_values(x2, &theta), vec![(0, -0.0), (1, 1.0 / 3.0)]);
        assert!((x2.offset().value(0.0, &theta).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // constraint: u''/3 + (1/3 + J22/3) u' ... with J21 = -1/3, J22 = -1/15
        let c = term_values(m.constraint_op(), &theta);
        let expect = [(0, 1.0 / 3.0), (1, 1.0 / 45.0), (2, 1.0 / 3.0)];
        for ((o, v), (eo, ev)) in c.iter().zip(expect) {
            assert_eq!(*o, eo);
            assert!((v - ev).abs() < 1e-15, "order {o}: {v} vs {ev}");
        }
        // offset = -J22 nu2 - c2 = (1/15)(2/3) - 1/15
        let off = m.constraint_op().offset().value(0.0, &theta).unwrap();
        assert!((off - (2.0 / 45.0 - 1.0 / 15.0)).abs() < 1e-15);
    }

    #[test]
    fn fitzhugh_nagumo_constraint_vanishes_on_linearized_dynamics() {
        // at an anchor the linearized vector field is exact, so any state
        // (u, x2) with u' = f1 and x2' = f2 gives a zero residual.
        let theta = [0.3, 0.4, 2.0];
        let s = [0.6, -0.2];
        let m = build_fitzhugh_nagumo(single_anchor(s.to_vec())).unwrap();
        let field = FitzHughNagumoField;
        let mut f = [0.0; 2];
        field.rhs(&s, &theta, &mut f);
        let mut jac = [0.0; 4];
        field.state_jacobian(&s, &theta, &mut jac);
        let du = f[0];
        let dx2 = f[1];
        let ddu = jac[0] * du + jac[1] * dx2;
        let derivs = [s[0], du, ddu];
        let apply = |op: &DiffOperator| {
            let mut acc = op.offset().value(0.0, &theta).unwrap();
            for term in op.terms() {
                acc += term.coeff.value(0.0, &theta).unwrap() * derivs[term.order];
            }
            acc
        };
        assert!((apply(m.component_op(1)) - s[1]).abs() < 1e-12);
        assert!(apply(m.constraint_op()).abs() < 1e-12);
    }

    #[test]
    fn builders_are_deterministic() {
        let a = build_linear_chain();
        let b = build_linear_chain();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(term_values(a.constraint_op(), &[0.3, 2.0]), term_values(b.constraint_op(), &[0.3, 2.0]));
    }

    #[test]
    fn center_subtracts_offsets() {
        let m = build_linear_chain();
        let ds = Dataset::new(vec![0.0, 1.0], vec![vec![None, Some(1.0), None], vec![None, Some(0.5), None]], 1.0)
            .unwrap();
        let (v, e) = ds.stack(m.observed_mask());
        let z = m.center_observations(&v, &e, &[0.3], &[1.0, 1.0]).unwrap();
        assert_eq!(z, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn parses_names() {
        for kind in SystemKind::ALL {
            assert_eq!(kind.name().parse::<SystemKind>().unwrap(), kind);
        }
        assert!("lorenz".parse::<SystemKind>().is_err());
        assert!(SystemKind::VanDerPol.build(None).is_err());
    }
}
