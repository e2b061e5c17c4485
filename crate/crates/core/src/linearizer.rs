//! Piecewise-constant linearization of a nonlinear vector field around
//! fixed points estimated from data.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffop::Coefficient;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::gpr::{fit_hyper, Gpr, GprHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub t: f64,
    pub state: Vec<f64>,
}

/// Anchors sorted by time. Lookups pick the nearest anchor, the earlier one
/// on ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointTable {
    anchors: Vec<Anchor>,
    /// Per-anchor posterior std of each state entry, when estimated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<Vec<Vec<f64>>>,
}

impl FixedPointTable {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::config("fixed-point table is empty"));
        }
        let d = anchors[0].state.len();
        for (k, a) in anchors.iter().enumerate() {
            if !a.t.is_finite() || a.state.iter().any(|s| !s.is_finite()) {
                return Err(Error::config(format!("non-finite anchor {k}")));
            }
            if a.state.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: a.state.len() });
            }
            if k > 0 && a.t <= anchors[k - 1].t {
                return Err(Error::config("anchor times must be strictly increasing"));
            }
        }
        Ok(Self { anchors, std: None })
    }

    pub fn with_std(mut self, std: Vec<Vec<f64>>) -> Result<Self> {
        if std.len() != self.anchors.len()
            || std.iter().any(|s| s.len() != self.dim() || s.iter().any(|v| !(v.is_finite() && *v >= 0.0)))
        {
            return Err(Error::config("anchor std table does not match anchors"));
        }
        self.std = Some(std);
        Ok(self)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn std(&self) -> Option<&[Vec<f64>]> {
        self.std.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].state.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index of the anchor nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let right = self.anchors.partition_point(|a| a.t < t);
        if right == 0 {
            return 0;
        }
        if right == self.anchors.len() {
            return right - 1;
        }
        let left = right - 1;
        if t - self.anchors[left].t <= self.anchors[right].t - t {
            left
        } else {
            right
        }
    }

    pub fn state_at(&self, t: f64) -> &[f64] {
        &self.anchors[self.nearest(t)].state
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t");
        for j in 0..self.dim() {
            write!(out, ",s{}", j + 1).unwrap();
        }
        out.push('\n');
        for a in &self.anchors {
            write!(out, "{:?}", a.t).unwrap();
            for s in &a.state {
                write!(out, ",{s:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Where one state entry of the anchors comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateSource {
    /// Component `j` of the dataset.
    Observed(usize),
    /// Time derivative of the smoothed component `j`.
    DerivativeOf(usize),
}

impl StateSource {
    fn component(self) -> usize {
        match self {
            Self::Observed(j) | Self::DerivativeOf(j) => j,
        }
    }
}

/// Anchors at the observation rows, holding the raw observed values.
pub fn fixed_points_from_observations(dataset: &Dataset, sources: &[StateSource]) -> Result<FixedPointTable> {
    let mut anchors = Vec::with_capacity(dataset.len());
    for (i, (&t, row)) in dataset.times.iter().zip(&dataset.observations).enumerate() {
        let mut state = Vec::with_capacity(sources.len());
        for &src in sources {
            match src {
                StateSource::Observed(j) => match row.get(j).copied().flatten() {
                    Some(v) => state.push(v),
                    None => {
                        return Err(Error::config(format!(
                            "component {} is not observed at row {i}; use GPR-smoothed fixed points",
                            j + 1
                        )))
                    }
                },
                StateSource::DerivativeOf(j) => {
                    return Err(Error::config(format!(
                        "derivative of component {} is not observed; use GPR-smoothed fixed points",
                        j + 1
                    )))
                }
            }
        }
        anchors.push(Anchor { t, state });
    }
    FixedPointTable::new(anchors)
}

/// Result of smoothing: the table plus the fitted per-component GPR
/// hyperparameters.
#[derive(Debug, Clone)]
pub struct SmoothedFixedPoints {
    pub table: FixedPointTable,
    pub hyper: Vec<(usize, GprHyper)>,
    /// Components whose smoother fell back to the median heuristic.
    pub fallbacks: Vec<usize>,
}

/// Anchors at every observation row, holding per-component GPR posterior
/// means (or mean derivatives), with the posterior std attached.
pub fn fixed_points_from_gpr(dataset: &Dataset, sources: &[StateSource]) -> Result<SmoothedFixedPoints> {
    let mut comps: Vec<usize> = sources.iter().map(|s| s.component()).collect();
    comps.sort_unstable();
    comps.dedup();
    let mut gps = Vec::with_capacity(comps.len());
    let mut fallbacks = Vec::new();
    for &j in &comps {
        let (t, y) = dataset.component(j);
        if t.len() < 3 {
            return Err(Error::config(format!(
                "component {} needs at least 3 observations for smoothing, has {}",
                j + 1,
                t.len()
            )));
        }
        let fit = fit_hyper(&t, &y)?;
        if fit.fallback {
            log::warn!("smoother for component {} fell back to median heuristic", j + 1);
            fallbacks.push(j);
        }
        gps.push((j, Gpr::condition(&t, &y, fit.hyper)?));
    }
    let times = &dataset.times;
    let n = times.len();
    let mut means = vec![vec![0.0; sources.len()]; n];
    let mut stds = vec![vec![0.0; sources.len()]; n];
    for (s, &src) in sources.iter().enumerate() {
        let (order, j) = match src {
            StateSource::Observed(j) => (0, j),
            StateSource::DerivativeOf(j) => (1, j),
        };
        let gp = &gps.iter().find(|(c, _)| *c == j).expect("component fitted above").1;
        let (m, v) = gp.predict(times, order)?;
        for i in 0..n {
            means[i][s] = m[i];
            stds[i][s] = v[i].sqrt();
        }
    }
    let anchors = times.iter().zip(means).map(|(&t, state)| Anchor { t, state }).collect();
    let table = FixedPointTable::new(anchors)?.with_std(stds)?;
    Ok(SmoothedFixedPoints {
        table,
        hyper: gps.iter().map(|(j, g)| (*j, g.hyper())).collect(),
        fallbacks,
    })
}

/// Piecewise-constant Jacobian and offset coefficients, `dx/dt ~ J(t) x + c(t)`.
#[derive(Clone)]
pub struct Linearization {
    dim: usize,
    /// Row-major `dim x dim`.
    jacobian: Vec<Coefficient>,
    offset: Vec<Coefficient>,
}

impl Linearization {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jacobian(&self, i: usize, j: usize) -> &Coefficient {
        &self.jacobian[i * self.dim + j]
    }

    pub fn offset(&self, i: usize) -> &Coefficient {
        &self.offset[i]
    }
}

/// Linearizes `field` around the anchors of `table`: on each segment the
/// Jacobian and offset take their values at the segment's anchor.
pub fn linearize(field: Arc<dyn VectorField>, table: Arc<FixedPointTable>) -> Result<Linearization> {
    let d = field.dim();
    if table.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: table.dim() });
    }
    let p = field.n_params();
    let mut jacobian = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let (field, table) = (field.clone(), table.clone());
            jacobian.push(Coefficient::piecewise(move |t, theta, grad| {
                let s = table.state_at(t);
                let mut jac = vec![0.0; d * d];
                let mut jp = vec![0.0; d * d * p];
                field.state_jacobian(s, theta, &mut jac);
                field.state_jacobian_param_grad(s, theta, &mut jp);
                grad.copy_from_slice(&jp[(i * d + j) * p..(i * d + j + 1) * p]);
                Ok(jac[i * d + j])
            }));
        }
    }
    let mut offset = Vec::with_capacity(d);
    for i in 0..d {
        let (field, table) = (field.clone(), table.clone());
        offset.push(Coefficient::piecewise(move |t, theta, grad| {
            let s = table.state_at(t);
            let (value, g) = offset_at(field.as_ref(), s, theta, i);
            grad.copy_from_slice(&g);
            Ok(value)
        }));
    }
    Ok(Linearization { dim: d, jacobian, offset })
}

/// `c_i = f_i(s) - sum_j J_ij(s) s_j` and its parameter gradient.
pub fn offset_at(field: &dyn VectorField, s: &[f64], theta: &[f64], i: usize) -> (f64, Vec<f64>) {
    let (d, p) = (field.dim(), field.n_params());
    let mut f = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut fp = vec![0.0; d * p];
    let mut jp = vec![0.0; d * d * p];
    field.rhs(s, theta, &mut f);
    field.state_jacobian(s, theta, &mut jac);
    field.param_jacobian(s, theta, &mut fp);
    field.state_jacobian_param_grad(s, theta, &mut jp);
    let value = f[i] - (0..d).map(|j| jac[i * d + j] * s[j]).sum::<f64>();
    let grad = (0..p)
        .map(|k| fp[i * p + k] - (0..d).map(|j| jp[(i * d + j) * p + k] * s[j]).sum::<f64>())
        .collect();
    (value, grad)
}

/// Averages `inner` over `samples` tables drawn independently per anchor
/// from `N(state, std^2)`.
pub fn mc_marginalize_fixed_points<F>(
    table: &FixedPointTable,
    samples: usize,
    seed: u64,
    mut inner: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&FixedPointTable) -> Result<(f64, Vec<f64>)>,
{
    if samples == 0 {
        return Err(Error::DegenerateInput("Monte-Carlo sample count must be at least 1".into()));
    }
    let std = table
        .std()
        .ok_or_else(|| Error::config("Monte-Carlo marginalization needs per-anchor posterior std"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut grad: Vec<f64> = Vec::new();
    for _ in 0..samples {
        let anchors = table
            .anchors()
            .iter()
            .zip(std)
            .map(|(a, sd)| {
                let state = a
                    .state
                    .iter()
                    .zip(sd)
                    .map(|(s, sd)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        s + sd * z
                    })
                    .collect();
                Anchor { t: a.t, state }
            })
            .collect();
        let draw = FixedPointTable::new(anchors)?;
        let (v, g) = inner(&draw)?;
        total += v;
        if grad.is_empty() {
            grad = vec![0.0; g.len()];
        }
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    let s = samples as f64;
    Ok((total / s, grad.into_iter().map(|g| g / s).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FitzHughNagumoField, LinearChainField, VanDerPolField};
    use rand::Rng;

    fn table(ts: &[f64], d: usize) -> FixedPointTable {
        FixedPointTable::new(
            ts.iter().enumerate().map(|(k, &t)| Anchor { t, state: vec![k as f64; d] }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn nearest_breaks_ties_to_the_left() {
        let tb = table(&[0.0, 1.0, 2.0], 1);
        assert_eq!(tb.nearest(0.5), 0);
        assert_eq!(tb.nearest(0.51), 1);
        assert_eq!(tb.nearest(1.5), 1);
        assert_eq!(tb.nearest(-3.0), 0);
        assert_eq!(tb.nearest(9.0), 2);
        assert_eq!(tb.nearest(1.0), 1);
    }

    #[test]
    fn rejects_invalid_tables() {
        assert!(FixedPointTable::new(vec![]).is_err());
        let dup = vec![Anchor { t: 1.0, state: vec![0.0] }, Anchor { t: 1.0, state: vec![0.0] }];
        assert!(FixedPointTable::new(dup).is_err());
        assert!(FixedPointTable::new(vec![Anchor { t: 0.0, state: vec![f64::INFINITY] }]).is_err());
    }

    #[test]
    fn observed_anchors_copy_the_data() {
        let ds = Dataset::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), Some(4.0)], vec![Some(5.0), Some(6.0)]],
            2.0,
        )
        .unwrap();
        let tb = fixed_points_from_observations(&ds, &[StateSource::Observed(0), StateSource::Observed(1)])
            .unwrap();
        assert_eq!(tb.len(), 3);
        assert_eq!(tb.anchors()[1].state, vec![3.0, 4.0]);
        let err = fixed_points_from_observations(&ds, &[StateSource::DerivativeOf(0)]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn linear_field_linearizes_exactly() {
        let tb = Arc::new(table(&[0.0, 1.0, 2.0], 3));
        let lin = linearize(Arc::new(LinearChainField), tb).unwrap();
        let theta = [1.3, 0.4];
        let a = [[-1.3, 0.0, 0.0], [1.3, -0.4, 0.0], [0.0, 0.4, 0.0]];
        for t in [0.0, 0.3, 1.7, 5.0] {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(lin.jacobian(i, j).value(t, &theta).unwrap(), a[i][j]);
                }
                assert_eq!(lin.offset(i).value(t, &theta).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn van_der_pol_values_at_anchor() {
        let tb = Arc::new(FixedPointTable::new(vec![Anchor { t: 0.0, state: vec![2.0, 0.0] }]).unwrap());
        let lin = linearize(Arc::new(VanDerPolField), tb).unwrap();
        assert_eq!(lin.jacobian(1, 1).value(0.0, &[0.5]).unwrap(), -1.5);
        assert_eq!(lin.jacobian(1, 0).value(0.0, &[0.5]).unwrap(), -1.0);
        assert_eq!(lin.offset(1).value(0.0, &[0.5]).unwrap(), 0.0);
    }

    #[test]
    fn anchors_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fields: Vec<(Arc<dyn VectorField>, Vec<f64>)> = vec![
            (Arc::new(VanDerPolField), vec![0.5]),
            (Arc::new(FitzHughNagumoField), vec![0.2, 0.2, 3.0]),
        ];
        for (field, theta) in fields {
            let d = field.dim();
            let anchors: Vec<Anchor> = (0..100)
                .map(|k| Anchor { t: k as f64, state: (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect() })
                .collect();
            let tb = Arc::new(FixedPointTable::new(anchors).unwrap());
            let lin = linearize(field.clone(), tb.clone()).unwrap();
            for a in tb.anchors() {
                let mut f = vec![0.0; d];
                field.rhs(&a.state, &theta, &mut f);
                for i in 0..d {
                    let lin_f: f64 = (0..d)
                        .map(|j| lin.jacobian(i, j).value(a.t, &theta).unwrap() * a.state[j])
                        .sum::<f64>()
                        + lin.offset(i).value(a.t, &theta).unwrap();
                    assert!((lin_f - f[i]).abs() <= 1e-12 * f[i].abs().max(1.0), "{lin_f} vs {}", f[i]);
                }
            }
        }
    }

    #[test]
    fn offset_gradient_matches_finite_differences() {
        let f = FitzHughNagumoField;
        let s = [-0.7, 0.9];
        let theta = [0.2, 0.3, 2.5];
        for i in 0..2 {
            let (_, g) = offset_at(&f, &s, &theta, i);
            for k in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += 1e-6;
                tm[k] -= 1e-6;
                let fd = (offset_at(&f, &s, &tp, i).0 - offset_at(&f, &s, &tm, i).0) / 2e-6;
                assert!((g[k] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn segments_are_constant() {
        let tb = Arc::new(FixedPointTable::new(vec![
            Anchor { t: 0.0, state: vec![1.0, 0.5] },
            Anchor { t: 2.0, state: vec![-1.0, 0.2] },
        ])
        .unwrap());
        let lin = linearize(Arc::new(FitzHughNagumoField), tb).unwrap();
        let th = [0.2, 0.2, 3.0];
        let c = lin.jacobian(0, 0);
        assert_eq!(c.value(0.1, &th).unwrap(), c.value(0.9, &th).unwrap());
        assert_eq!(c.value(1.1, &th).unwrap(), c.value(3.0, &th).unwrap());
        // at u = -1 the slope term vanishes
        assert_eq!(c.value(2.0, &th).unwrap(), 0.0);
    }

    #[test]
    fn smoothing_constant_data() {
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let ds = Dataset::new(times, vec![vec![Some(1.5)]; 20], 10.0).unwrap();
        let sm = fixed_points_from_gpr(&ds, &[StateSource::Observed(0), StateSource::DerivativeOf(0)]).unwrap();
        for a in sm.table.anchors() {
            assert!((a.state[0] - 1.5).abs() < 1e-2 && a.state[1].abs() < 1e-2, "{a:?}");
        }
        assert!(sm.table.std().is_some());
    }

    #[test]
    fn monte_carlo_contract() {
        let tb = table(&[0.0, 1.0], 2).with_std(vec![vec![0.0; 2]; 2]).unwrap();
        let inner = |t: &FixedPointTable| Ok((t.anchors()[1].state[0], vec![t.anchors()[0].state[1]]));
        assert!(mc_marginalize_fixed_points(&tb, 0, 1, inner).is_err());
        assert_eq!(mc_marginalize_fixed_points(&tb, 1, 1, inner).unwrap(), (1.0, vec![0.0]));

        let noisy = table(&[0.0, 1.0], 2).with_std(vec![vec![0.3; 2]; 2]).unwrap();
        let a = mc_marginalize_fixed_points(&noisy, 2, 9, inner).unwrap();
        let b = mc_marginalize_fixed_points(&noisy, 2, 9, inner).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1[0].to_bits(), b.1[0].to_bits());
    }
}
