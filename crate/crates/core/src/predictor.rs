//! Posterior curves for any component and derivative order, the plain GPR
//! baseline, and an RK4 reference integrator.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffop::DiffOperator;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::gpr::{fit_hyper, Gpr, GprHyper};
use crate::inference::{ConstraintSet, Hyper, Problem};
use crate::system::SystemModel;

/// Steps per horizon for the reference integrator.
pub const RK4_STEPS: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCurve {
    pub component: usize,
    pub order: usize,
    pub query_times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PosteriorCurve {
    fn new(component: usize, order: usize, query_times: Vec<f64>, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("non-finite posterior mean"));
        }
        let variance = variance
            .into_iter()
            .map(|v| {
                if v < -1e-10 {
                    log::warn!("posterior variance {v:e} below zero, clamped");
                }
                v.max(0.0)
            })
            .collect();
        Ok(Self { component, order, query_times, mean, variance })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t,mean,variance\n");
        for ((t, m), v) in self.query_times.iter().zip(&self.mean).zip(&self.variance) {
            writeln!(out, "{t:?},{m:?},{v:?}").unwrap();
        }
        out
    }

    /// Mean line with a two-sigma band; optional observations as points and
    /// a reference curve on the same grid.
    pub fn to_svg(&self, observations: Option<(&[f64], &[f64])>, reference: Option<&[f64]>) -> String {
        let (w, h, pad) = (720.0, 360.0, 40.0);
        let lo: Vec<f64> = self.mean.iter().zip(&self.variance).map(|(m, v)| m - 2.0 * v.sqrt()).collect();
        let hi: Vec<f64> = self.mean.iter().zip(&self.variance).map(|(m, v)| m + 2.0 * v.sqrt()).collect();
        let mut ys: Vec<f64> = lo.iter().chain(&hi).copied().collect();
        if let Some((_, y)) = observations {
            ys.extend(y);
        }
        if let Some(r) = reference {
            ys.extend(r);
        }
        let t0 = self.query_times.first().copied().unwrap_or(0.0);
        let t1 = self.query_times.last().copied().unwrap_or(1.0).max(t0 + 1e-12);
        let y0 = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let y1 = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(y0 + 1e-12);
        let sx = |t: f64| pad + (t - t0) / (t1 - t0) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let path = |ts: &[f64], ys: &[f64]| {
            ts.iter()
                .zip(ys)
                .enumerate()
                .map(|(i, (t, y))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, sx(*t), sy(*y)))
                .collect::<String>()
        };
        let mut band = String::new();
        for (i, (t, y)) in self.query_times.iter().zip(&hi).enumerate() {
            write!(band, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, sx(*t), sy(*y)).unwrap();
        }
        for (t, y) in self.query_times.iter().zip(&lo).rev() {
            write!(band, " L{:.2},{:.2}", sx(*t), sy(*y)).unwrap();
        }
        band.push_str(" Z");
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").unwrap();
        writeln!(
            svg,
            "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">component {} order {} (t in [{t0}, {t1}], y in [{y0:.4}, {y1:.4}])</text>",
            self.component + 1,
            self.order
        )
        .unwrap();
        writeln!(svg, "<path d=\"{band}\" fill=\"#f5a623\" fill-opacity=\"0.25\" stroke=\"none\"/>").unwrap();
        if let Some(r) = reference {
            writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>", path(&self.query_times, r))
                .unwrap();
        }
        writeln!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" stroke-dasharray=\"6 3\"/>",
            path(&self.query_times, &self.mean)
        )
        .unwrap();
        if let Some((ts, ys)) = observations {
            for (t, y) in ts.iter().zip(ys) {
                writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#d62728\"/>", sx(*t), sy(*y)).unwrap();
            }
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn mse(&self, truth: &[f64]) -> f64 {
        mse(&self.mean, truth)
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Operator giving the `order`-th derivative of component `component`.
pub fn target_operator(model: &SystemModel, component: usize, order: usize) -> Result<DiffOperator> {
    if component >= model.dim() {
        return Err(Error::config(format!("component {} out of range 1..={}", component + 1, model.dim())));
    }
    model.component_op(component).then_derivative(order)
}

/// Posterior of `x_component^(order)` conditioned on observations and the
/// given constraint times.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    model: &SystemModel,
    dataset: &Dataset,
    constraints: &ConstraintSet,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
    component: usize,
    order: usize,
    query_times: &[f64],
) -> Result<PosteriorCurve> {
    let op = target_operator(model, component, order)?;
    let post = Problem::new(model, dataset, sigma_v)?.posterior(&constraints.times, theta, hyper)?;
    let (mean, var) = post.predict_op(&op, query_times)?;
    PosteriorCurve::new(component, order, query_times.to_vec(), mean, var)
}

/// Posterior of an arbitrary operator applied to the latent component.
#[allow(clippy::too_many_arguments)]
pub fn predict_operator(
    model: &SystemModel,
    dataset: &Dataset,
    constraints: &ConstraintSet,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
    op: &DiffOperator,
    query_times: &[f64],
) -> Result<PosteriorCurve> {
    let post = Problem::new(model, dataset, sigma_v)?.posterior(&constraints.times, theta, hyper)?;
    let (mean, var) = post.predict_op(op, query_times)?;
    PosteriorCurve::new(model.latent_index(), op.max_order(), query_times.to_vec(), mean, var)
}

/// Plain GPR on one component with hyperparameters fitted by marginal
/// likelihood.
pub fn gpr_baseline(dataset: &Dataset, component: usize, query_times: &[f64], order: usize) -> Result<PosteriorCurve> {
    let (t, y) = dataset.component(component);
    let fit = fit_hyper(&t, &y)?;
    gpr_curve(dataset, component, fit.hyper, query_times, order)
}

/// Plain GPR on one component with fixed hyperparameters.
pub fn gpr_curve(
    dataset: &Dataset,
    component: usize,
    hyper: GprHyper,
    query_times: &[f64],
    order: usize,
) -> Result<PosteriorCurve> {
    let (t, y) = dataset.component(component);
    let gp = Gpr::condition(&t, &y, hyper)?;
    let (mean, var) = gp.predict(query_times, order)?;
    PosteriorCurve::new(component, order, query_times.to_vec(), mean, var)
}

/// States, first and second time derivatives along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Trajectory {
    /// `(d/dt)^order x_component` along the grid, for order <= 2.
    pub fn series(&self, component: usize, order: usize) -> Vec<f64> {
        let rows = match order {
            0 => &self.states,
            1 => &self.first,
            2 => &self.second,
            _ => panic!("trajectory derivatives are stored up to order 2"),
        };
        rows.iter().map(|r| r[component]).collect()
    }
}

/// Classical RK4 from `x0` at `t = 0`, reported at the sorted `grid`, using
/// at most `step` per substep. `x'` comes from the field and `x''` from
/// its Jacobian.
pub fn rk4_reference(
    field: &dyn VectorField,
    theta: &[f64],
    x0: &[f64],
    grid: &[f64],
    step: f64,
) -> Result<Trajectory> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config("integration step must be positive"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::config("integration grid must be sorted and non-negative"));
    }
    let rhs = |x: &[f64]| {
        let mut o = vec![0.0; d];
        field.rhs(x, theta, &mut o);
        o
    };
    let axpy = |x: &[f64], a: f64, k: &[f64]| x.iter().zip(k).map(|(x, k)| x + a * k).collect::<Vec<_>>();
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut out = Trajectory { times: Vec::new(), states: Vec::new(), first: Vec::new(), second: Vec::new() };
    for &target in grid {
        let span = target - t;
        if span > 0.0 {
            let n = (span / step).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                let k1 = rhs(&x);
                let k2 = rhs(&axpy(&x, 0.5 * h, &k1));
                let k3 = rhs(&axpy(&x, 0.5 * h, &k2));
                let k4 = rhs(&axpy(&x, h, &k3));
                for i in 0..d {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                t += h;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Integration { t });
                }
            }
        }
        t = target;
        let f = rhs(&x);
        let mut jac = vec![0.0; d * d];
        field.state_jacobian(&x, theta, &mut jac);
        let second = (0..d).map(|i| (0..d).map(|j| jac[i * d + j] * f[j]).sum()).collect();
        out.times.push(target);
        out.states.push(x.clone());
        out.first.push(f);
        out.second.push(second);
    }
    Ok(out)
}
