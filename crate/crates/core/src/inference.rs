//! Joint Gram over observations and constraint residuals, its log marginal
//! likelihood and gradient, constraint-time sampling, and the Semi-Adam fit
//! that jointly estimates model parameters and kernel hyperparameters.

use std::fmt::Write as _;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::config::{format_bounds, format_list, parse_bounds, parse_list, parse_value, KeyValues};
use crate::dataset::{Dataset, StackedEntry};
use crate::diffop::{DiffOperator, EvaluatedOperator};
use crate::error::{Error, Result};
use crate::gpr::{median_gap, std_dev};
use crate::kernel::SeKernel;
use crate::linalg::Factor;
use crate::system::SystemModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const DEFAULT_SIGMA_V: f64 = 1e-4;
/// Grid size for the prior-variance maximum used by the rejection sampler.
pub const ETA_GRID: usize = 512;
pub const STARVATION_RATE: f64 = 1e-4;
pub const STARVATION_PROPOSALS: u64 = 1_000_000;

/// Log-space limits for hyperparameters during optimization.
const LN_HYPER_MIN: f64 = -18.0;
const LN_HYPER_MAX: f64 = 14.0;

/// Kernel amplitude, length scale and one noise std per observed component
/// (in component order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub amplitude: f64,
    pub length_scale: f64,
    pub obs_noise: Vec<f64>,
}

impl Hyper {
    pub fn kernel(&self) -> Result<SeKernel> {
        SeKernel::new(self.amplitude, self.length_scale)
    }

    /// Data-driven start: twice the median time gap, the std of the latent
    /// channel (or of all observations), and a tenth of each channel's std as
    /// noise unless `sigma_init` is given.
    pub fn initial(model: &SystemModel, dataset: &Dataset, sigma_init: Option<f64>) -> Result<Self> {
        let length_scale = 2.0 * median_gap(&dataset.times);
        if !(length_scale > 0.0) {
            return Err(Error::DegenerateInput("need at least two distinct observation times".into()));
        }
        let k = model.latent_index();
        let amplitude_values = if model.observed_mask()[k] {
            dataset.component(k).1
        } else {
            let (v, _) = dataset.stack(model.observed_mask());
            v
        };
        let amplitude = std_dev(&amplitude_values).max(1e-3);
        let obs_noise = observed_components(model)
            .map(|j| sigma_init.unwrap_or_else(|| 0.1 * std_dev(&dataset.component(j).1).max(1e-3)))
            .collect();
        let h = Self { amplitude, length_scale, obs_noise };
        h.validate(model)?;
        Ok(h)
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        let expected = observed_components(model).count();
        if self.obs_noise.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: self.obs_noise.len() });
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.amplitude) || !ok(self.length_scale) || !self.obs_noise.iter().all(|&s| ok(s)) {
            return Err(Error::domain("hyperparameters must be positive and finite"));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.amplitude, self.length_scale];
        v.extend(&self.obs_noise);
        v
    }

    fn to_log(&self) -> Vec<f64> {
        self.to_vec().iter().map(|v| v.ln()).collect()
    }

    fn from_log(p: &[f64]) -> Self {
        Self { amplitude: p[0].exp(), length_scale: p[1].exp(), obs_noise: p[2..].iter().map(|v| v.exp()).collect() }
    }
}

fn observed_components(model: &SystemModel) -> impl Iterator<Item = usize> + '_ {
    model.observed_mask().iter().enumerate().filter(|(_, m)| **m).map(|(j, _)| j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Uniform,
    Rejection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub times: Vec<f64>,
    pub provenance: Provenance,
}

impl ConstraintSet {
    pub fn new(times: Vec<f64>, provenance: Provenance, t_max: f64) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::config("a constraint set needs at least one time"));
        }
        if times.iter().any(|t| !(t.is_finite() && (0.0..=t_max).contains(t))) {
            return Err(Error::config(format!("constraint times must lie in [0, {t_max}]")));
        }
        Ok(Self { times, provenance })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Partials of the log marginal likelihood in natural hyperparameter units.
#[derive(Debug, Clone, PartialEq)]
pub struct LmlGrad {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    pub grad_amplitude: f64,
    pub grad_length_scale: f64,
    pub grad_obs_noise: Vec<f64>,
    pub jitter: f64,
}

impl LmlGrad {
    /// Gradient in the optimizer's coordinates: raw parameters, then the
    /// logs of the hyperparameters.
    fn optimizer_grad(&self, hyper: &Hyper) -> Vec<f64> {
        let mut g = self.grad_theta.clone();
        g.push(self.grad_amplitude * hyper.amplitude);
        g.push(self.grad_length_scale * hyper.length_scale);
        g.extend(self.grad_obs_noise.iter().zip(&hyper.obs_noise).map(|(g, s)| g * s));
        g
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_theta.iter().all(|g| g.is_finite())
            && self.grad_amplitude.is_finite()
            && self.grad_length_scale.is_finite()
            && self.grad_obs_noise.iter().all(|g| g.is_finite())
    }
}

/// Assembled and factored joint covariance.
pub struct JointGram {
    matrix: Mat<f64>,
    factor: Factor,
    n_obs: usize,
    n_constraints: usize,
}

impl JointGram {
    pub fn matrix(&self) -> &Mat<f64> {
        &self.matrix
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_constraints(&self) -> usize {
        self.n_constraints
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter()
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }
}

struct Assembled {
    k: Mat<f64>,
    /// Lower triangles of the partials in each parameter.
    d_theta: Vec<Mat<f64>>,
    d_length_scale: Mat<f64>,
}

fn assemble(ops: &[EvaluatedOperator], kernel: &SeKernel, diag: &[f64], n_params: usize, grads: bool) -> Assembled {
    let n = ops.len();
    let mut k = Mat::<f64>::zeros(n, n);
    let (mut d_theta, mut d_len) = if grads {
        ((0..n_params).map(|_| Mat::<f64>::zeros(n, n)).collect::<Vec<_>>(), Mat::<f64>::zeros(n, n))
    } else {
        (Vec::new(), Mat::<f64>::zeros(0, 0))
    };
    let top = 2 * ops.iter().flat_map(|o| o.orders.iter().copied()).max().unwrap_or(0);
    let mut g = vec![0.0; n_params];
    let amp = kernel.amplitude();
    // column-major storage: fill the lower triangle column by column
    for j in 0..n {
        for i in j..n {
            let lag = kernel.lag_derivatives_upto(ops[i].t - ops[j].t, top, grads);
            let v = if grads {
                let (v, _, dl) = ops[i].cov_grad(&ops[j], &lag, amp, &mut g);
                d_len[(i, j)] = dl;
                for (m, gk) in d_theta.iter_mut().zip(&g) {
                    m[(i, j)] = *gk;
                }
                v
            } else {
                ops[i].cov(&ops[j], &lag)
            };
            k[(i, j)] = v;
        }
        k[(j, j)] += diag[j];
    }
    for j in 0..n {
        for i in j + 1..n {
            k[(j, i)] = k[(i, j)];
        }
    }
    Assembled { k, d_theta, d_length_scale: d_len }
}

/// A model bound to a dataset: stacked observations, noise slots and the
/// constraint regularization.
pub struct Problem<'a> {
    model: &'a SystemModel,
    values: Vec<f64>,
    entries: Vec<StackedEntry>,
    noise_slot: Vec<usize>,
    sigma_v: f64,
    t_max: f64,
    n_rows: usize,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a SystemModel, dataset: &Dataset, sigma_v: f64) -> Result<Self> {
        model.check_dataset(dataset)?;
        if !(sigma_v.is_finite() && sigma_v > 0.0) {
            return Err(Error::config(format!("sigma_v must be positive, got {sigma_v}")));
        }
        let (values, entries) = dataset.stack(model.observed_mask());
        let slots: Vec<usize> = observed_components(model).collect();
        let noise_slot = entries
            .iter()
            .map(|e| slots.iter().position(|&j| j == e.component).expect("stacked components are observed"))
            .collect();
        Ok(Self { model, values, entries, noise_slot, sigma_v, t_max: dataset.t_max, n_rows: dataset.len() })
    }

    pub fn model(&self) -> &SystemModel {
        self.model
    }

    pub fn n_obs(&self) -> usize {
        self.values.len()
    }

    /// Number of observation rows, the default constraint count.
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn sigma_v(&self) -> f64 {
        self.sigma_v
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.model.n_params() {
            return Err(Error::DimensionMismatch { expected: self.model.n_params(), got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::domain("non-finite model parameter"));
        }
        Ok(())
    }

    fn evaluated_ops(&self, constraints: &[f64], theta: &[f64]) -> Result<Vec<EvaluatedOperator>> {
        let mut ops = Vec::with_capacity(self.entries.len() + constraints.len());
        for e in &self.entries {
            ops.push(self.model.component_op(e.component).evaluate_at(e.t, theta)?);
        }
        for &t in constraints {
            ops.push(self.model.constraint_op().evaluate_at(t, theta)?);
        }
        Ok(ops)
    }

    fn diagonal(&self, n_constraints: usize, hyper: &Hyper) -> Vec<f64> {
        let mut d: Vec<f64> = self.noise_slot.iter().map(|&s| hyper.obs_noise[s] * hyper.obs_noise[s]).collect();
        d.extend(std::iter::repeat_n(self.sigma_v * self.sigma_v, n_constraints));
        d
    }

    fn ill_conditioned(theta: &[f64], hyper: &Hyper) -> Error {
        Error::IllConditioned { theta: theta.to_vec(), beta: hyper.to_vec() }
    }

    /// Observations minus operator offsets, then constraint targets.
    pub fn centered(&self, constraints: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.model.center_observations(&self.values, &self.entries, constraints, theta)
    }

    pub fn gram(&self, constraints: &[f64], theta: &[f64], hyper: &Hyper) -> Result<JointGram> {
        self.check_theta(theta)?;
        hyper.validate(self.model)?;
        let kernel = hyper.kernel()?;
        let ops = self.evaluated_ops(constraints, theta)?;
        let a = assemble(&ops, &kernel, &self.diagonal(constraints.len(), hyper), theta.len(), false);
        let factor = Factor::new(&a.k).ok_or_else(|| Self::ill_conditioned(theta, hyper))?;
        Ok(JointGram { matrix: a.k, factor, n_obs: self.n_obs(), n_constraints: constraints.len() })
    }

    pub fn objective(&self, constraints: &[f64], theta: &[f64], hyper: &Hyper) -> Result<f64> {
        let gram = self.gram(constraints, theta, hyper)?;
        log_marginal_likelihood(&gram, &self.centered(constraints, theta)?)
    }

    pub fn objective_and_grad(&self, constraints: &[f64], theta: &[f64], hyper: &Hyper) -> Result<LmlGrad> {
        self.check_theta(theta)?;
        hyper.validate(self.model)?;
        let kernel = hyper.kernel()?;
        let p = theta.len();
        let ops = self.evaluated_ops(constraints, theta)?;
        let diag = self.diagonal(constraints.len(), hyper);
        let a = assemble(&ops, &kernel, &diag, p, true);
        let factor = Factor::new(&a.k).ok_or_else(|| Self::ill_conditioned(theta, hyper))?;
        let z = self.centered(constraints, theta)?;
        let alpha = factor.solve(&z);
        let n = z.len();
        let quad: f64 = z.iter().zip(&alpha).map(|(z, a)| z * a).sum();
        let value = -0.5 * quad - 0.5 * factor.log_det() - 0.5 * n as f64 * LN_2PI;

        let kinv = factor.inverse();
        let mut g_theta = vec![0.0; p];
        let mut g_amp = 0.0;
        let mut g_len = 0.0;
        let mut g_noise = vec![0.0; hyper.obs_noise.len()];
        for j in 0..n {
            for i in j..n {
                let w = alpha[i] * alpha[j] - kinv[(i, j)];
                let (wt, kern) = if i == j { (w, a.k[(i, i)] - diag[i]) } else { (2.0 * w, a.k[(i, j)]) };
                g_amp += wt * kern;
                g_len += wt * a.d_length_scale[(i, j)];
                for (g, m) in g_theta.iter_mut().zip(&a.d_theta) {
                    *g += wt * m[(i, j)];
                }
            }
            if j < self.n_obs() {
                let slot = self.noise_slot[j];
                let w = alpha[j] * alpha[j] - kinv[(j, j)];
                g_noise[slot] += w * hyper.obs_noise[slot];
            }
        }
        // d K / d amplitude = 2 K_kernel / amplitude
        g_amp /= hyper.amplitude;
        g_len *= 0.5;
        for g in &mut g_theta {
            *g *= 0.5;
        }
        // offsets enter through z: d z / d theta = -d offset / d theta
        for (op, a) in ops.iter().zip(&alpha) {
            for (g, og) in g_theta.iter_mut().zip(&op.offset_grad) {
                *g += a * og;
            }
        }
        Ok(LmlGrad {
            value,
            grad_theta: g_theta,
            grad_amplitude: g_amp,
            grad_length_scale: g_len,
            grad_obs_noise: g_noise,
            jitter: factor.jitter(),
        })
    }

    /// Posterior variance of the constraint residual given the data only.
    pub fn potential(&self, theta: &[f64], hyper: &Hyper) -> Result<Potential> {
        self.check_theta(theta)?;
        hyper.validate(self.model)?;
        let kernel = hyper.kernel()?;
        let ops = self.evaluated_ops(&[], theta)?;
        let a = assemble(&ops, &kernel, &self.diagonal(0, hyper), theta.len(), false);
        let factor = Factor::new(&a.k).ok_or_else(|| Self::ill_conditioned(theta, hyper))?;
        let mut pot = Potential {
            kernel,
            theta: theta.to_vec(),
            constraint_op: self.model.constraint_op().clone(),
            data_ops: ops,
            factor,
            floor: self.sigma_v * self.sigma_v,
            eta: 0.0,
        };
        let mut eta = pot.floor;
        for i in 0..ETA_GRID {
            let t = self.t_max * i as f64 / (ETA_GRID - 1) as f64;
            eta = eta.max(pot.prior(t)?);
        }
        pot.eta = eta;
        Ok(pot)
    }

    /// Conditions on observations and the given constraint times.
    pub fn posterior(&self, constraints: &[f64], theta: &[f64], hyper: &Hyper) -> Result<Posterior> {
        self.check_theta(theta)?;
        hyper.validate(self.model)?;
        let kernel = hyper.kernel()?;
        let ops = self.evaluated_ops(constraints, theta)?;
        let a = assemble(&ops, &kernel, &self.diagonal(constraints.len(), hyper), theta.len(), false);
        let factor = Factor::new(&a.k).ok_or_else(|| Self::ill_conditioned(theta, hyper))?;
        let alpha = factor.solve(&self.centered(constraints, theta)?);
        Ok(Posterior { kernel, theta: theta.to_vec(), ops, factor, alpha })
    }
}

pub fn assemble_gram(
    model: &SystemModel,
    dataset: &Dataset,
    constraints: &ConstraintSet,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
) -> Result<JointGram> {
    Problem::new(model, dataset, sigma_v)?.gram(&constraints.times, theta, hyper)
}

/// `-z' K^{-1} z / 2 - log|K| / 2 - N log(2 pi) / 2` from the factor.
pub fn log_marginal_likelihood(gram: &JointGram, z: &[f64]) -> Result<f64> {
    if z.len() != gram.dim() {
        return Err(Error::DimensionMismatch { expected: gram.dim(), got: z.len() });
    }
    let w = gram.factor.solve_lower(z);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - 0.5 * gram.log_det() - 0.5 * z.len() as f64 * LN_2PI)
}

pub fn lml_gradient(
    model: &SystemModel,
    dataset: &Dataset,
    constraints: &ConstraintSet,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
) -> Result<LmlGrad> {
    Problem::new(model, dataset, sigma_v)?.objective_and_grad(&constraints.times, theta, hyper)
}

pub fn potential_variance(
    model: &SystemModel,
    dataset: &Dataset,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
    t: f64,
) -> Result<f64> {
    Problem::new(model, dataset, sigma_v)?.potential(theta, hyper)?.at(t)
}

/// `V(t)`: posterior variance of the constraint residual at `t` given the
/// observations, including the constraint regularization.
pub struct Potential {
    kernel: SeKernel,
    theta: Vec<f64>,
    constraint_op: DiffOperator,
    data_ops: Vec<EvaluatedOperator>,
    factor: Factor,
    floor: f64,
    eta: f64,
}

impl Potential {
    /// Prior variance `K_vv(t, t) + sigma_v^2`.
    pub fn prior(&self, t: f64) -> Result<f64> {
        let ev = self.constraint_op.evaluate_at(t, &self.theta)?;
        Ok(ev.cov(&ev, &self.kernel.lag_derivatives(0.0)) + self.floor)
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        let ev = self.constraint_op.evaluate_at(t, &self.theta)?;
        let prior = ev.cov(&ev, &self.kernel.lag_derivatives(0.0)) + self.floor;
        let cross: Vec<f64> =
            self.data_ops.iter().map(|d| ev.cov(d, &self.kernel.lag_derivatives(t - d.t))).collect();
        let w = self.factor.solve_lower(&cross);
        let reduction: f64 = w.iter().map(|v| v * v).sum();
        Ok((prior - reduction).max(self.floor))
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Largest prior variance over a uniform grid on `[0, t_max]`.
    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// A conditioned joint GP ready for prediction.
pub struct Posterior {
    kernel: SeKernel,
    theta: Vec<f64>,
    ops: Vec<EvaluatedOperator>,
    factor: Factor,
    alpha: Vec<f64>,
}

impl Posterior {
    /// Mean (offset included) and variance of `op u` at each query time.
    pub fn predict_op(&self, op: &DiffOperator, query: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.ops.len();
        let m = query.len();
        let qs = query.iter().map(|&t| op.evaluate_at(t, &self.theta)).collect::<Result<Vec<_>>>()?;
        let mut cross = Mat::<f64>::zeros(n, m);
        for (q, eq) in qs.iter().enumerate() {
            for (i, ei) in self.ops.iter().enumerate() {
                cross[(i, q)] = eq.cov(ei, &self.kernel.lag_derivatives(eq.t - ei.t));
            }
        }
        let v = self.factor.solve_lower_mat(&cross);
        let lag0 = self.kernel.lag_derivatives(0.0);
        let mut mean = Vec::with_capacity(m);
        let mut var = Vec::with_capacity(m);
        for (q, eq) in qs.iter().enumerate() {
            // latent derivative means first, so operator transforms of
            // predictions agree to rounding in the means themselves
            let lags: Vec<_> = self.ops.iter().map(|ei| self.kernel.lag_derivatives(eq.t - ei.t)).collect();
            let mut mu = eq.offset;
            for (&m, &c) in eq.orders.iter().zip(&eq.values) {
                let latent = compensated_sum(self.ops.iter().zip(&lags).zip(&self.alpha).map(|((ei, lag), a)| {
                    let k: f64 = ei.orders.iter().zip(&ei.values).map(|(&o, &cv)| cv * lag.mixed(m, o)).sum();
                    k * a
                }));
                mu += c * latent;
            }
            let red: f64 = (0..n).map(|i| v[(i, q)] * v[(i, q)]).sum();
            mean.push(mu);
            var.push(eq.cov(eq, &lag0) - red);
        }
        Ok((mean, var))
    }
}

/// Neumaier summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn sample_constraints_uniform<R: Rng + ?Sized>(t_max: f64, n_c: usize, rng: &mut R) -> Result<ConstraintSet> {
    if n_c == 0 {
        return Err(Error::config("constraint count must be at least 1"));
    }
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(Error::config(format!("t_max must be positive, got {t_max}")));
    }
    let times = (0..n_c).map(|_| rng.gen::<f64>() * t_max).collect();
    ConstraintSet::new(times, Provenance::Uniform, t_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplerStats {
    pub proposals: u64,
    pub accepted: u64,
}

impl SamplerStats {
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Proposes uniformly on `[0, t_max]` and accepts with
/// `q(t) = exp(-(V(t) - floor) / ((eta - floor) / 4))`.
pub struct RejectionSampler<F> {
    t_max: f64,
    floor: f64,
    eta: f64,
    potential: F,
}

impl<F: Fn(f64) -> Result<f64>> RejectionSampler<F> {
    pub fn new(t_max: f64, floor: f64, eta: f64, potential: F) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::config(format!("t_max must be positive, got {t_max}")));
        }
        if !(floor.is_finite() && eta.is_finite() && eta >= floor) {
            return Err(Error::domain("rejection sampler needs finite eta >= floor"));
        }
        Ok(Self { t_max, floor, eta, potential })
    }

    pub fn acceptance(&self, v: f64) -> f64 {
        let scale = 0.25 * (self.eta - self.floor);
        if scale <= 0.0 {
            return 1.0;
        }
        (-((v - self.floor).max(0.0)) / scale).exp()
    }

    fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<f64>> {
        let t = rng.gen::<f64>() * self.t_max;
        let q = self.acceptance((self.potential)(t)?);
        Ok((rng.gen::<f64>() < q).then_some(t))
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_c: usize, rng: &mut R) -> Result<(ConstraintSet, SamplerStats)> {
        if n_c == 0 {
            return Err(Error::config("constraint count must be at least 1"));
        }
        let mut stats = SamplerStats::default();
        let mut times = Vec::with_capacity(n_c);
        while times.len() < n_c {
            stats.proposals += 1;
            if let Some(t) = self.propose(rng)? {
                stats.accepted += 1;
                times.push(t);
            }
            if stats.proposals >= STARVATION_PROPOSALS && stats.rate() < STARVATION_RATE {
                return Err(Error::SamplerStarvation { rate: stats.rate(), proposals: stats.proposals });
            }
        }
        Ok((ConstraintSet::new(times, Provenance::Rejection, self.t_max)?, stats))
    }

    /// Acceptance statistics over a fixed number of proposals.
    pub fn measure<R: Rng + ?Sized>(&self, proposals: u64, rng: &mut R) -> Result<SamplerStats> {
        let mut stats = SamplerStats { proposals, accepted: 0 };
        for _ in 0..proposals {
            if self.propose(rng)?.is_some() {
                stats.accepted += 1;
            }
        }
        Ok(stats)
    }
}

pub fn rejection_sampler(potential: &Potential, t_max: f64) -> Result<RejectionSampler<impl Fn(f64) -> Result<f64> + '_>> {
    RejectionSampler::new(t_max, potential.floor(), potential.eta(), move |t| potential.at(t))
}

pub fn sample_constraints_rejection<R: Rng + ?Sized>(
    model: &SystemModel,
    dataset: &Dataset,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
    n_c: usize,
    rng: &mut R,
) -> Result<ConstraintSet> {
    let problem = Problem::new(model, dataset, sigma_v)?;
    let pot = problem.potential(theta, hyper)?;
    let (set, _) = rejection_sampler(&pot, dataset.t_max)?.sample(n_c, rng)?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    Uniform,
    Rejection,
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(Self::Uniform),
            "rejection" => Ok(Self::Rejection),
            other => Err(Error::config(format!("constraint_mode must be uniform or rejection, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Defaults to the number of observation rows.
    pub n_constraints: Option<usize>,
    pub constraint_mode: ConstraintMode,
    pub sigma_v: f64,
    pub seed: u64,
    pub theta_init: Option<Vec<f64>>,
    /// Box the initial parameters are drawn from when `theta_init` is unset;
    /// falls back to the parameter bounds.
    pub init_box: Option<Vec<(f64, f64)>>,
    pub theta_bounds: Option<Vec<(f64, f64)>>,
    pub refresh_every: usize,
    pub ema_decay: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub max_halvings: usize,
    /// Initial observation-noise std for every channel.
    pub sigma_init: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            iterations: 2000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            n_constraints: None,
            constraint_mode: ConstraintMode::Uniform,
            sigma_v: DEFAULT_SIGMA_V,
            seed: 0,
            theta_init: None,
            init_box: None,
            theta_bounds: None,
            refresh_every: 100,
            ema_decay: 0.9,
            plateau_window: 200,
            plateau_tol: 1e-6,
            max_halvings: 5,
            sigma_init: None,
        }
    }
}

impl FitConfig {
    pub const KEYS: [&'static str; 18] = [
        "iterations",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "n_constraints",
        "constraint_mode",
        "sigma_v",
        "seed",
        "theta_init",
        "init_box",
        "theta_bounds",
        "refresh_every",
        "ema_decay",
        "plateau_window",
        "plateau_tol",
        "max_halvings",
        "sigma_init",
    ];

    /// Applies one key; returns `false` when the key is not a fit setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "n_constraints" => self.n_constraints = Some(parse_value(key, value)?),
            "constraint_mode" => self.constraint_mode = value.parse()?,
            "sigma_v" => self.sigma_v = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "theta_init" => self.theta_init = Some(parse_list(key, value)?),
            "init_box" => self.init_box = Some(parse_bounds(key, value)?),
            "theta_bounds" => self.theta_bounds = Some(parse_bounds(key, value)?),
            "refresh_every" => self.refresh_every = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "plateau_window" => self.plateau_window = parse_value(key, value)?,
            "plateau_tol" => self.plateau_tol = parse_value(key, value)?,
            "max_halvings" => self.max_halvings = parse_value(key, value)?,
            "sigma_init" => self.sigma_init = Some(parse_value(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv.iter() {
            if !cfg.set(k, v)? {
                return Err(Error::config(format!("unknown fit setting `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("`{name}` must be positive, got {v}")))
            }
        };
        pos("learning_rate", self.learning_rate)?;
        pos("sigma_v", self.sigma_v)?;
        pos("epsilon", self.epsilon)?;
        if let Some(s) = self.sigma_init {
            pos("sigma_init", s)?;
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema_decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("`{name}` must lie in [0, 1), got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::config("`iterations` must be at least 1"));
        }
        if self.n_constraints == Some(0) {
            return Err(Error::config("`n_constraints` must be at least 1"));
        }
        if self.refresh_every == 0 {
            return Err(Error::config("`refresh_every` must be at least 1"));
        }
        Ok(())
    }

    /// Key-value rendering of the non-default settings.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let d = Self::default();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        if self.iterations != d.iterations {
            put("iterations", self.iterations.to_string());
        }
        if self.learning_rate != d.learning_rate {
            put("learning_rate", format!("{:?}", self.learning_rate));
        }
        if let Some(n) = self.n_constraints {
            put("n_constraints", n.to_string());
        }
        if self.constraint_mode != d.constraint_mode {
            put("constraint_mode", "rejection".into());
        }
        if self.sigma_v != d.sigma_v {
            put("sigma_v", format!("{:?}", self.sigma_v));
        }
        put("seed", self.seed.to_string());
        if let Some(t) = &self.theta_init {
            put("theta_init", format_list(t));
        }
        if let Some(b) = &self.init_box {
            put("init_box", format_bounds(b));
        }
        if let Some(b) = &self.theta_bounds {
            put("theta_bounds", format_bounds(b));
        }
        if let Some(s) = self.sigma_init {
            put("sigma_init", format!("{s:?}"));
        }
        out
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub smoothed: f64,
    pub grad_norm: f64,
    pub theta: Vec<f64>,
    /// Amplitude, length scale, then noise std per observed component.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceReason {
    MaxIters,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub reason: ConvergenceReason,
    pub best_iteration: usize,
    /// Raw log marginal likelihood at the returned point.
    pub final_objective: f64,
    pub best_smoothed: f64,
    pub initial_smoothed: f64,
    pub jitter: f64,
    pub lr_halvings: usize,
    /// RMS of the posterior-mean constraint residual at the returned
    /// constraint times.
    pub constraint_residual_norm: f64,
    pub theta_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub system: String,
    pub param_names: Vec<String>,
    pub theta: Vec<f64>,
    pub hyper: Hyper,
    pub sigma_v: f64,
    pub constraints: ConstraintSet,
    pub trace: Vec<TraceRow>,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    /// `iter,objective,grad_norm,theta...,beta...`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,objective,grad_norm");
        for name in &self.param_names {
            write!(out, ",{name}").unwrap();
        }
        out.push_str(",amplitude,length_scale");
        for j in 0..self.hyper.obs_noise.len() {
            write!(out, ",sigma_y{}", j + 1).unwrap();
        }
        out.push('\n');
        for r in &self.trace {
            write!(out, "{},{:?},{:?}", r.iter, r.objective, r.grad_norm).unwrap();
            for v in r.theta.iter().chain(&r.beta) {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Draws constraint times for one iteration.
struct ConstraintDrawer {
    mode: ConstraintMode,
    n_c: usize,
    t_max: f64,
    refresh_every: usize,
    potential: Option<Potential>,
}

impl ConstraintDrawer {
    fn draw(
        &mut self,
        iter: usize,
        problem: &Problem<'_>,
        theta: &[f64],
        hyper: &Hyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConstraintSet> {
        match self.mode {
            ConstraintMode::Uniform => sample_constraints_uniform(self.t_max, self.n_c, rng),
            ConstraintMode::Rejection => {
                if self.potential.is_none() || iter.is_multiple_of(self.refresh_every) {
                    self.potential = Some(problem.potential(theta, hyper)?);
                }
                let pot = self.potential.as_ref().expect("refreshed above");
                Ok(rejection_sampler(pot, self.t_max)?.sample(self.n_c, rng)?.0)
            }
        }
    }
}

fn split_params(params: &[f64], p: usize) -> (&[f64], Hyper) {
    (&params[..p], Hyper::from_log(&params[p..]))
}

/// Semi-Adam: every iteration uses all observations plus freshly drawn
/// constraint times; the best iterate by smoothed objective is returned.
pub fn semi_adam_fit(model: &SystemModel, dataset: &Dataset, config: &FitConfig) -> Result<EstimationResult> {
    config.validate()?;
    let problem = Problem::new(model, dataset, config.sigma_v)?;
    let p = model.n_params();
    let bounds = match &config.theta_bounds {
        Some(b) if b.len() != p => return Err(Error::DimensionMismatch { expected: p, got: b.len() }),
        Some(b) => b.clone(),
        None => model.param_bounds().to_vec(),
    };
    let project = |theta: &mut [f64]| {
        for (x, (lo, hi)) in theta.iter_mut().zip(&bounds) {
            *x = x.clamp(*lo, *hi);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta0 = match (&config.theta_init, &config.init_box) {
        (Some(t), _) if t.len() != p => return Err(Error::DimensionMismatch { expected: p, got: t.len() }),
        (Some(t), _) => t.clone(),
        (None, Some(b)) if b.len() != p => return Err(Error::DimensionMismatch { expected: p, got: b.len() }),
        (None, Some(b)) => b.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect(),
        (None, None) => bounds.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect(),
    };
    project(&mut theta0);
    let hyper0 = Hyper::initial(model, dataset, config.sigma_init)?;

    let mut params = theta0.clone();
    params.extend(hyper0.to_log());
    let mut adam = Adam::new(params.len(), config.adam());
    let mut drawer = ConstraintDrawer {
        mode: config.constraint_mode,
        n_c: config.n_constraints.unwrap_or(problem.n_rows()),
        t_max: dataset.t_max,
        refresh_every: config.refresh_every,
        potential: None,
    };

    let mut constraints = drawer.draw(0, &problem, &theta0, &hyper0, &mut rng)?;
    let mut eval = problem.objective_and_grad(&constraints.times, &theta0, &hyper0)?;
    if !eval.is_finite() {
        return Err(Error::Optimization("non-finite objective at the initial point".into()));
    }

    let mut trace = Vec::with_capacity(config.iterations);
    let mut best_history = Vec::with_capacity(config.iterations);
    let mut ema = eval.value;
    let initial_smoothed = ema;
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone(), constraints.clone(), eval.value, eval.jitter);
    let mut halvings = 0usize;
    let mut reason = ConvergenceReason::MaxIters;
    let mut iterations = 0;

    for it in 0..config.iterations {
        iterations = it + 1;
        let (theta, hyper) = split_params(&params, p);
        if it > 0 {
            ema = config.ema_decay * ema + (1.0 - config.ema_decay) * eval.value;
        }
        let grad = eval.optimizer_grad(&hyper);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.push(TraceRow {
            iter: it,
            objective: eval.value,
            smoothed: ema,
            grad_norm,
            theta: theta.to_vec(),
            beta: hyper.to_vec(),
        });
        if ema > best.0 {
            best = (ema, it, params.clone(), constraints.clone(), eval.value, eval.jitter);
        }
        best_history.push(best.0);
        if it >= config.plateau_window {
            let before = best_history[it - config.plateau_window];
            if best.0 - before < config.plateau_tol * before.abs().max(1e-12) {
                reason = ConvergenceReason::Plateau;
                break;
            }
        }
        if it + 1 == config.iterations {
            break;
        }

        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        let next = drawer.draw(it + 1, &problem, theta, &hyper, &mut rng)?;
        let mut accepted = None;
        for h in 0..=config.max_halvings {
            let lr = config.learning_rate / f64::powi(2.0, h as i32);
            let mut trial_adam = adam.clone();
            let mut trial = params.clone();
            trial_adam.step_with_lr(&mut trial, &descent, lr);
            project(&mut trial[..p]);
            for v in &mut trial[p..] {
                *v = v.clamp(LN_HYPER_MIN, LN_HYPER_MAX);
            }
            let (tt, th) = split_params(&trial, p);
            match problem.objective_and_grad(&next.times, tt, &th) {
                Ok(e) if e.is_finite() => {
                    accepted = Some((trial_adam, trial, e));
                    break;
                }
                Ok(_) | Err(Error::IllConditioned { .. }) | Err(Error::Domain(_)) => {
                    halvings += 1;
                    log::debug!("iteration {it}: rejected step at lr {lr:e}");
                }
                Err(e) => return Err(e),
            }
        }
        let Some((a, pr, e)) = accepted else {
            let (tt, th) = split_params(&params, p);
            return Err(Error::IllConditioned { theta: tt.to_vec(), beta: th.to_vec() });
        };
        adam = a;
        params = pr;
        eval = e;
        constraints = next;
    }

    let (best_smoothed, best_iteration, best_params, best_constraints, final_objective, jitter) = best;
    let (theta, hyper) = split_params(&best_params, p);
    let residual = {
        let post = problem.posterior(&best_constraints.times, theta, &hyper)?;
        let (mean, _) = post.predict_op(model.constraint_op(), &best_constraints.times)?;
        (mean.iter().map(|m| m * m).sum::<f64>() / mean.len() as f64).sqrt()
    };
    Ok(EstimationResult {
        system: model.name().to_string(),
        param_names: model.param_names().to_vec(),
        theta: theta.to_vec(),
        hyper,
        sigma_v: config.sigma_v,
        constraints: best_constraints,
        trace,
        diagnostics: Diagnostics {
            iterations,
            reason,
            best_iteration,
            final_objective,
            best_smoothed,
            initial_smoothed,
            jitter,
            lr_halvings: halvings,
            constraint_residual_norm: residual,
            theta_init: theta0,
        },
    })
}
