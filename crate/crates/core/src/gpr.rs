//! Plain single-output GP regression with a squared-exponential kernel.
//!
//! Serves as the fixed-point smoother for the linearizer and as the
//! unconstrained baseline in the predictor.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::kernel::{check_orders, SeKernel};
use crate::linalg::Factor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprHyper {
    pub amplitude: f64,
    pub length_scale: f64,
    pub noise: f64,
}

impl GprHyper {
    pub fn kernel(&self) -> Result<SeKernel> {
        SeKernel::new(self.amplitude, self.length_scale)
    }

    /// Scale heuristic: data spread, twice the median spacing, a tenth of
    /// the spread as noise.
    pub fn median_heuristic(times: &[f64], values: &[f64]) -> Self {
        let sd = std_dev(values).max(1e-3);
        Self { amplitude: sd, length_scale: 2.0 * median_gap(times).max(1e-6), noise: 0.1 * sd }
    }

    fn to_log(self) -> [f64; 3] {
        [self.amplitude.ln(), self.length_scale.ln(), self.noise.ln()]
    }

    fn from_log(p: &[f64]) -> Self {
        Self { amplitude: p[0].exp(), length_scale: p[1].exp(), noise: p[2].exp() }
    }
}

/// A GP conditioned on one component's observations.
pub struct Gpr {
    times: Vec<f64>,
    values: Vec<f64>,
    hyper: GprHyper,
    kernel: SeKernel,
    factor: Factor,
    alpha: Vec<f64>,
}

impl Gpr {
    pub fn condition(times: &[f64], values: &[f64], hyper: GprHyper) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: times.len(), got: values.len() });
        }
        if times.is_empty() {
            return Err(Error::DegenerateInput("no observations to condition on".into()));
        }
        if !(hyper.noise > 0.0 && hyper.noise.is_finite()) {
            return Err(Error::domain("GPR noise must be positive"));
        }
        let kernel = hyper.kernel()?;
        let n = times.len();
        let noise2 = hyper.noise * hyper.noise;
        let k = Mat::from_fn(n, n, |i, j| {
            kernel.eval(times[i], times[j]) + if i == j { noise2 } else { 0.0 }
        });
        let factor = Factor::new(&k).ok_or_else(|| Error::IllConditioned {
            theta: vec![],
            beta: vec![hyper.amplitude, hyper.length_scale, hyper.noise],
        })?;
        let alpha = factor.solve(values);
        Ok(Self { times: times.to_vec(), values: values.to_vec(), hyper, kernel, factor, alpha })
    }

    pub fn hyper(&self) -> GprHyper {
        self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let quad: f64 = self.values.iter().zip(&self.alpha).map(|(y, a)| y * a).sum();
        -0.5 * quad - 0.5 * self.factor.log_det() - 0.5 * self.times.len() as f64 * LN_2PI
    }

    /// Gradient of the log marginal likelihood in (ln a, ln l, ln sigma).
    pub fn lml_log_grad(&self) -> [f64; 3] {
        let n = self.times.len();
        let kinv = self.factor.inverse();
        let mut g = [0.0; 3];
        let (a, l) = (self.kernel.amplitude(), self.kernel.length_scale());
        for i in 0..n {
            for j in 0..=i {
                let w = self.alpha[i] * self.alpha[j] - kinv[(i, j)];
                let w = if i == j { w } else { 2.0 * w };
                let hg = self
                    .kernel
                    .eval_hyper_grad(0, 0, self.times[i], self.times[j])
                    .expect("order 0 is always supported");
                g[0] += w * hg.d_amplitude * a;
                g[1] += w * hg.d_length_scale * l;
                if i == j {
                    g[2] += w * 2.0 * self.hyper.noise * self.hyper.noise;
                }
            }
        }
        g.map(|x| 0.5 * x)
    }

    /// Posterior mean and variance of the `order`-th derivative.
    pub fn predict(&self, query: &[f64], order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        check_orders(order, order)?;
        let n = self.times.len();
        let m = query.len();
        let cross = Mat::from_fn(n, m, |i, q| {
            self.kernel.lag_derivatives(query[q] - self.times[i]).mixed(order, 0)
        });
        let v = self.factor.solve_lower_mat(&cross);
        let prior = self.kernel.lag_derivatives(0.0).mixed(order, order);
        let mut mean = Vec::with_capacity(m);
        let mut var = Vec::with_capacity(m);
        for q in 0..m {
            let mu: f64 = (0..n).map(|i| cross[(i, q)] * self.alpha[i]).sum();
            let reduction: f64 = (0..n).map(|i| v[(i, q)] * v[(i, q)]).sum();
            mean.push(mu);
            var.push((prior - reduction).max(0.0));
        }
        Ok((mean, var))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprFit {
    pub hyper: GprHyper,
    pub log_marginal_likelihood: f64,
    /// True when optimization failed and the median heuristic was used.
    pub fallback: bool,
}

/// Fits hyperparameters by marginal likelihood: a coarse grid over length
/// scale and noise, then Adam refinement in log space from the best cell.
pub fn fit_hyper(times: &[f64], values: &[f64]) -> Result<GprFit> {
    if times.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "GPR smoothing needs at least 3 observations, got {}",
            times.len()
        )));
    }
    let heuristic = GprHyper::median_heuristic(times, values);
    let sd = heuristic.amplitude;
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
    let amplitude = rms.max(sd).max(1e-3);
    let span = times.last().unwrap() - times.first().unwrap();
    let gap = median_gap(times).max(1e-6);

    let eval = |h: GprHyper| -> Option<f64> {
        Gpr::condition(times, values, h).ok().map(|g| g.log_marginal_likelihood()).filter(|v| v.is_finite())
    };

    let mut best: Option<(GprHyper, f64)> = None;
    let n_len = 10;
    for il in 0..n_len {
        let frac = il as f64 / (n_len - 1) as f64;
        let length_scale = (2.0 * gap).max(1e-6) * ((span.max(4.0 * gap)) / (2.0 * gap)).powf(frac);
        for &noise_frac in &[1e-3, 1e-2, 0.1, 0.3] {
            let h = GprHyper { amplitude, length_scale, noise: noise_frac * sd };
            if let Some(v) = eval(h) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((h, v));
                }
            }
        }
    }
    let Some((start, start_lml)) = best else {
        log::warn!("GPR smoother: no grid cell factorized, using median heuristic");
        return Ok(GprFit { hyper: heuristic, log_marginal_likelihood: f64::NAN, fallback: true });
    };

    let mut params = start.to_log();
    let mut adam = Adam::new(3, AdamConfig { learning_rate: 0.05, ..Default::default() });
    let (mut best_h, mut best_v) = (start, start_lml);
    for _ in 0..300 {
        let h = GprHyper::from_log(&params);
        let Ok(gp) = Gpr::condition(times, values, h) else { break };
        let v = gp.log_marginal_likelihood();
        if !v.is_finite() {
            break;
        }
        if v > best_v {
            best_v = v;
            best_h = h;
        }
        let g = gp.lml_log_grad();
        let neg = [-g[0], -g[1], -g[2]];
        adam.step(&mut params, &neg);
        // keep the noise from collapsing below double-precision usefulness
        params[2] = params[2].max((1e-6 * sd).ln());
    }
    Ok(GprFit { hyper: best_h, log_marginal_likelihood: best_v, fallback: false })
}

pub(crate) fn median_gap(times: &[f64]) -> f64 {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len();
    if m % 2 == 1 {
        gaps[m / 2]
    } else {
        0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
    }
}

pub(crate) fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, t_max: f64) -> Vec<f64> {
        (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let t = grid(15, 5.0);
        let y: Vec<f64> = t.iter().map(|t| (0.9 * t).sin() + 0.05 * (7.0 * t).cos()).collect();
        let h0 = GprHyper { amplitude: 0.8, length_scale: 0.9, noise: 0.1 };
        let g = Gpr::condition(&t, &y, h0).unwrap().lml_log_grad();
        let eps = 1e-5;
        for k in 0..3 {
            let mut p = h0.to_log();
            p[k] += eps;
            let up = Gpr::condition(&t, &y, GprHyper::from_log(&p)).unwrap().log_marginal_likelihood();
            p[k] -= 2.0 * eps;
            let dn = Gpr::condition(&t, &y, GprHyper::from_log(&p)).unwrap().log_marginal_likelihood();
            let fd = (up - dn) / (2.0 * eps);
            assert!((g[k] - fd).abs() < 1e-5 * fd.abs().max(1.0), "k={k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn noiseless_data_is_reproduced() {
        let t = grid(40, 10.0);
        let y: Vec<f64> = t.iter().map(|t| t * (-t).exp()).collect();
        let fit = fit_hyper(&t, &y).unwrap();
        let gp = Gpr::condition(&t, &y, fit.hyper).unwrap();
        let (mean, _) = gp.predict(&t, 0).unwrap();
        let max_err = mean.iter().zip(&y).map(|(m, y)| (m - y).abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-3, "max err {max_err}");
    }

    #[test]
    fn constant_data_gives_flat_derivative() {
        let t = grid(25, 10.0);
        let y = vec![2.5; 25];
        let fit = fit_hyper(&t, &y).unwrap();
        let gp = Gpr::condition(&t, &y, fit.hyper).unwrap();
        let q = grid(11, 10.0);
        let (m0, _) = gp.predict(&q, 0).unwrap();
        let (m1, _) = gp.predict(&q, 1).unwrap();
        assert!(m0.iter().all(|m| (m - 2.5).abs() < 1e-2), "{m0:?}");
        assert!(m1.iter().all(|m| m.abs() < 1e-2), "{m1:?}");
    }

    #[test]
    fn needs_three_points() {
        assert!(fit_hyper(&[0.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_gap_of_grid() {
        assert!((median_gap(&grid(11, 10.0)) - 1.0).abs() < 1e-12);
    }
}
