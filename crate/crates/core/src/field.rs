//! Right-hand sides `dx/dt = f(x; theta)` of the example systems, with the
//! analytic Jacobians the linearizer and the RK4 reference need.

/// An autonomous vector field with analytic first derivatives.
///
/// All matrices are written row-major into caller buffers.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn n_params(&self) -> usize;

    fn rhs(&self, x: &[f64], theta: &[f64], out: &mut [f64]);

    /// `d f_i / d x_j`, `dim x dim`.
    fn state_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]);

    /// `d f_i / d theta_k`, `dim x n_params`.
    fn param_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]);

    /// `d^2 f_i / (d x_j d theta_k)`, laid out `[i][j][k]`.
    fn state_jacobian_param_grad(&self, x: &[f64], theta: &[f64], out: &mut [f64]);
}

/// `x1 -> x2 -> x3` reaction chain, `dx/dt = A x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearChainField;

impl VectorField for LinearChainField {
    fn dim(&self) -> usize {
        3
    }

    fn n_params(&self) -> usize {
        2
    }

    fn rhs(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (t1, t2) = (theta[0], theta[1]);
        out[0] = -t1 * x[0];
        out[1] = t1 * x[0] - t2 * x[1];
        out[2] = t2 * x[1];
    }

    fn state_jacobian(&self, _x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (t1, t2) = (theta[0], theta[1]);
        out.copy_from_slice(&[-t1, 0.0, 0.0, t1, -t2, 0.0, 0.0, t2, 0.0]);
    }

    fn param_jacobian(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[-x[0], 0.0, x[0], -x[1], 0.0, x[1]]);
    }

    fn state_jacobian_param_grad(&self, _x: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        // [i][j][k] with stride 3*2 per row i, 2 per column j.
        out[0] = -1.0; // d(-t1)/dt1
        out[6] = 1.0; // (1,0): t1
        out[6 + 2 + 1] = -1.0; // (1,1): -t2
        out[12 + 2 + 1] = 1.0; // (2,1): t2
    }
}

/// `u' = w`, `w' = theta (1 - u^2) w - u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct VanDerPolField;

impl VectorField for VanDerPolField {
    fn dim(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        1
    }

    fn rhs(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (u, w) = (x[0], x[1]);
        out[0] = w;
        out[1] = theta[0] * (1.0 - u * u) * w - u;
    }

    fn state_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (u, w, th) = (x[0], x[1], theta[0]);
        out.copy_from_slice(&[0.0, 1.0, -2.0 * th * u * w - 1.0, th * (1.0 - u * u)]);
    }

    fn param_jacobian(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        let (u, w) = (x[0], x[1]);
        out.copy_from_slice(&[0.0, (1.0 - u * u) * w]);
    }

    fn state_jacobian_param_grad(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        let (u, w) = (x[0], x[1]);
        out.copy_from_slice(&[0.0, 0.0, -2.0 * u * w, 1.0 - u * u]);
    }
}

/// `x1' = th3 (x1 - x1^3/3 + x2)`, `x2' = -(x1 - th1 + th2 x2) / th3`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitzHughNagumoField;

impl VectorField for FitzHughNagumoField {
    fn dim(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        3
    }

    fn rhs(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        out[0] = c * (x1 - x1 * x1 * x1 / 3.0 + x2);
        out[1] = -(x1 - a + b * x2) / c;
    }

    fn state_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let x1 = x[0];
        let (b, c) = (theta[1], theta[2]);
        out.copy_from_slice(&[c * (1.0 - x1 * x1), c, -1.0 / c, -b / c]);
    }

    fn param_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        out.copy_from_slice(&[
            0.0,
            0.0,
            x1 - x1 * x1 * x1 / 3.0 + x2,
            1.0 / c,
            -x2 / c,
            (x1 - a + b * x2) / (c * c),
        ]);
    }

    fn state_jacobian_param_grad(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let x1 = x[0];
        let (b, c) = (theta[1], theta[2]);
        out.fill(0.0);
        // (0,0): c (1 - x1^2)
        out[2] = 1.0 - x1 * x1;
        // (0,1): c
        out[3 + 2] = 1.0;
        // (1,0): -1/c
        out[6 + 2] = 1.0 / (c * c);
        // (1,1): -b/c
        out[9 + 1] = -1.0 / c;
        out[9 + 2] = b / (c * c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_field<F: VectorField>(f: &F, x: &[f64], theta: &[f64]) {
        let (d, p) = (f.dim(), f.n_params());
        let h = 1e-6;
        let mut jac = vec![0.0; d * d];
        let mut pj = vec![0.0; d * p];
        let mut jp = vec![0.0; d * d * p];
        f.state_jacobian(x, theta, &mut jac);
        f.param_jacobian(x, theta, &mut pj);
        f.state_jacobian_param_grad(x, theta, &mut jp);
        let eval = |x: &[f64], th: &[f64]| {
            let mut o = vec![0.0; d];
            f.rhs(x, th, &mut o);
            o
        };
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (eval(&xp, theta), eval(&xm, theta));
            for i in 0..d {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((jac[i * d + j] - fd).abs() < 1e-6, "jac ({i},{j})");
            }
        }
        for k in 0..p {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += h;
            tm[k] -= h;
            let (fp, fm) = (eval(x, &tp), eval(x, &tm));
            let mut jp_p = vec![0.0; d * d];
            let mut jp_m = vec![0.0; d * d];
            f.state_jacobian(x, &tp, &mut jp_p);
            f.state_jacobian(x, &tm, &mut jp_m);
            for i in 0..d {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((pj[i * p + k] - fd).abs() < 1e-6, "param jac ({i},{k})");
                for j in 0..d {
                    let fd = (jp_p[i * d + j] - jp_m[i * d + j]) / (2.0 * h);
                    assert!((jp[(i * d + j) * p + k] - fd).abs() < 1e-6, "mixed ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        check_field(&LinearChainField, &[0.4, 0.3, 0.3], &[1.2, 0.7]);
        check_field(&VanDerPolField, &[1.7, -0.4], &[0.5]);
        check_field(&FitzHughNagumoField, &[-0.8, 1.1], &[0.2, 0.2, 3.0]);
    }
}
