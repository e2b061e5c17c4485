//! Cholesky factorization with escalating diagonal jitter.

use std::sync::Once;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Par, Side};

/// First nonzero jitter, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter tried before giving up.
pub const JITTER_CAP: f64 = 1e-4;

static SEQUENTIAL: Once = Once::new();

/// Pins dense kernels to one thread so results do not depend on the pool size.
pub(crate) fn init() {
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(Par::Seq));
}

pub struct Factor {
    llt: faer::linalg::solvers::Llt<f64>,
    jitter: f64,
}

impl Factor {
    /// Factors `k`, adding `jitter * mean(diag)` on the diagonal when the plain
    /// factorization fails: 0, then 1e-10, 1e-9, ... up to 1e-4.
    ///
    /// Returns `None` when every level fails.
    pub fn new(k: &Mat<f64>) -> Option<Self> {
        init();
        let n = k.nrows();
        if n == 0 {
            return None;
        }
        let mean_diag = (0..n).map(|i| k[(i, i)]).sum::<f64>() / n as f64;
        if !mean_diag.is_finite() || mean_diag <= 0.0 {
            return None;
        }
        let mut level = 0.0;
        loop {
            let attempt = if level == 0.0 {
                k.llt(Side::Lower)
            } else {
                let mut kj = k.clone();
                for i in 0..n {
                    kj[(i, i)] += level * mean_diag;
                }
                kj.llt(Side::Lower)
            };
            if let Ok(llt) = attempt {
                let l = llt.L();
                if (0..n).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0) {
                    return Some(Self { llt, jitter: level * mean_diag });
                }
            }
            level = if level == 0.0 { JITTER_START } else { level * 10.0 };
            if level > JITTER_CAP * (1.0 + 1e-9) {
                return None;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `K^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(
            self.llt.L(),
            rhs.as_mut(),
            Par::Seq,
        );
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    /// `L^{-1} B` for a block of right-hand sides.
    pub fn solve_lower_mat(&self, b: &Mat<f64>) -> Mat<f64> {
        let mut rhs = b.clone();
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(
            self.llt.L(),
            rhs.as_mut(),
            Par::Seq,
        );
        rhs
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_spd_without_jitter() {
        let k = Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.5 });
        let f = Factor::new(&k).unwrap();
        assert_eq!(f.jitter(), 0.0);
        let x = f.solve(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| k[(i, j)] * x[j]).sum();
            assert!((r - (i + 1) as f64).abs() < 1e-12);
        }
        // det = (2-0.5)^2 (2+2*0.5) = 6.75
        assert!((f.log_det() - 6.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn escalates_on_singular_matrix() {
        let k = Mat::from_fn(4, 4, |_, _| 1.0);
        let f = Factor::new(&k).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= JITTER_CAP);
    }

    #[test]
    fn gives_up_on_indefinite_matrix() {
        let k = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 3.0 });
        assert!(Factor::new(&k).is_none());
    }
}
