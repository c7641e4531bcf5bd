use nalgebra::{DMatrix, DVector, DVectorView, SymmetricEigen};

use crate::{Error, Result};

pub const MAX_SWEEPS: usize = 1000;
pub const SWEEP_TOL: f64 = 1e-9;
/// Relative eigenvalue below which a support Gram matrix counts as singular.
const NULL_TOL: f64 = 1e-10;
/// Sweeps before an oversized support is shrunk explicitly; coordinate
/// descent usually sheds the extra atoms on its own well before this.
const REDUCE_AFTER: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub code: DVector<f64>,
    pub sweeps: usize,
    /// False when the sweep budget ran out; `code` is then the last (lowest-objective) iterate.
    pub converged: bool,
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `min_f ||D f - x||² + lambda ||f||_1` with the
/// Gram matrix cached so many right-hand sides share the work.
#[derive(Debug, Clone)]
pub struct LassoSolver {
    gram: DMatrix<f64>,
    dim: usize,
    lambda: f64,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl LassoSolver {
    pub fn new(atoms: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Validation(format!("lasso lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            gram: atoms.tr_mul(atoms),
            dim: atoms.nrows(),
            lambda,
            max_sweeps: MAX_SWEEPS,
            tol: SWEEP_TOL,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn solve(&self, atoms: &DMatrix<f64>, x: DVectorView<'_, f64>) -> LassoSolution {
        self.solve_projected(atoms.tr_mul(&x), None)
    }

    /// Solves given `D^T x`, optionally warm-started. Each coordinate step is
    /// an exact minimization, so a warm start never increases the objective.
    pub fn solve_projected(&self, dtx: DVector<f64>, warm: Option<DVector<f64>>) -> LassoSolution {
        let m = self.gram.ncols();
        let half = self.lambda / 2.0;
        let (mut f, mut q) = match warm {
            Some(f) if f.iter().any(|v| *v != 0.0) => {
                let q = &dtx - &self.gram * &f;
                (f, q)
            }
            _ => {
                if dtx.amax() <= half {
                    return LassoSolution {
                        code: DVector::zeros(m),
                        sweeps: 0,
                        converged: true,
                    };
                }
                (DVector::zeros(m), dtx.clone())
            }
        };
        // q = D^T (x - D f). After every sweep that moved, the support is
        // polished (see `polish`) or, failing that, swept on its own until it
        // settles. Convergence is only declared after a full sweep.
        let mut sweeps = 0;
        let mut active: Vec<usize> = Vec::with_capacity(m);
        let mut full = true;
        while sweeps < self.max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            let mut step = |j: usize, f: &mut DVector<f64>, q: &mut DVector<f64>| {
                let gjj = self.gram[(j, j)];
                if gjj <= 0.0 {
                    return;
                }
                let rho = q[j] + gjj * f[j];
                let next = soft_threshold(rho, half) / gjj;
                let delta = next - f[j];
                if delta != 0.0 {
                    q.axpy(-delta, &self.gram.column(j), 1.0);
                    f[j] = next;
                    max_change = max_change.max(delta.abs());
                }
            };
            if full {
                (0..m).for_each(|j| step(j, &mut f, &mut q));
            } else {
                active.iter().for_each(|&j| step(j, &mut f, &mut q));
            }
            let settled = max_change <= self.tol;
            if settled && full {
                return LassoSolution {
                    code: f,
                    sweeps,
                    converged: true,
                };
            }
            active.clear();
            active.extend((0..m).filter(|&j| f[j] != 0.0));
            if self.polish(&active, &dtx, &mut f, &mut q, sweeps >= REDUCE_AFTER) {
                full = true;
                continue;
            }
            full = settled;
        }
        LassoSolution {
            code: f,
            sweeps: self.max_sweeps,
            converged: false,
        }
    }

    /// Feature-sign refinement of the support `active`: minimize the smooth
    /// quadratic obtained by freezing the current signs; if a coordinate would
    /// change sign, stop at its zero crossing, drop it and repeat. The
    /// objective decreases along every such segment.
    ///
    /// A support whose atoms are linearly dependent is first shrunk (when
    /// `reduce` is set, or always if it has at most `dim` atoms) by moving
    /// along a null direction of those atoms, which leaves `D f` unchanged and
    /// cannot raise the l1 term, until one coordinate reaches zero.
    fn polish(
        &self,
        active: &[usize],
        dtx: &DVector<f64>,
        f: &mut DVector<f64>,
        q: &mut DVector<f64>,
        reduce: bool,
    ) -> bool {
        let half = self.lambda / 2.0;
        let mut support = active.to_vec();
        let mut moved = false;
        while !support.is_empty() {
            let k = support.len();
            let sub = DMatrix::from_fn(k, k, |a, b| self.gram[(support[a], support[b])]);
            let signs: Vec<f64> = support.iter().map(|&j| f[j].signum()).collect();
            let chol = if k <= self.dim { sub.clone().cholesky() } else { None };
            let (direction, full_step) = match chol {
                Some(chol) => {
                    let rhs = DVector::from_fn(k, |a, _| dtx[support[a]] - half * signs[a]);
                    let target = chol.solve(&rhs);
                    if target.iter().any(|v| !v.is_finite()) {
                        break;
                    }
                    (DVector::from_fn(k, |a, _| target[a] - f[support[a]]), true)
                }
                None if k > self.dim && !reduce => break,
                None => {
                    let eig = SymmetricEigen::new(sub);
                    let (low, &value) = eig
                        .eigenvalues
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.total_cmp(b.1))
                        .expect("support is non-empty");
                    if k <= self.dim && value > NULL_TOL * eig.eigenvalues.amax() {
                        break;
                    }
                    let mut v = eig.eigenvectors.column(low).into_owned();
                    if v.iter().zip(&signs).map(|(a, b)| a * b).sum::<f64>() > 0.0 {
                        v.neg_mut();
                    }
                    (v, false)
                }
            };
            // first zero crossing along f + t * direction
            let mut t = if full_step { 1.0 } else { f64::INFINITY };
            let mut hit = None;
            for (a, &j) in support.iter().enumerate() {
                if direction[a] * signs[a] < 0.0 {
                    let ta = -f[j] / direction[a];
                    if ta < t {
                        t = ta;
                        hit = Some(a);
                    }
                }
            }
            if !t.is_finite() {
                break;
            }
            for (a, &j) in support.iter().enumerate() {
                f[j] += t * direction[a];
            }
            moved = true;
            match hit {
                Some(a) => {
                    f[support[a]] = 0.0;
                    support.remove(a);
                }
                None => break,
            }
        }
        if moved {
            q.copy_from(dtx);
            for (j, &v) in f.iter().enumerate() {
                if v != 0.0 {
                    q.axpy(-v, &self.gram.column(j), 1.0);
                }
            }
        }
        moved
    }
}

pub fn lasso_objective(atoms: &DMatrix<f64>, x: &DVector<f64>, f: &DVector<f64>, lambda: f64) -> f64 {
    (atoms * f - x).norm_squared() + lambda * f.lp_norm(1)
}

/// Largest violation of the LASSO optimality conditions, evaluated directly from `D`.
pub fn lasso_kkt_residual(atoms: &DMatrix<f64>, x: &DVector<f64>, f: &DVector<f64>, lambda: f64) -> f64 {
    let grad = atoms.tr_mul(&(atoms * f - x)) * 2.0;
    grad.iter()
        .zip(f.iter())
        .map(|(&g, &fj)| {
            if fj == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g + lambda * fj.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}
