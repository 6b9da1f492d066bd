//! Proximal operators and the primal-dual splitting iteration shared by
//! both deconvolution priors.
//!
//! The iteration solves `min_x f(x) + g(x) + h(L x)` with `f` smooth
//! (gradient Lipschitz constant `beta`), `g` and `h` proximable:
//!
//! ```text
//! x~ = prox_{tau g}(x - tau grad_f(x) - tau Lᵀ u)
//! u~ = prox_{sigma h*}(u + sigma L(2 x~ - x))
//! (x, u) <- rho (x~, u~) + (1 - rho) (x, u)
//! ```
//!
//! Convergence needs `tau (beta / 2 + sigma ‖L‖²) <= 1`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

/// Above this size the nuclear-norm prox switches from Jacobi SVD to an
/// eigendecomposition of the smaller Gram matrix.
pub const GRAM_ROUTE_MIN_DIM: usize = 64;

/// `sign(x) · max(|x| - t, 0)` with a per-element or scalar threshold.
pub fn soft_threshold(x: &Tensor, threshold: &Tensor) -> Result<Tensor> {
    if threshold.data().iter().any(|&t| t < 0.0 || t.is_nan()) {
        return Err(Error::Domain("negative soft threshold".into()));
    }
    if threshold.len() == 1 {
        return soft_threshold_scalar(x, threshold.data()[0]);
    }
    if threshold.len() != x.len() {
        return Err(shape_err!(
            "threshold {:?} does not broadcast to {:?}",
            threshold.dims(),
            x.dims()
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(threshold.data())
        .map(|(&v, &t)| shrink(v, t))
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

pub fn soft_threshold_scalar(x: &Tensor, t: f64) -> Result<Tensor> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Domain(format!("negative soft threshold {t}")));
    }
    Ok(x.map(|v| shrink(v, t)))
}

#[inline]
fn shrink(v: f64, t: f64) -> f64 {
    let m = v.abs() - t;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

pub fn project_nonneg(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Singular value soft thresholding, the prox of `lambda ‖·‖_*`. Returns the
/// shrunk matrix and its nuclear norm.
pub fn svd_soft_threshold(m: &Tensor, lambda: f64) -> Result<(Tensor, f64)> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::Domain(format!("negative nuclear threshold {lambda}")));
    }
    let (r, c) = match m.dims() {
        &[r, c] => (r, c),
        d => return Err(shape_err!("svd_soft_threshold expects a matrix, got {d:?}")),
    };
    if !m.is_finite() {
        return Err(Error::numeric("svd_soft_threshold input is not finite"));
    }
    if r.min(c) <= GRAM_ROUTE_MIN_DIM {
        let dec = tensor::svd(m)?;
        let shrunk: Vec<f64> = dec.s.iter().map(|&s| (s - lambda).max(0.0)).collect();
        let nuclear = shrunk.iter().sum();
        let k = shrunk.len();
        let us = Tensor::from_fn2(r, k, |i, j| dec.u.at(i, j) * shrunk[j]);
        return Ok((tensor::matmul_nt(&us, &dec.v)?, nuclear));
    }
    gram_soft_threshold(m, r, c, lambda)
}

fn to_dmatrix(m: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Result<Tensor> {
    let (r, c) = m.shape();
    Ok(Tensor::from_fn2(r, c, |i, j| m[(i, j)]))
}

/// Shrinkage through the eigenvectors of the smaller Gram matrix. Components
/// whose singular value falls below `lambda` are discarded, so the loss of
/// precision in tiny singular values does not reach the result.
fn gram_soft_threshold(m: &Tensor, r: usize, c: usize, lambda: f64) -> Result<(Tensor, f64)> {
    let a = to_dmatrix(m);
    let cols_side = c <= r;
    let gram = if cols_side {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let eig = SymmetricEigen::new(gram);
    let mut keep = Vec::new();
    let mut nuclear = 0.0;
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        if s > lambda {
            keep.push((idx, (s - lambda) / s));
            nuclear += s - lambda;
        }
    }
    let d = if cols_side { c } else { r };
    let mut basis = DMatrix::<f64>::zeros(d, keep.len());
    let mut scaled = DMatrix::<f64>::zeros(d, keep.len());
    for (k, &(idx, f)) in keep.iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        basis.set_column(k, &col);
        scaled.set_column(k, &(col * f));
    }
    let out = if cols_side {
        (&a * scaled) * basis.transpose()
    } else {
        basis * (scaled.transpose() * &a)
    };
    Ok((from_dmatrix(&out)?, nuclear))
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Tensor) -> Result<f64> {
    let (r, c) = match m.dims() {
        &[r, c] => (r, c),
        d => return Err(shape_err!("nuclear_norm expects a matrix, got {d:?}")),
    };
    if !m.is_finite() {
        return Err(Error::numeric("nuclear_norm input is not finite"));
    }
    if r.min(c) <= GRAM_ROUTE_MIN_DIM {
        return Ok(tensor::svd(m)?.s.iter().sum());
    }
    let a = to_dmatrix(m);
    let gram = if c <= r {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    Ok(gram
        .symmetric_eigenvalues()
        .iter()
        .map(|&ev| ev.max(0.0).sqrt())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    /// False when the iteration budget ran out before the relative change
    /// dropped below the tolerance; `value` is then the best estimate.
    pub converged: bool,
}

pub const POWER_ITERS: usize = 50;
pub const POWER_TOL: f64 = 1e-6;
const POWER_SEED: u64 = 0x5eed_0f_9043;

/// Spectral norm of a linear map by power iteration on `Aᵀ A`.
pub fn power_method_norm<F, G>(
    apply: F,
    apply_adjoint: G,
    probe_dims: &[usize],
    iters: usize,
    tol: f64,
) -> Result<NormEstimate>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let n: usize = probe_dims.iter().product();
    let probe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = Tensor::new(probe_dims.to_vec(), probe)?;
    x = x.scale(1.0 / x.norm_fro());
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let ax = apply(&x)?;
        let next_estimate = ax.norm_fro();
        let y = apply_adjoint(&ax)?;
        let ny = y.norm_fro();
        if ny == 0.0 {
            return Ok(NormEstimate {
                value: 0.0,
                converged: true,
            });
        }
        if !ny.is_finite() {
            return Err(Error::numeric("power iteration diverged"));
        }
        let done = (next_estimate - estimate).abs() <= tol * next_estimate;
        estimate = next_estimate;
        x = y.scale(1.0 / ny);
        if done {
            return Ok(NormEstimate {
                value: estimate,
                converged: true,
            });
        }
    }
    log::warn!("power iteration stopped after {iters} iterations without converging");
    Ok(NormEstimate {
        value: estimate,
        converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalDualParams {
    pub tau: f64,
    pub sigma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub eps: f64,
}

impl PrimalDualParams {
    /// `sigma = 1`, `rho = 1`, `tau = 0.9 / (beta / 2 + sigma ‖L‖²)`.
    pub fn from_bounds(beta: f64, l_norm: f64, max_iter: usize, eps: f64) -> Self {
        let sigma = 1.0;
        PrimalDualParams {
            tau: 0.9 / (beta / 2.0 + sigma * l_norm * l_norm),
            sigma,
            rho: 1.0,
            max_iter,
            eps,
        }
    }

    pub fn validate(&self, beta: f64, l_norm: f64) -> Result<()> {
        if !(self.tau > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config("tau and sigma must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 2.0) {
            return Err(Error::Config(format!("rho {} outside (0, 2)", self.rho)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        let lhs = self.tau * self.sigma * l_norm * l_norm + self.tau * beta / 2.0;
        if lhs > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "step sizes violate tau*sigma*|L|^2 + tau*beta/2 <= 1 (got {lhs})"
            )));
        }
        Ok(())
    }
}

/// The pieces of `f + g + h∘L` needed by [`condat_iterate`].
pub trait SplitProblem {
    fn grad_f(&self, x: &Tensor) -> Result<Tensor>;
    /// `prox_{tau g}`.
    fn prox_g(&self, x: &Tensor, tau: f64) -> Result<Tensor>;
    fn apply_l(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_l_adjoint(&self, u: &Tensor) -> Result<Tensor>;
    /// `prox_{gamma h}`.
    fn prox_h(&self, v: &Tensor, gamma: f64) -> Result<Tensor>;

    /// `prox_{sigma h*}` through the Moreau identity.
    fn prox_h_conj(&self, u: &Tensor, sigma: f64) -> Result<Tensor> {
        let inner = self.prox_h(&u.scale(1.0 / sigma), 1.0 / sigma)?;
        u.axpy(-sigma, &inner)
    }
}

/// Primal half-step: returns `x~`.
pub fn primal_step<P: SplitProblem + ?Sized>(
    problem: &P,
    xp: &Tensor,
    xd: &Tensor,
    params: &PrimalDualParams,
) -> Result<Tensor> {
    let grad = problem.grad_f(xp)?;
    let lt = problem.apply_l_adjoint(xd)?;
    let tau = params.tau;
    let arg = xp.zip_map(&grad, |x, g| x - tau * g)?.axpy(-tau, &lt)?;
    problem.prox_g(&arg, tau)
}

/// Dual argument `u + sigma L(2 x~ - x)` before the conjugate prox.
pub fn dual_argument<P: SplitProblem + ?Sized>(
    problem: &P,
    xp: &Tensor,
    xp_tilde: &Tensor,
    xd: &Tensor,
    params: &PrimalDualParams,
) -> Result<Tensor> {
    let extrapolated = xp_tilde.zip_map(xp, |a, b| 2.0 * a - b)?;
    xd.axpy(params.sigma, &problem.apply_l(&extrapolated)?)
}

/// `rho * new + (1 - rho) * old`.
pub fn relax(new: &Tensor, old: &Tensor, rho: f64) -> Result<Tensor> {
    if rho == 1.0 {
        return Ok(new.clone());
    }
    new.zip_map(old, |a, b| rho * a + (1.0 - rho) * b)
}

/// One primal-dual iteration. Errors if any intermediate is non-finite.
pub fn condat_iterate<P: SplitProblem + ?Sized>(
    problem: &P,
    xp: &Tensor,
    xd: &Tensor,
    params: &PrimalDualParams,
) -> Result<(Tensor, Tensor)> {
    let xp_tilde = primal_step(problem, xp, xd, params)?;
    if !xp_tilde.is_finite() {
        return Err(Error::numeric("non-finite primal update"));
    }
    let arg = dual_argument(problem, xp, &xp_tilde, xd, params)?;
    let xd_tilde = problem.prox_h_conj(&arg, params.sigma)?;
    if !xd_tilde.is_finite() {
        return Err(Error::numeric("non-finite dual update"));
    }
    Ok((
        relax(&xp_tilde, xp, params.rho)?,
        relax(&xd_tilde, xd, params.rho)?,
    ))
}

pub const CONVERGENCE_WINDOW: usize = 5;

/// Stops once the relative cost change stays below `eps` for
/// [`CONVERGENCE_WINDOW`] consecutive iterations.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    eps: f64,
    previous: Option<f64>,
    streak: usize,
}

impl ConvergenceMonitor {
    pub fn new(eps: f64) -> Self {
        ConvergenceMonitor {
            eps,
            previous: None,
            streak: 0,
        }
    }

    /// Feed the cost of the latest iteration; true when converged.
    pub fn observe(&mut self, cost: f64) -> bool {
        if let Some(prev) = self.previous {
            let rel = (cost - prev).abs() / prev.abs().max(1e-30);
            if rel < self.eps {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.previous = Some(cost);
        self.streak >= CONVERGENCE_WINDOW
    }
}
