//! Object-wise deconvolution of an image stack with a per-object PSF, under a
//! weighted starlet sparsity prior or a stack-wide nuclear-norm prior, solved
//! by primal-dual iterations over a partitioned bundle.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::dstack::{self, Record};
use crate::engine::{Context, Dataset, KernelArgs, KernelRegistry, MapSpec};
use crate::error::{shape_err, Error, Result};
use crate::optim::{
    self, condat_iterate, power_method_norm, primal_step, ConvergenceMonitor, PrimalDualParams,
    SplitProblem, POWER_ITERS,
};
use crate::starlet;
use crate::telemetry::IterationMetrics;
use crate::tensor::{convolve2d_same, correlate2d_same, matmul, matmul_tn, Tensor};

pub const DEFAULT_KAPPA: f64 = 3.0;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_EPS: f64 = 1e-4;
/// Default nuclear weight as a fraction of the top singular value of `Hᵀ(Y)`.
pub const LAMBDA_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    Sparse,
    LowRank,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Known(Vec<f64>),
    /// Per image, from the finest starlet scale.
    Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvProblem {
    /// `n × h × w`.
    pub y: Tensor,
    /// `n × p × p`, unit sum, `p` odd.
    pub psf: Tensor,
    pub noise: NoiseSpec,
    pub prior: Prior,
    /// Nuclear weight; `None` picks the default.
    pub lambda: Option<f64>,
    pub scales: usize,
    pub kappa: f64,
    pub reweight_rounds: usize,
}

impl DeconvProblem {
    pub fn new(y: Tensor, psf: Tensor, noise: NoiseSpec, prior: Prior) -> Self {
        DeconvProblem {
            y,
            psf,
            noise,
            prior,
            lambda: None,
            scales: starlet::DEFAULT_SCALES,
            kappa: DEFAULT_KAPPA,
            reweight_rounds: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.y.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.y.dims()[1], self.y.dims()[2])
    }

    pub fn validate(&self) -> Result<()> {
        let (n, h, w) = match self.y.dims() {
            &[n, h, w] => (n, h, w),
            d => return Err(shape_err!("observations must be n x h x w, got {d:?}")),
        };
        if n == 0 {
            return Err(Error::Config("empty observation stack".into()));
        }
        match self.psf.dims() {
            &[m, p, q] if m == n && p == q && p % 2 == 1 && p <= h.min(w) => {}
            d => {
                return Err(shape_err!(
                    "PSF stack {d:?} must be {n} x p x p with odd p <= {}",
                    h.min(w)
                ))
            }
        }
        for i in 0..n {
            let s = self.psf.record(i)?.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("PSF {i} sums to {s}, expected 1")));
            }
        }
        if let NoiseSpec::Known(s) = &self.noise {
            if s.len() != n {
                return Err(shape_err!("{} noise levels for {n} images", s.len()));
            }
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("kappa {} must be non-negative", self.kappa)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lambda {l} must be finite and non-negative")));
            }
        }
        if self.prior == Prior::Sparse {
            starlet::check_scales(h, w, self.scales)?;
        }
        if !self.y.is_finite() || !self.psf.is_finite() {
            return Err(Error::numeric("non-finite input stack"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub partitions: usize,
    pub max_iter: usize,
    pub eps: f64,
    /// Collect worker counters after each iteration.
    pub telemetry: bool,
    /// Keep the primal stack of every iteration.
    pub keep_iterates: bool,
    /// Where to write the primal stack if the cost stops being finite.
    pub dump_dir: Option<PathBuf>,
}

impl SolveOptions {
    pub fn new(partitions: usize) -> Self {
        SolveOptions {
            partitions,
            max_iter: DEFAULT_MAX_ITER,
            eps: DEFAULT_EPS,
            telemetry: true,
            keep_iterates: false,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeconvOutput {
    pub xp: Tensor,
    /// One entry per iteration over all reweighting rounds.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    /// Whether the last round stopped on the relative cost change.
    pub converged: bool,
    pub params: PrimalDualParams,
    pub beta: f64,
    pub l_norm: f64,
    pub lambda: Option<f64>,
    pub sigma: Vec<f64>,
    pub metrics: Vec<IterationMetrics>,
    pub iterates: Vec<Tensor>,
    /// Wall time spent gathering telemetry.
    pub telemetry_ms: f64,
}

fn check_pair(x: &Tensor, psf: &Tensor) -> Result<usize> {
    match (x.dims(), psf.dims()) {
        (&[n, _, _], &[m, _, _]) if n == m => Ok(n),
        (a, b) => Err(shape_err!("stack {a:?} and PSF stack {b:?} do not pair up")),
    }
}

/// Convolve each image with its PSF.
pub fn apply_h(x: &Tensor, psf: &Tensor) -> Result<Tensor> {
    let n = check_pair(x, psf)?;
    let out: Vec<Tensor> = (0..n)
        .map(|i| convolve2d_same(&x.record(i)?, &psf.record(i)?))
        .collect::<Result<_>>()?;
    Tensor::stack(&out)
}

/// Adjoint of [`apply_h`].
pub fn apply_ht(y: &Tensor, psf: &Tensor) -> Result<Tensor> {
    let n = check_pair(y, psf)?;
    let out: Vec<Tensor> = (0..n)
        .map(|i| correlate2d_same(&y.record(i)?, &psf.record(i)?))
        .collect::<Result<_>>()?;
    Tensor::stack(&out)
}

fn centered_delta(h: usize, w: usize) -> Tensor {
    let mut d = Tensor::zeros(&[h, w]).to_vec();
    d[(h / 2) * w + w / 2] = 1.0;
    Tensor::new(vec![h, w], d).expect("delta dims")
}

/// Per-scale ℓ2 norm of `Φ Hᵀ δ` for one PSF on an `h × w` grid.
pub fn propagated_noise_norms(psf: &Tensor, h: usize, w: usize, scales: usize) -> Result<Vec<f64>> {
    let impulse = correlate2d_same(&centered_delta(h, w), psf)?;
    let d = starlet::forward_details(&impulse, scales)?;
    (0..scales).map(|s| Ok(d.record(s)?.norm_fro())).collect()
}

/// Thresholds of one object expanded to `scales × h × w`.
pub fn object_weights(psf: &Tensor, sigma: f64, h: usize, w: usize, scales: usize, kappa: f64) -> Result<Tensor> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::Domain(format!("noise level {sigma} is negative")));
    }
    let norms = propagated_noise_norms(psf, h, w, scales)?;
    let mut data = Vec::with_capacity(scales * h * w);
    for n in norms {
        data.extend(std::iter::repeat_n(kappa * sigma * n, h * w));
    }
    Tensor::new(vec![scales, h, w], data)
}

/// `n × scales × h × w` threshold stack.
pub fn compute_weights(psf: &Tensor, sigma: &[f64], h: usize, w: usize, scales: usize, kappa: f64) -> Result<Tensor> {
    if psf.ndim() != 3 || psf.dims()[0] != sigma.len() {
        return Err(shape_err!("{} noise levels for PSF stack {:?}", sigma.len(), psf.dims()));
    }
    let items: Vec<Tensor> = sigma
        .iter()
        .enumerate()
        .map(|(i, &s)| object_weights(&psf.record(i)?, s, h, w, scales, kappa))
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise level from the median absolute deviation of the finest starlet
/// scale, divided by that scale's white-noise gain.
pub fn estimate_sigma(image: &Tensor) -> Result<f64> {
    let (h, w) = (image.rows(), image.cols());
    let fine = starlet::forward_details(image, 1)?;
    let med = median(fine.to_vec());
    let mad = median(fine.data().iter().map(|v| (v - med).abs()).collect());
    let gain = starlet::detail_filter_norms(h, w, 1)?[0];
    Ok(mad / 0.6745 / gain)
}

/// Reweighted thresholds `W0 / (1 + |Φ x| / (W0 / kappa))`; zero thresholds stay zero.
pub fn reweight_object(w0: &Tensor, xp: &Tensor, kappa: f64, scales: usize) -> Result<Tensor> {
    let coeffs = starlet::forward_details(xp, scales)?;
    w0.zip_map(&coeffs, |w, c| {
        if w == 0.0 || kappa == 0.0 {
            w
        } else {
            w / (1.0 + c.abs() * kappa / w)
        }
    })
}

/// Weighted starlet sparsity problem of one object.
pub struct SparseObject<'a> {
    pub y: &'a Tensor,
    pub psf: &'a Tensor,
    pub weights: &'a Tensor,
    pub scales: usize,
}

impl SparseObject<'_> {
    pub fn fidelity(&self, x: &Tensor) -> Result<f64> {
        Ok(0.5 * convolve2d_same(x, self.psf)?.sub(self.y)?.norm_sq())
    }

    pub fn cost(&self, x: &Tensor) -> Result<f64> {
        let coeffs = starlet::forward_details(x, self.scales)?;
        let penalty: f64 = coeffs
            .data()
            .iter()
            .zip(self.weights.data())
            .map(|(c, w)| (w * c).abs())
            .sum();
        Ok(self.fidelity(x)? + penalty)
    }
}

impl SplitProblem for SparseObject<'_> {
    fn grad_f(&self, x: &Tensor) -> Result<Tensor> {
        let r = convolve2d_same(x, self.psf)?.sub(self.y)?;
        correlate2d_same(&r, self.psf)
    }

    fn prox_g(&self, x: &Tensor, _tau: f64) -> Result<Tensor> {
        Ok(optim::project_nonneg(x))
    }

    fn apply_l(&self, x: &Tensor) -> Result<Tensor> {
        starlet::forward_details(x, self.scales)
    }

    fn apply_l_adjoint(&self, u: &Tensor) -> Result<Tensor> {
        starlet::adjoint_details(u)
    }

    fn prox_h(&self, v: &Tensor, gamma: f64) -> Result<Tensor> {
        optim::soft_threshold(v, &self.weights.scale(gamma))
    }
}

/// Data term of one object under the nuclear prior; `L` is the identity and
/// the prox of the nuclear norm acts on the whole stack at the driver.
pub struct LowRankObject<'a> {
    pub y: &'a Tensor,
    pub psf: &'a Tensor,
}

impl SplitProblem for LowRankObject<'_> {
    fn grad_f(&self, x: &Tensor) -> Result<Tensor> {
        let r = convolve2d_same(x, self.psf)?.sub(self.y)?;
        correlate2d_same(&r, self.psf)
    }

    fn prox_g(&self, x: &Tensor, _tau: f64) -> Result<Tensor> {
        Ok(optim::project_nonneg(x))
    }

    fn apply_l(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn apply_l_adjoint(&self, u: &Tensor) -> Result<Tensor> {
        Ok(u.clone())
    }

    fn prox_h(&self, _v: &Tensor, _gamma: f64) -> Result<Tensor> {
        Err(Error::Config("the nuclear prox needs the whole stack".into()))
    }
}

/// `prox_{sigma h*}` for `h = lambda ‖·‖_*` on an `n × (h·w)` matrix.
pub fn nuclear_conj_prox(v: &Tensor, sigma: f64, lambda: f64) -> Result<Tensor> {
    let (shrunk, _) = optim::svd_soft_threshold(&v.scale(1.0 / sigma), lambda / sigma)?;
    v.axpy(-sigma, &shrunk)
}

/// Sparse objective over whole stacks.
pub fn sparse_cost(y: &Tensor, psf: &Tensor, weights: &Tensor, xp: &Tensor, scales: usize) -> Result<f64> {
    let n = check_pair(y, psf)?;
    let mut total = 0.0;
    for i in 0..n {
        let (yi, pi, wi) = (y.record(i)?, psf.record(i)?, weights.record(i)?);
        total += SparseObject {
            y: &yi,
            psf: &pi,
            weights: &wi,
            scales,
        }
        .cost(&xp.record(i)?)?;
    }
    Ok(total)
}

fn as_matrix(stack: &Tensor) -> Result<Tensor> {
    let n = stack.dims()[0];
    stack.reshape(vec![n, stack.len() / n])
}

/// Nuclear-prior objective over whole stacks.
pub fn lowrank_cost(y: &Tensor, psf: &Tensor, xp: &Tensor, lambda: f64) -> Result<f64> {
    let fid = 0.5 * apply_h(xp, psf)?.sub(y)?.norm_sq();
    Ok(fid + lambda * optim::nuclear_norm(&as_matrix(xp)?)?)
}

/// Largest singular value of a stack viewed as an `n × (h·w)` matrix.
pub fn stack_spectral_norm(stack: &Tensor) -> Result<f64> {
    let m = as_matrix(stack)?;
    let est = power_method_norm(
        |x| matmul(&m, &x.reshape(vec![m.cols(), 1])?),
        |y| matmul_tn(&m, y),
        &[m.cols(), 1],
        POWER_ITERS * 4,
        1e-9,
    )?;
    Ok(est.value)
}

/// `‖Φ‖` of the details-only starlet map on an `h × w` grid.
pub fn starlet_norm(h: usize, w: usize, scales: usize) -> Result<f64> {
    // The top of the frame spectrum is tightly clustered, so the default
    // power budget stops short; this runs once per solve.
    Ok(power_method_norm(
        |x| starlet::forward_details(x, scales),
        starlet::adjoint_details,
        &[h, w],
        5000,
        1e-9,
    )?
    .value)
}

/// Lipschitz constant of the data-term gradient: `‖H_i‖ ≤ ‖PSF_i‖₁`, so the
/// largest PSF ℓ1 norm squared bounds every `‖H_iᵀ H_i‖`.
pub fn lipschitz_bound(psf: &Tensor) -> Result<f64> {
    let n = psf.dims()[0];
    let mut beta: f64 = 0.0;
    for i in 0..n {
        beta = beta.max(psf.record(i)?.norm_l1().powi(2));
    }
    Ok(beta)
}

fn scalar(r: &Record, what: &str) -> Result<f64> {
    match r.first() {
        Some(t) if t.len() == 1 => Ok(t.data()[0]),
        None => Ok(0.0),
        _ => Err(Error::Job(format!("{what}: expected a scalar"))),
    }
}

fn usize_param(a: &KernelArgs, i: usize) -> Result<usize> {
    let v = a.param(i)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Config(format!("parameter {i} = {v} is not a count")));
    }
    Ok(v as usize)
}

fn arity(r: &Record, k: usize, kernel: &str) -> Result<()> {
    if r.len() != k {
        return Err(shape_err!("{kernel} expects {k}-tuples, got {}", r.len()));
    }
    Ok(())
}

fn params_from(a: &KernelArgs) -> Result<PrimalDualParams> {
    Ok(PrimalDualParams {
        tau: a.param(0)?,
        sigma: a.param(1)?,
        rho: a.param(2)?,
        max_iter: 0,
        eps: 0.0,
    })
}

/// Registers the deconvolution kernels.
pub fn register_kernels(reg: &mut KernelRegistry) {
    // [PSF, sigma] -> [W]; params kappa, scales, h, w.
    reg.register_record("deconv.weights", 1, |r, a| {
        arity(r, 2, "deconv.weights")?;
        let (kappa, scales) = (a.param(0)?, usize_param(a, 1)?);
        let (h, w) = (usize_param(a, 2)?, usize_param(a, 3)?);
        Ok(vec![object_weights(&r[0], r[1].data()[0], h, w, scales, kappa)?])
    });
    // [Y] -> [sigma].
    reg.register_record("deconv.noise_mad", 1, |r, _| Ok(vec![Tensor::scalar(estimate_sigma(&r[0])?)]));
    // [Y, PSF] -> [Hᵀ Y].
    reg.register_record("deconv.adjoint", 1, |r, _| {
        arity(r, 2, "deconv.adjoint")?;
        Ok(vec![correlate2d_same(&r[0], &r[1])?])
    });
    // [Y, PSF, W, Xp, Xd]; params tau, sigma, rho, scales.
    reg.register_record("deconv.sparse_step", 1, |r, a| {
        arity(r, 5, "deconv.sparse_step")?;
        let obj = SparseObject {
            y: &r[0],
            psf: &r[1],
            weights: &r[2],
            scales: usize_param(a, 3)?,
        };
        let (xp, xd) = condat_iterate(&obj, &r[3], &r[4], &params_from(a)?)?;
        Ok(vec![r[0].clone(), r[1].clone(), r[2].clone(), xp, xd])
    });
    // [Y, PSF, W, Xp, Xd] -> [cost]; params scales.
    reg.register_record("deconv.sparse_cost", 1, |r, a| {
        arity(r, 5, "deconv.sparse_cost")?;
        let obj = SparseObject {
            y: &r[0],
            psf: &r[1],
            weights: &r[2],
            scales: usize_param(a, 0)?,
        };
        Ok(vec![Tensor::scalar(obj.cost(&r[3])?)])
    });
    // [W0, Y, PSF, W, Xp, Xd] -> [Y, PSF, W', Xp, Xd]; params kappa, scales.
    reg.register_record("deconv.reweight", 1, |r, a| {
        arity(r, 6, "deconv.reweight")?;
        let w = reweight_object(&r[0], &r[4], a.param(0)?, usize_param(a, 1)?)?;
        Ok(vec![r[1].clone(), r[2].clone(), w, r[4].clone(), r[5].clone()])
    });
    // [Y, PSF, Xp, Xd] -> [Y, PSF, Xp, Xd, Xp~, V]; params tau, sigma, rho.
    reg.register_record("deconv.lowrank_primal", 1, |r, a| {
        arity(r, 4, "deconv.lowrank_primal")?;
        let obj = LowRankObject { y: &r[0], psf: &r[1] };
        let params = params_from(a)?;
        let xt = primal_step(&obj, &r[2], &r[3], &params)?;
        if !xt.is_finite() {
            return Err(Error::numeric("non-finite primal update"));
        }
        let v = optim::dual_argument(&obj, &r[2], &xt, &r[3], &params)?;
        let mut out = r.clone();
        out.extend([xt, v]);
        Ok(out)
    });
    // [Y, PSF, Xp, Xd, Xp~, V, Xd~] -> [Y, PSF, Xp', Xd']; params rho.
    reg.register_record("deconv.lowrank_relax", 1, |r, a| {
        arity(r, 7, "deconv.lowrank_relax")?;
        let rho = a.param(0)?;
        Ok(vec![
            r[0].clone(),
            r[1].clone(),
            optim::relax(&r[4], &r[2], rho)?,
            optim::relax(&r[6], &r[3], rho)?,
        ])
    });
    // [Y, PSF, Xp, ..] -> [½‖Y − H Xp‖²].
    reg.register_record("deconv.fidelity", 1, |r, _| {
        if r.len() < 3 {
            return Err(shape_err!("deconv.fidelity needs at least 3 slots"));
        }
        let res = convolve2d_same(&r[2], &r[1])?.sub(&r[0])?;
        Ok(vec![Tensor::scalar(0.5 * res.norm_sq())])
    });
}

fn stack_slot(parts: &[Vec<Record>], slot: usize) -> Result<Tensor> {
    let items: Vec<Tensor> = parts
        .iter()
        .flatten()
        .map(|r| {
            r.get(slot)
                .cloned()
                .ok_or_else(|| shape_err!("record has no slot {slot}"))
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

fn dump_state(opts: &SolveOptions, xp: Option<&Tensor>) {
    if let (Some(dir), Some(xp)) = (&opts.dump_dir, xp) {
        let path = dir.join("state_dump_xp.dstack");
        match std::fs::create_dir_all(dir).map_err(Error::from).and_then(|_| dstack::write_file(&path, xp)) {
            Ok(()) => info!("state dumped to {}", path.display()),
            Err(e) => log::warn!("could not dump state: {e}"),
        }
    }
}

struct Loop<'a> {
    ctx: &'a mut Context,
    opts: &'a SolveOptions,
    out: DeconvOutput,
    last_xp: Option<Tensor>,
}

impl Loop<'_> {
    fn observe(&mut self, started: Instant, cost: f64, xp_slot: usize, parts: &[Vec<Record>]) -> Result<()> {
        let iter = self.out.cost_history.len() + 1;
        let xp = stack_slot(parts, xp_slot)?;
        if !cost.is_finite() {
            dump_state(self.opts, Some(&xp));
            return Err(Error::numeric_at(format!("cost became {cost}"), iter));
        }
        if self.opts.keep_iterates {
            self.out.iterates.push(xp.clone());
        }
        self.last_xp = Some(xp);
        self.out.cost_history.push(cost);
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        if self.opts.telemetry {
            let t = Instant::now();
            let workers = self.ctx.worker_stats()?;
            self.out.metrics.push(IterationMetrics {
                iter,
                wall_ms,
                cost,
                workers,
            });
            self.out.telemetry_ms += t.elapsed().as_secs_f64() * 1e3;
        }
        debug!("iteration {iter}: cost {cost:.6e}");
        Ok(())
    }
}

fn zeros_stack(n: usize, inner: &[usize]) -> Tensor {
    let mut dims = vec![n];
    dims.extend_from_slice(inner);
    Tensor::zeros(&dims)
}

/// Run the distributed solver on `ctx`. The primal and dual variables start at zero.
pub fn solve(ctx: &mut Context, problem: &DeconvProblem, opts: &SolveOptions) -> Result<DeconvOutput> {
    problem.validate()?;
    if opts.max_iter > 0 && !(opts.eps > 0.0) {
        return Err(Error::Config("eps must be positive".into()));
    }
    let n = problem.len();
    let (h, w) = problem.image_dims();
    let parts = opts.partitions;
    let y_ds = ctx.parallelize(&problem.y, parts)?;
    let psf_ds = ctx.parallelize(&problem.psf, parts)?;

    let sigma: Vec<f64> = match &problem.noise {
        NoiseSpec::Known(s) => s.clone(),
        NoiseSpec::Estimate if problem.prior == Prior::Sparse => {
            let est = ctx.map(y_ds, MapSpec::new("deconv.noise_mad"))?;
            ctx.collect(est)?
                .iter()
                .map(|r| scalar(r, "noise estimate"))
                .collect::<Result<_>>()?
        }
        NoiseSpec::Estimate => Vec::new(),
    };
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("noise level {s} is negative")));
    }

    let beta = lipschitz_bound(&problem.psf)?;
    let (l_norm, lambda) = match problem.prior {
        Prior::Sparse => (starlet_norm(h, w, problem.scales)?, None),
        Prior::LowRank => {
            let lambda = match problem.lambda {
                Some(l) => l,
                None => {
                    let pair = ctx.zip(&[y_ds, psf_ds])?;
                    let adj = ctx.map(pair, MapSpec::new("deconv.adjoint"))?;
                    let gathered = stack_slot(&[ctx.collect(adj)?], 0)?;
                    LAMBDA_FRACTION * stack_spectral_norm(&gathered)?
                }
            };
            (1.0, Some(lambda))
        }
    };
    let params = PrimalDualParams::from_bounds(beta, l_norm, opts.max_iter, opts.eps.max(f64::MIN_POSITIVE));
    params.validate(beta, l_norm)?;
    info!(
        "deconvolving {n} images of {h}x{w} ({:?} prior, N = {parts}): tau {:.4}, beta {beta:.4}, |L| {l_norm:.4}",
        problem.prior, params.tau
    );

    let xp_ds = ctx.parallelize(&zeros_stack(n, &[h, w]), parts)?;
    let mut lp = Loop {
        ctx,
        opts,
        out: DeconvOutput {
            xp: zeros_stack(n, &[h, w]),
            cost_history: Vec::new(),
            iterations: 0,
            converged: false,
            params,
            beta,
            l_norm,
            lambda,
            sigma: sigma.clone(),
            metrics: Vec::new(),
            iterates: Vec::new(),
            telemetry_ms: 0.0,
        },
        last_xp: None,
    };
    match problem.prior {
        Prior::Sparse => {
            let sigma_ds = lp.ctx.parallelize(&Tensor::vector(sigma), parts)?;
            let pair = lp.ctx.zip(&[psf_ds, sigma_ds])?;
            let w0 = lp.ctx.map(
                pair,
                MapSpec::new("deconv.weights").params(&[problem.kappa, problem.scales as f64, h as f64, w as f64]),
            )?;
            let xd_ds = lp.ctx.parallelize(&zeros_stack(n, &[problem.scales, h, w]), parts)?;
            let mut cur = lp.ctx.zip(&[y_ds, psf_ds, w0, xp_ds, xd_ds])?;
            for round in 0..=problem.reweight_rounds {
                if round > 0 {
                    let joined = lp.ctx.zip(&[w0, cur])?;
                    cur = lp.ctx.map(
                        joined,
                        MapSpec::new("deconv.reweight").params(&[problem.kappa, problem.scales as f64]),
                    )?;
                }
                cur = sparse_round(&mut lp, cur, w0, problem.scales)?;
            }
        }
        Prior::LowRank => {
            let xd_ds = lp.ctx.parallelize(&zeros_stack(n, &[h, w]), parts)?;
            let cur = lp.ctx.zip(&[y_ds, psf_ds, xp_ds, xd_ds])?;
            lowrank_loop(&mut lp, cur, n, lambda.unwrap_or(0.0))?;
        }
    }
    let mut out = lp.out;
    if let Some(xp) = lp.last_xp {
        out.xp = xp;
    }
    out.iterations = out.cost_history.len();
    Ok(out)
}

fn sparse_round(lp: &mut Loop, mut cur: Dataset, w0: Dataset, scales: usize) -> Result<Dataset> {
    let p = lp.out.params;
    let mut monitor = ConvergenceMonitor::new(p.eps);
    lp.out.converged = false;
    for _ in 0..p.max_iter {
        let started = Instant::now();
        let iter = lp.out.cost_history.len() + 1;
        let next = lp.ctx.map(
            cur,
            MapSpec::new("deconv.sparse_step").params(&[p.tau, p.sigma, p.rho, scales as f64]),
        )?;
        let cost = lp
            .ctx
            .reduce(next, MapSpec::new("deconv.sparse_cost").params(&[scales as f64]), "sum")
            .map_err(|e| e.at_iteration(iter))?;
        let cost = scalar(&cost, "cost")?;
        let parts = lp.ctx.checkpoint(next)?;
        lp.ctx.retain(&[next, w0])?;
        cur = next;
        lp.observe(started, cost, 3, &parts)?;
        if monitor.observe(cost) {
            lp.out.converged = true;
            break;
        }
    }
    Ok(cur)
}

fn lowrank_loop(lp: &mut Loop, mut cur: Dataset, n: usize, lambda: f64) -> Result<()> {
    let p = lp.out.params;
    let mut monitor = ConvergenceMonitor::new(p.eps);
    for _ in 0..p.max_iter {
        let started = Instant::now();
        let iter = lp.out.cost_history.len() + 1;
        let prim = lp.ctx.map(
            cur,
            MapSpec::new("deconv.lowrank_primal").params(&[p.tau, p.sigma, p.rho]),
        )?;
        let v_ds = lp.ctx.unbundle(prim, 5)?;
        let v = stack_slot(&[lp.ctx.collect(v_ds).map_err(|e| e.at_iteration(iter))?], 0)?;
        let dims = v.dims().to_vec();
        let xd = nuclear_conj_prox(&as_matrix(&v)?, p.sigma, lambda)?.reshape(dims)?;
        let xd_ds = lp.ctx.parallelize(&xd, cur.num_partitions)?;
        let joined = lp.ctx.zip(&[prim, xd_ds])?;
        let next = lp.ctx.map(
            joined,
            MapSpec::new("deconv.lowrank_relax").params(&[p.rho]),
        )?;
        let fid = lp
            .ctx
            .reduce(next, MapSpec::new("deconv.fidelity"), "sum")
            .map_err(|e| e.at_iteration(iter))?;
        let parts = lp.ctx.checkpoint(next)?;
        lp.ctx.retain(&[next])?;
        cur = next;
        let xp = stack_slot(&parts, 2)?;
        debug_assert_eq!(xp.dims()[0], n);
        let cost = scalar(&fid, "fidelity")? + lambda * optim::nuclear_norm(&as_matrix(&xp)?)?;
        lp.observe(started, cost, 2, &parts)?;
        if monitor.observe(cost) {
            lp.out.converged = true;
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn delta_psf_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_stack(&mut rng, &[3, 8, 8]);
        let mut d = vec![0.0; 9];
        d[4] = 1.0;
        let one = Tensor::new(vec![3, 3], d).unwrap();
        let psf = Tensor::stack(&[one.clone(), one.clone(), one]).unwrap();
        assert_eq!(apply_h(&x, &psf).unwrap(), x);
        assert_eq!(apply_ht(&x, &psf).unwrap(), x);
        let z = Tensor::zeros(&[3, 8, 8]);
        assert_eq!(apply_h(&z, &psf).unwrap(), z);
    }

    #[test]
    fn apply_h_adjoint_dot_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_stack(&mut rng, &[4, 12, 10]);
        let y = random_stack(&mut rng, &[4, 12, 10]);
        let psf = random_stack(&mut rng, &[4, 5, 5]);
        for i in 0..4 {
            let (xi, yi, pi) = (x.record(i).unwrap(), y.record(i).unwrap(), psf.record(i).unwrap());
            let lhs = convolve2d_same(&xi, &pi).unwrap().dot(&yi).unwrap();
            let rhs = xi.dot(&correlate2d_same(&yi, &pi).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
        assert!(apply_h(&x, &psf.record(0).unwrap()).is_err());
    }

    fn delta(p: usize) -> Tensor {
        let mut d = vec![0.0; p * p];
        d[(p / 2) * p + p / 2] = 1.0;
        Tensor::new(vec![p, p], d).unwrap()
    }

    #[test]
    fn weights_cases() {
        // Delta PSF: thresholds are kappa sigma times the detail filter norms.
        let w = object_weights(&delta(3), 1.0, 16, 16, 2, 3.0).unwrap();
        let norms = starlet::detail_filter_norms(16, 16, 2).unwrap();
        for s in 0..2 {
            let plane = w.record(s).unwrap();
            assert!(plane.data().iter().all(|&v| (v - 3.0 * norms[s]).abs() <= 1e-15));
        }
        let zero = object_weights(&delta(3), 0.0, 16, 16, 2, 3.0).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psf = random_stack(&mut rng, &[1, 5, 5]).record(0).unwrap().map(f64::abs);
        let a = object_weights(&psf, 0.2, 16, 16, 3, 3.0).unwrap();
        let b = object_weights(&psf, 0.4, 16, 16, 3, 3.0).unwrap();
        assert!(b.max_abs_diff(&a.scale(2.0)).unwrap() <= 1e-15);
        assert!(matches!(object_weights(&psf, -0.1, 16, 16, 3, 3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn weights_norm_matches_direct_oracle() {
        // Explicit Φ Hᵀ δ for a non-symmetric PSF.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psf = random_stack(&mut rng, &[1, 5, 5]).record(0).unwrap().map(f64::abs);
        let (h, w) = (16, 16);
        let mut d = vec![0.0; h * w];
        d[8 * w + 8] = 1.0;
        let imp = correlate2d_same(&Tensor::new(vec![h, w], d).unwrap(), &psf).unwrap();
        let coeffs = starlet::decompose(&imp, 3).unwrap();
        let weights = object_weights(&psf, 0.5, h, w, 3, 3.0).unwrap();
        for s in 0..3 {
            let expect = 1.5 * coeffs.details[s].norm_fro();
            assert!((weights.record(s).unwrap().data()[0] - expect).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_state_costs_half_data_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_stack(&mut rng, &[3, 8, 8]);
        let psf = Tensor::stack(&[delta(3), delta(3), delta(3)]).unwrap();
        let w = compute_weights(&psf, &[0.1, 0.2, 0.3], 8, 8, 2, 3.0).unwrap();
        let x0 = Tensor::zeros(&[3, 8, 8]);
        let half = 0.5 * y.norm_sq();
        assert!((sparse_cost(&y, &psf, &w, &x0, 2).unwrap() - half).abs() <= 1e-12 * half);
        assert!((lowrank_cost(&y, &psf, &x0, 0.7).unwrap() - half).abs() <= 1e-12 * half);
    }

    #[test]
    fn reweight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w0 = compute_weights(&Tensor::stack(&[delta(3)]).unwrap(), &[0.1], 16, 16, 2, 3.0)
            .unwrap()
            .record(0)
            .unwrap();
        assert_eq!(reweight_object(&w0, &Tensor::zeros(&[16, 16]), 3.0, 2).unwrap(), w0);
        let x = random_stack(&mut rng, &[16, 16]);
        let small = reweight_object(&w0, &x, 3.0, 2).unwrap();
        let smaller = reweight_object(&w0, &x.scale(100.0), 3.0, 2).unwrap();
        for ((a, b), c) in w0.data().iter().zip(small.data()).zip(smaller.data()) {
            assert!(b <= a && c <= b);
        }
        assert!(smaller.sum() < 0.05 * w0.sum());
    }

    #[test]
    fn sigma_estimate_tracks_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::Normal::new(0.0, 0.3).unwrap();
        let img = Tensor::new(vec![64, 64], (0..4096).map(|_| rng.sample(normal)).collect()).unwrap();
        let s = estimate_sigma(&img).unwrap();
        assert!((s / 0.3 - 1.0).abs() < 0.05, "{s}");
    }

    #[test]
    fn nuclear_conj_prox_is_moreau_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_stack(&mut rng, &[5, 12]);
        let (sigma, lambda) = (0.7, 0.4);
        let (p, _) = optim::svd_soft_threshold(&v.scale(1.0 / sigma), lambda / sigma).unwrap();
        let q = nuclear_conj_prox(&v, sigma, lambda).unwrap();
        // v = prox_{σh*}(v) + σ prox_{h/σ}(v/σ)
        assert!(q.axpy(sigma, &p).unwrap().max_abs_diff(&v).unwrap() <= 1e-12);
        // The dual of a nuclear norm lives in the spectral-norm ball of radius λ.
        assert!(stack_spectral_norm(&q.reshape(vec![5, 12, 1]).unwrap()).unwrap() <= lambda + 1e-9);
    }

    #[test]
    fn lipschitz_bound_dominates_operator_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psf = random_stack(&mut rng, &[1, 5, 5]).map(f64::abs);
        let p0 = psf.record(0).unwrap();
        let est = power_method_norm(
            |x| convolve2d_same(x, &p0),
            |y| correlate2d_same(y, &p0),
            &[12, 12],
            200,
            1e-10,
        )
        .unwrap();
        assert!(est.value.powi(2) <= lipschitz_bound(&psf).unwrap() + 1e-12);
    }
}
