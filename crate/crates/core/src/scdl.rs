//! Coupled dictionary learning: ADMM over column blocks of the high and low
//! resolution sample matrices, dictionaries updated at the driver from
//! reduced outer products.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dstack::{self, Record};
use crate::engine::{Context, KernelArgs, KernelRegistry, MapSpec};
use crate::error::{shape_err, Error, Result};
use crate::optim::soft_threshold_scalar;
use crate::telemetry::IterationMetrics;
use crate::tensor::{matmul, matmul_nt, matmul_tn, spd_inverse, svd, Tensor};

pub const DEFAULT_MAX_ITER: usize = 100;

/// Eigenvalues of `φ` below this fraction of the largest are numerically null.
pub const NULL_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSteps {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lambda_h: f64,
    pub lambda_l: f64,
}

impl Default for AdmmSteps {
    fn default() -> Self {
        AdmmSteps {
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            lambda_h: 0.1,
            lambda_l: 0.1,
        }
    }
}

impl AdmmSteps {
    fn as_params(&self) -> [f64; 5] {
        [self.c1, self.c2, self.c3, self.lambda_h, self.lambda_l]
    }

    fn from_args(a: &KernelArgs) -> Result<Self> {
        Ok(AdmmSteps {
            c1: a.param(0)?,
            c2: a.param(1)?,
            c3: a.param(2)?,
            lambda_h: a.param(3)?,
            lambda_l: a.param(4)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScdlProblem {
    /// `P × K`.
    pub s_h: Tensor,
    /// `M × K`.
    pub s_l: Tensor,
    pub atoms: usize,
    pub steps: AdmmSteps,
    pub delta: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl ScdlProblem {
    pub fn new(s_h: Tensor, s_l: Tensor, atoms: usize) -> Self {
        ScdlProblem {
            s_h,
            s_l,
            atoms,
            steps: AdmmSteps::default(),
            delta: 1e-6,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
        }
    }

    pub fn samples(&self) -> usize {
        self.s_h.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_h.ndim() != 2 || self.s_l.ndim() != 2 {
            return Err(shape_err!("sample matrices must be 2-D"));
        }
        let k = self.s_h.cols();
        if self.s_l.cols() != k {
            return Err(shape_err!(
                "high and low sample matrices have {} and {} columns",
                k,
                self.s_l.cols()
            ));
        }
        if self.s_h.rows() == 0 || self.s_l.rows() == 0 {
            return Err(shape_err!("empty sample rows"));
        }
        if self.atoms == 0 || self.atoms > k {
            return Err(Error::Config(format!("need 1 <= A <= K, got A = {} and K = {k}", self.atoms)));
        }
        let s = self.steps;
        if [s.c1, s.c2, s.c3, s.lambda_h, s.lambda_l].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("ADMM steps and sparsity weights must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        if !self.s_h.is_finite() || !self.s_l.is_finite() {
            return Err(Error::numeric("non-finite samples"));
        }
        Ok(())
    }
}

/// Scale each column with norm above one back onto the unit sphere. With
/// `all`, every non-zero column is normalized.
fn normalize_columns(x: &Tensor, all: bool) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let mut data = x.to_vec();
    for j in 0..c {
        let norm = (0..r).map(|i| data[i * c + j].powi(2)).sum::<f64>().sqrt();
        if norm > 1.0 || (all && norm > 0.0) {
            for i in 0..r {
                data[i * c + j] /= norm;
            }
        }
    }
    Tensor::new(vec![r, c], data)
}

/// Distinct column indices for the initial dictionaries, ascending.
pub fn sample_indices(k: usize, atoms: usize, seed: u64) -> Result<Vec<usize>> {
    if atoms == 0 || atoms > k {
        return Err(Error::Config(format!("cannot draw {atoms} atoms from {k} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, k, atoms).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn pick_columns(s: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = (s.rows(), s.cols());
    if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
        return Err(shape_err!("column {bad} out of range for {c} columns"));
    }
    Ok(Tensor::from_fn2(r, idx.len(), |i, j| s.data()[i * c + idx[j]]))
}

/// Unit-norm dictionaries built from the same sampled columns of both matrices.
pub fn init_dictionaries(problem: &ScdlProblem) -> Result<(Tensor, Tensor)> {
    let idx = sample_indices(problem.samples(), problem.atoms, problem.seed)?;
    Ok((
        normalize_columns(&pick_columns(&problem.s_h, &idx)?, true)?,
        normalize_columns(&pick_columns(&problem.s_l, &idx)?, true)?,
    ))
}

/// Column block of the ADMM state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScdlBlock {
    pub s_h: Tensor,
    pub s_l: Tensor,
    pub w_h: Tensor,
    pub w_l: Tensor,
    pub p: Tensor,
    pub q: Tensor,
    pub y1: Tensor,
    pub y2: Tensor,
    pub y3: Tensor,
}

impl ScdlBlock {
    /// Zero codes and multipliers for the given sample columns.
    pub fn start(s_h: Tensor, s_l: Tensor, atoms: usize) -> Self {
        let z = Tensor::zeros(&[atoms, s_h.cols()]);
        ScdlBlock {
            s_h,
            s_l,
            w_h: z.clone(),
            w_l: z.clone(),
            p: z.clone(),
            q: z.clone(),
            y1: z.clone(),
            y2: z.clone(),
            y3: z,
        }
    }

    pub fn into_record(self) -> Record {
        vec![self.s_h, self.s_l, self.w_h, self.w_l, self.p, self.q, self.y1, self.y2, self.y3]
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        if r.len() != 9 {
            return Err(shape_err!("SCDL block record has {} slots, expected 9", r.len()));
        }
        Ok(ScdlBlock {
            s_h: r[0].clone(),
            s_l: r[1].clone(),
            w_h: r[2].clone(),
            w_l: r[3].clone(),
            p: r[4].clone(),
            q: r[5].clone(),
            y1: r[6].clone(),
            y2: r[7].clone(),
            y3: r[8].clone(),
        })
    }
}

/// `(2 Xᵀ X + c I)⁻¹`.
pub fn gram_inverse(x: &Tensor, c: f64) -> Result<Tensor> {
    let g = matmul_tn(x, x)?;
    let a = g.rows();
    let shifted = Tensor::from_fn2(a, a, |i, j| 2.0 * g.at(i, j) + if i == j { c } else { 0.0 });
    spd_inverse(&shifted)
}

/// One Gauss-Seidel sweep of the ADMM updates on a block.
pub fn admm_block_update(
    b: &ScdlBlock,
    x_h: &Tensor,
    x_l: &Tensor,
    b_h: &Tensor,
    b_l: &Tensor,
    s: &AdmmSteps,
) -> Result<ScdlBlock> {
    // W_h = B_h (2 X_hᵀ S_h + Y1 - Y3 + c1 P + c3 W_l)
    let rhs = matmul_tn(x_h, &b.s_h)?.scale(2.0).add(&b.y1)?.sub(&b.y3)?.axpy(s.c1, &b.p)?.axpy(s.c3, &b.w_l)?;
    let w_h = matmul(b_h, &rhs)?;
    // W_l = B_l (2 X_lᵀ S_l + Y2 + Y3 + c2 Q + c3 W_h)
    let rhs = matmul_tn(x_l, &b.s_l)?.scale(2.0).add(&b.y2)?.add(&b.y3)?.axpy(s.c2, &b.q)?.axpy(s.c3, &w_h)?;
    let w_l = matmul(b_l, &rhs)?;
    let p = soft_threshold_scalar(&w_h.axpy(-1.0 / s.c1, &b.y1)?, s.lambda_h / s.c1)?;
    let q = soft_threshold_scalar(&w_l.axpy(-1.0 / s.c2, &b.y2)?, s.lambda_l / s.c2)?;
    let y1 = b.y1.axpy(s.c1, &p.sub(&w_h)?)?;
    let y2 = b.y2.axpy(s.c2, &q.sub(&w_l)?)?;
    let y3 = b.y3.axpy(s.c3, &w_h.sub(&w_l)?)?;
    let out = ScdlBlock {
        s_h: b.s_h.clone(),
        s_l: b.s_l.clone(),
        w_h,
        w_l,
        p,
        q,
        y1,
        y2,
        y3,
    };
    if ![&out.w_h, &out.w_l, &out.p, &out.q, &out.y1, &out.y2, &out.y3]
        .iter()
        .all(|t| t.is_finite())
    {
        return Err(Error::numeric("non-finite ADMM state"));
    }
    Ok(out)
}

/// `[S_h W_hᵀ, S_l W_lᵀ, W_h W_hᵀ, W_l W_lᵀ]` of one block.
pub fn outer_products(b: &ScdlBlock) -> Result<Record> {
    Ok(vec![
        matmul_nt(&b.s_h, &b.w_h)?,
        matmul_nt(&b.s_l, &b.w_l)?,
        matmul_nt(&b.w_h, &b.w_h)?,
        matmul_nt(&b.w_l, &b.w_l)?,
    ])
}

/// `X + (SWᵀ - X φ)(φ + δ I)⁻¹`, then columns longer than one are rescaled.
///
/// The inverse is applied through an eigendecomposition of `φ`. Directions
/// with eigenvalues at rounding level are treated as exactly null: the
/// residual `SWᵀ - X φ` vanishes on them, and inverting `δ` there would only
/// amplify rounding noise.
pub fn update_dictionaries(x: &Tensor, swt: &Tensor, phi: &Tensor, delta: f64) -> Result<Tensor> {
    let a = phi.rows();
    if phi.cols() != a || x.cols() != a || swt.dims() != x.dims() {
        return Err(shape_err!(
            "dictionary {:?}, SWᵀ {:?} and φ {:?} disagree",
            x.dims(),
            swt.dims(),
            phi.dims()
        ));
    }
    let eig = svd(phi)?;
    let tol = eig.s.first().copied().unwrap_or(0.0) * NULL_RTOL;
    let gain: Vec<f64> = eig
        .s
        .iter()
        .map(|&s| if s > tol && s + delta > 0.0 { 1.0 / (s + delta) } else { 0.0 })
        .collect();
    let resid = swt.sub(&matmul(x, phi)?)?;
    let proj = matmul(&resid, &eig.v)?;
    let scaled = Tensor::from_fn2(proj.rows(), a, |i, j| proj.at(i, j) * gain[j]);
    let step = matmul_nt(&scaled, &eig.v)?;
    normalize_columns(&x.add(&step)?, false)
}

/// `[‖S_h − X_h W_h‖², ‖S_l − X_l W_l‖², ‖S_h‖², ‖S_l‖², ‖W_h − W_l‖²]` of one block.
pub fn residuals(b: &ScdlBlock, x_h: &Tensor, x_l: &Tensor) -> Result<Record> {
    Ok(vec![Tensor::vector(vec![
        b.s_h.sub(&matmul(x_h, &b.w_h)?)?.norm_sq(),
        b.s_l.sub(&matmul(x_l, &b.w_l)?)?.norm_sq(),
        b.s_h.norm_sq(),
        b.s_l.norm_sq(),
        b.w_h.sub(&b.w_l)?.norm_sq(),
    ])])
}

fn columns_to_matrix(records: &[Record], slot: usize) -> Result<Tensor> {
    let cols: Vec<Tensor> = records.iter().map(|r| r[slot].clone()).collect();
    Tensor::stack(&cols)?.transpose()
}

/// Registers the dictionary learning kernels.
pub fn register_kernels(reg: &mut KernelRegistry) {
    // [s_h, s_l, idx] per sample; broadcast 0 = sorted indices -> [idx, s_h, s_l] for picked samples.
    reg.register_partition("scdl.pick", 1, |records, a| {
        let wanted = &a.broadcast(0)?[0];
        let mut out = Vec::new();
        for r in records {
            let idx = r[2].data()[0];
            if wanted.data().binary_search_by(|v| v.total_cmp(&idx)).is_ok() {
                out.push(vec![r[2].clone(), r[0].clone(), r[1].clone()]);
            }
        }
        Ok(out)
    });
    // Partition of samples -> one zero-initialized block; params A.
    reg.register_partition("scdl.start", 1, |records, a| {
        let atoms = a.param(0)? as usize;
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let s_h = columns_to_matrix(records, 0)?;
        let s_l = columns_to_matrix(records, 1)?;
        Ok(vec![ScdlBlock::start(s_h, s_l, atoms).into_record()])
    });
    // params c1, c2, c3, lambda_h, lambda_l; broadcast 0 = [X_h, X_l, B_h, B_l].
    reg.register_record("scdl.update", 1, |r, a| {
        let d = a.broadcast(0)?;
        if d.len() != 4 {
            return Err(shape_err!("dictionary broadcast has {} slots", d.len()));
        }
        let steps = AdmmSteps::from_args(a)?;
        let b = ScdlBlock::from_record(r)?;
        Ok(admm_block_update(&b, &d[0], &d[1], &d[2], &d[3], &steps)?.into_record())
    });
    reg.register_record("scdl.outer", 1, |r, _| outer_products(&ScdlBlock::from_record(r)?));
    // broadcast 0 = [X_h, X_l].
    reg.register_record("scdl.residual", 1, |r, a| {
        let d = a.broadcast(0)?;
        if d.len() < 2 {
            return Err(shape_err!("dictionary broadcast has {} slots", d.len()));
        }
        residuals(&ScdlBlock::from_record(r)?, &d[0], &d[1])
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub partitions: usize,
    pub telemetry: bool,
    pub keep_iterates: bool,
    pub dump_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new(partitions: usize) -> Self {
        TrainOptions {
            partitions,
            telemetry: true,
            keep_iterates: false,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScdlOutput {
    pub x_h: Tensor,
    pub x_l: Tensor,
    /// `(high, low)` per iteration.
    pub nrmse: Vec<(f64, f64)>,
    /// `‖W_h − W_l‖_F` per iteration.
    pub consensus: Vec<f64>,
    pub metrics: Vec<IterationMetrics>,
    pub iterates: Vec<(Tensor, Tensor)>,
    pub telemetry_ms: f64,
}

fn dump_state(opts: &TrainOptions, x_h: &Tensor, x_l: &Tensor) {
    if let Some(dir) = &opts.dump_dir {
        let res = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| dstack::write_file(dir.join("state_dump_xh.dstack"), x_h))
            .and_then(|_| dstack::write_file(dir.join("state_dump_xl.dstack"), x_l));
        if let Err(e) = res {
            log::warn!("could not dump state: {e}");
        }
    }
}

/// Run the distributed dictionary learning loop on `ctx`.
pub fn train(ctx: &mut Context, problem: &ScdlProblem, opts: &TrainOptions) -> Result<ScdlOutput> {
    problem.validate()?;
    let k = problem.samples();
    let parts = opts.partitions;
    let sh_ds = ctx.parallelize(&problem.s_h.transpose()?, parts)?;
    let sl_ds = ctx.parallelize(&problem.s_l.transpose()?, parts)?;
    let idx_ds = ctx.parallelize(&Tensor::vector((0..k).map(|i| i as f64).collect()), parts)?;
    let bundle = ctx.zip(&[sh_ds, sl_ds, idx_ds])?;

    // Initial dictionaries from sampled columns gathered over the cluster.
    let wanted = sample_indices(k, problem.atoms, problem.seed)?;
    let wanted_id = ctx.broadcast(vec![Tensor::vector(wanted.iter().map(|&i| i as f64).collect())])?;
    let picked_ds = ctx.map(bundle, MapSpec::new("scdl.pick").broadcasts(&[wanted_id]))?;
    let mut picked = ctx.collect(picked_ds)?;
    ctx.release(wanted_id)?;
    picked.sort_by(|a, b| a[0].data()[0].total_cmp(&b[0].data()[0]));
    let mut x_h = normalize_columns(&columns_to_matrix(&picked, 1)?, true)?;
    let mut x_l = normalize_columns(&columns_to_matrix(&picked, 2)?, true)?;

    let mut state = ctx.map(bundle, MapSpec::new("scdl.start").params(&[problem.atoms as f64]))?;
    info!(
        "learning {} atoms from {k} samples ({}x{} high, {} low rows), N = {parts}",
        problem.atoms,
        problem.s_h.rows(),
        k,
        problem.s_l.rows()
    );
    let mut out = ScdlOutput {
        x_h: x_h.clone(),
        x_l: x_l.clone(),
        nrmse: Vec::new(),
        consensus: Vec::new(),
        metrics: Vec::new(),
        iterates: Vec::new(),
        telemetry_ms: 0.0,
    };
    let s = problem.steps;
    for iter in 1..=problem.max_iter {
        let started = Instant::now();
        let b_h = gram_inverse(&x_h, s.c1 + s.c3)?;
        let b_l = gram_inverse(&x_l, s.c2 + s.c3)?;
        let dict = ctx.broadcast(vec![x_h.clone(), x_l.clone(), b_h, b_l])?;
        let next = ctx.map(state, MapSpec::new("scdl.update").params(&s.as_params()).broadcasts(&[dict]))?;
        let outer = ctx
            .reduce(next, MapSpec::new("scdl.outer"), "sum")
            .map_err(|e| e.at_iteration(iter))?;
        if outer.len() != 4 {
            return Err(Error::Job(format!("outer products reduced to {} slots", outer.len())));
        }
        x_h = update_dictionaries(&x_h, &outer[0], &outer[2], problem.delta).map_err(|e| e.at_iteration(iter))?;
        x_l = update_dictionaries(&x_l, &outer[1], &outer[3], problem.delta).map_err(|e| e.at_iteration(iter))?;
        let updated = ctx.broadcast(vec![x_h.clone(), x_l.clone()])?;
        let res = ctx
            .reduce(next, MapSpec::new("scdl.residual").broadcasts(&[updated]), "sum")
            .map_err(|e| e.at_iteration(iter))?;
        ctx.checkpoint(next)?;
        ctx.retain(&[next])?;
        ctx.release(dict)?;
        ctx.release(updated)?;
        state = next;

        let r = res.first().map(|t| t.to_vec()).unwrap_or_default();
        if r.len() != 5 {
            return Err(Error::Job("residual reduce returned the wrong shape".into()));
        }
        let (nh, nl) = ((r[0] / r[2]).sqrt(), (r[1] / r[3]).sqrt());
        if !nh.is_finite() || !nl.is_finite() || !x_h.is_finite() || !x_l.is_finite() {
            dump_state(opts, &x_h, &x_l);
            return Err(Error::numeric_at(format!("NRMSE became ({nh}, {nl})"), iter));
        }
        out.nrmse.push((nh, nl));
        out.consensus.push(r[4].sqrt());
        if opts.keep_iterates {
            out.iterates.push((x_h.clone(), x_l.clone()));
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        if opts.telemetry {
            let t = Instant::now();
            let workers = ctx.worker_stats()?;
            out.metrics.push(IterationMetrics {
                iter,
                wall_ms,
                cost: 0.5 * (nh + nl),
                workers,
            });
            out.telemetry_ms += t.elapsed().as_secs_f64() * 1e3;
        }
        debug!("iteration {iter}: NRMSE high {nh:.4e}, low {nl:.4e}");
    }
    out.x_h = x_h;
    out.x_l = x_l;
    Ok(out)
}
