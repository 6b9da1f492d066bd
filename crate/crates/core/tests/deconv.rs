use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackbundle::datagen::{gen_galaxy_stack, GalaxyStackSpec};
use stackbundle::deconv::{
    self, apply_h, compute_weights, solve, DeconvProblem, NoiseSpec, Prior, SolveOptions,
};
use stackbundle::engine::{Context, LocalConfig, MapSpec};
use stackbundle::optim::PrimalDualParams;
use stackbundle::tensor::{convolve2d_same, correlate2d_same, svd};
use stackbundle::{starlet, Tensor};

fn ctx(workers: usize) -> Context {
    Context::local(LocalConfig::new(workers, 1), Arc::new(stackbundle::solver_registry())).unwrap()
}

fn galaxies(n: usize, size: usize, sigma: f64, seed: u64) -> stackbundle::datagen::GalaxyStack {
    gen_galaxy_stack(&GalaxyStackSpec {
        n_images: n,
        stamp_size: size,
        psf_size: Some(5),
        n_unique_psfs: 16,
        noise_sigma: vec![sigma],
        seed,
    })
    .unwrap()
}

/// Straight-line primal-dual iterations, one image at a time.
fn sequential_sparse(
    y: &Tensor,
    psf: &Tensor,
    weights: &Tensor,
    scales: usize,
    p: &PrimalDualParams,
    iters: usize,
) -> Vec<Tensor> {
    let n = y.dims()[0];
    let (h, w) = (y.dims()[1], y.dims()[2]);
    let mut xp: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(&[h, w])).collect();
    let mut xd: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(&[scales, h, w])).collect();
    let mut out = Vec::new();
    for _ in 0..iters {
        for i in 0..n {
            let (yi, pi, wi) = (y.record(i).unwrap(), psf.record(i).unwrap(), weights.record(i).unwrap());
            let resid = convolve2d_same(&xp[i], &pi).unwrap().sub(&yi).unwrap();
            let grad = correlate2d_same(&resid, &pi).unwrap();
            let back = starlet::adjoint_details(&xd[i]).unwrap();
            let xt: Vec<f64> = (0..h * w)
                .map(|k| (xp[i].data()[k] - p.tau * grad.data()[k] - p.tau * back.data()[k]).max(0.0))
                .collect();
            let xt = Tensor::new(vec![h, w], xt).unwrap();
            let ext = Tensor::new(
                vec![h, w],
                (0..h * w).map(|k| 2.0 * xt.data()[k] - xp[i].data()[k]).collect(),
            )
            .unwrap();
            let phi = starlet::forward_details(&ext, scales).unwrap();
            let xdt: Vec<f64> = (0..scales * h * w)
                .map(|k| {
                    let u = xd[i].data()[k] + p.sigma * phi.data()[k];
                    // u - σ soft(u/σ, W/σ) is the clip of u to [-W, W].
                    u.clamp(-wi.data()[k], wi.data()[k])
                })
                .collect();
            xp[i] = xt;
            xd[i] = Tensor::new(vec![scales, h, w], xdt).unwrap();
        }
        out.push(Tensor::stack(&xp).unwrap());
    }
    out
}

#[test]
fn distributed_matches_sequential_reference() {
    let g = galaxies(64, 16, 0.02, 1);
    let mut c = ctx(4);
    let problem = DeconvProblem::new(g.y.clone(), g.psf.clone(), NoiseSpec::Known(g.sigma.clone()), Prior::Sparse);
    let mut opts = SolveOptions::new(8);
    opts.max_iter = 10;
    opts.eps = 1e-300;
    opts.keep_iterates = true;
    let out = solve(&mut c, &problem, &opts).unwrap();
    assert_eq!(out.iterates.len(), 10);
    let weights = compute_weights(&g.psf, &g.sigma, 16, 16, 3, 3.0).unwrap();
    let reference = sequential_sparse(&g.y, &g.psf, &weights, 3, &out.params, 10);
    for (it, (a, b)) in out.iterates.iter().zip(&reference).enumerate() {
        let d = a.max_abs_diff(b).unwrap();
        assert!(d <= 1e-12, "iteration {}: {d}", it + 1);
    }
}

#[test]
fn distributed_cost_matches_sequential_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = galaxies(12, 16, 0.05, 2);
    let xp = Tensor::new(vec![12, 16, 16], (0..12 * 256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let xd = Tensor::zeros(&[12, 3, 16, 16]);
    let weights = compute_weights(&g.psf, &g.sigma, 16, 16, 3, 3.0).unwrap();
    let mut c = ctx(3);
    let ds: Vec<_> = [&g.y, &g.psf, &weights, &xp, &xd]
        .iter()
        .map(|t| c.parallelize(t, 5).unwrap())
        .collect();
    let bundle = c.zip(&ds).unwrap();
    let got = c
        .reduce(bundle, MapSpec::new("deconv.sparse_cost").params(&[3.0]), "sum")
        .unwrap()[0]
        .data()[0];
    let expect = deconv::sparse_cost(&g.y, &g.psf, &weights, &xp, 3).unwrap();
    assert!((got - expect).abs() <= 1e-12 * expect.abs());
}

fn delta_psfs(n: usize, p: usize) -> Tensor {
    let mut d = vec![0.0; p * p];
    d[(p / 2) * p + p / 2] = 1.0;
    let one = Tensor::new(vec![p, p], d).unwrap();
    Tensor::stack(&vec![one; n]).unwrap()
}

#[test]
fn noiseless_delta_problem_is_inverted_exactly() {
    let g = galaxies(16, 16, 0.0, 3);
    let mut problem = DeconvProblem::new(g.y.clone(), delta_psfs(16, 5), NoiseSpec::Known(vec![0.0; 16]), Prior::Sparse);
    problem.kappa = 0.0;
    let mut opts = SolveOptions::new(4);
    opts.max_iter = 200;
    let out = solve(&mut ctx(2), &problem, &opts).unwrap();
    let rel = out.xp.sub(&g.y).unwrap().norm_fro() / g.y.norm_fro();
    assert!(rel <= 1e-8, "relative error {rel}");
}

#[test]
fn noisy_problem_converges_and_fits_to_noise_level() {
    let sigma = 0.02;
    let g = gen_galaxy_stack(&GalaxyStackSpec {
        n_images: 32,
        n_unique_psfs: 16,
        noise_sigma: vec![sigma],
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let problem = DeconvProblem::new(g.y.clone(), g.psf.clone(), NoiseSpec::Known(g.sigma.clone()), Prior::Sparse);
    let mut opts = SolveOptions::new(4);
    opts.keep_iterates = true;
    let out = solve(&mut ctx(2), &problem, &opts).unwrap();
    assert!(out.converged, "stopped after {} iterations", out.iterations);
    assert!(out.iterations < 300);
    for x in &out.iterates {
        assert!(x.data().iter().all(|&v| v >= 0.0));
    }
    let resid = apply_h(&out.xp, &g.psf).unwrap().sub(&g.y).unwrap();
    let ms = resid.norm_sq() / resid.len() as f64;
    assert!(ms <= sigma * sigma, "residual mean square {ms}");
    // Non-increasing at the granularity of 20-iteration windows.
    let windows: Vec<f64> = out
        .cost_history
        .chunks(20)
        .map(|w| w.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{windows:?}");
    }
}

#[test]
fn estimated_noise_is_close_to_generator_noise() {
    let g = galaxies(8, 32, 0.05, 5);
    let problem = DeconvProblem::new(g.y.clone(), g.psf.clone(), NoiseSpec::Estimate, Prior::Sparse);
    let mut opts = SolveOptions::new(2);
    opts.max_iter = 1;
    let out = solve(&mut ctx(1), &problem, &opts).unwrap();
    for s in out.sigma {
        assert!((s / 0.05 - 1.0).abs() < 0.3, "{s}");
    }
}

#[test]
fn priors_agree_without_regularization() {
    let g = galaxies(6, 16, 0.01, 6);
    // A mild blur keeps the least-squares problem well conditioned.
    let mut k = vec![0.0; 9];
    k[4] = 0.6;
    for i in [1, 3, 5, 7] {
        k[i] = 0.1;
    }
    let one = Tensor::new(vec![3, 3], k).unwrap();
    let psf = Tensor::stack(&vec![one; 6]).unwrap();
    let y = apply_h(&g.x_true, &psf).unwrap();
    let mut opts = SolveOptions::new(3);
    opts.max_iter = 3000;
    opts.eps = 1e-300;
    opts.telemetry = false;
    let mut sparse = DeconvProblem::new(y.clone(), psf.clone(), NoiseSpec::Known(vec![0.0; 6]), Prior::Sparse);
    sparse.kappa = 0.0;
    let mut lowrank = DeconvProblem::new(y, psf, NoiseSpec::Known(vec![0.0; 6]), Prior::LowRank);
    lowrank.lambda = Some(0.0);
    let a = solve(&mut ctx(2), &sparse, &opts).unwrap();
    let b = solve(&mut ctx(2), &lowrank, &opts).unwrap();
    let d = a.xp.max_abs_diff(&b.xp).unwrap();
    assert!(d <= 1e-10, "{d}");
}

#[test]
fn lowrank_solution_has_low_rank() {
    let (n, h, w, r) = (20, 12, 12, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let basis: Vec<Tensor> = (0..r)
        .map(|k| {
            Tensor::from_fn2(h, w, |i, j| {
                let (di, dj) = (i as f64 - 4.0 - 3.0 * k as f64, j as f64 - 6.0);
                (-(di * di + dj * dj) / 6.0).exp()
            })
        })
        .collect();
    let images: Vec<Tensor> = (0..n)
        .map(|_| {
            let a: Vec<f64> = (0..r).map(|_| rng.random_range(0.2..1.0)).collect();
            basis[0].scale(a[0]).axpy(a[1], &basis[1]).unwrap()
        })
        .collect();
    let x = Tensor::stack(&images).unwrap();
    let noise = rand_distr::Normal::new(0.0, 1e-3).unwrap();
    let y = Tensor::new(x.dims().to_vec(), x.data().iter().map(|v| v + rng.sample(noise)).collect()).unwrap();
    let problem = DeconvProblem::new(y, delta_psfs(n, 3), NoiseSpec::Known(vec![1e-3; n]), Prior::LowRank);
    let mut opts = SolveOptions::new(4);
    opts.max_iter = 300;
    let out = solve(&mut ctx(2), &problem, &opts).unwrap();
    let s = svd(&out.xp.reshape(vec![n, h * w]).unwrap()).unwrap().s;
    for (i, v) in s.iter().enumerate().skip(r) {
        assert!(*v <= 1e-2 * s[0], "singular value {i}: {v} vs {}", s[0]);
    }
    assert!(out.xp.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn one_reweight_round_lowers_data_fidelity() {
    let g = galaxies(16, 16, 0.02, 8);
    let mut problem = DeconvProblem::new(g.y.clone(), g.psf.clone(), NoiseSpec::Known(g.sigma.clone()), Prior::Sparse);
    let mut opts = SolveOptions::new(4);
    opts.telemetry = false;
    let base = solve(&mut ctx(2), &problem, &opts).unwrap();
    problem.reweight_rounds = 1;
    let rew = solve(&mut ctx(2), &problem, &opts).unwrap();
    let fid = |x: &Tensor| apply_h(x, &g.psf).unwrap().sub(&g.y).unwrap().norm_sq();
    assert!(fid(&rew.xp) < fid(&base.xp), "{} vs {}", fid(&rew.xp), fid(&base.xp));
}

#[test]
fn problem_validation() {
    let g = galaxies(4, 16, 0.0, 9);
    let bad_psf = g.psf.scale(2.0);
    let p = DeconvProblem::new(g.y.clone(), bad_psf, NoiseSpec::Estimate, Prior::Sparse);
    assert!(p.validate().is_err());
    let p = DeconvProblem::new(g.y.clone(), g.psf.clone(), NoiseSpec::Known(vec![0.1; 3]), Prior::Sparse);
    assert!(p.validate().is_err());
    let mut p = DeconvProblem::new(g.y.clone(), g.psf.clone(), NoiseSpec::Estimate, Prior::Sparse);
    p.scales = 4;
    assert!(p.validate().is_err());
    let p = DeconvProblem::new(g.y, g.psf, NoiseSpec::Known(vec![0.1, -0.1, 0.1, 0.1]), Prior::Sparse);
    assert!(solve(&mut ctx(1), &p, &SolveOptions::new(2)).is_err());
}
