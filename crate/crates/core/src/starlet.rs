//! Isotropic undecimated (à trous) wavelet transform with the B3-spline
//! scaling kernel `[1, 4, 6, 4, 1] / 16`, mirror boundary.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const B3: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Default number of detail scales.
pub const DEFAULT_SCALES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct StarletCoeffs {
    /// Detail planes, finest first.
    pub details: Vec<Tensor>,
    pub coarse: Tensor,
}

impl StarletCoeffs {
    pub fn scales(&self) -> usize {
        self.details.len()
    }
}

/// Largest admissible number of scales for an `h × w` image.
pub fn max_scales(h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m < 2 {
        return 0;
    }
    (usize::BITS - 1 - m.leading_zeros()) as usize - 1
}

pub fn check_scales(h: usize, w: usize, scales: usize) -> Result<()> {
    let max = max_scales(h, w);
    if scales == 0 || scales > max {
        return Err(Error::Config(format!(
            "{scales} starlet scales invalid for {h}x{w} image (allowed 1..={max})"
        )));
    }
    Ok(())
}

#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// One separable à trous smoothing pass at hole spacing `step`.
fn smooth(data: &[f64], h: usize, w: usize, step: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        let row = &data[i * w..(i + 1) * w];
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &c) in B3.iter().enumerate() {
                let off = (t as isize - 2) * step as isize;
                acc += c * row[reflect(j as isize + off, w)];
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for (t, &c) in B3.iter().enumerate() {
            let off = (t as isize - 2) * step as isize;
            let src = reflect(i as isize + off, h);
            let src_row = &rows[src * w..(src + 1) * w];
            let dst = &mut out[i * w..(i + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += c * s;
            }
        }
    }
    out
}

/// Transpose of [`smooth`] (the mirror boundary makes it non-symmetric).
fn smooth_adjoint(data: &[f64], h: usize, w: usize, step: usize) -> Vec<f64> {
    // Columns first (reverse order of the forward pass), scattering.
    let mut cols = vec![0.0; h * w];
    for i in 0..h {
        let src_row = &data[i * w..(i + 1) * w];
        for (t, &c) in B3.iter().enumerate() {
            let off = (t as isize - 2) * step as isize;
            let dst = reflect(i as isize + off, h);
            let dst_row = &mut cols[dst * w..(dst + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += c * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let row = &cols[i * w..(i + 1) * w];
        let dst = &mut out[i * w..(i + 1) * w];
        for (j, &v) in row.iter().enumerate() {
            for (t, &c) in B3.iter().enumerate() {
                let off = (t as isize - 2) * step as isize;
                dst[reflect(j as isize + off, w)] += c * v;
            }
        }
    }
    out
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.dims() {
        &[h, w] => Ok((h, w)),
        d => Err(shape_err!("starlet expects a matrix, got dims {d:?}")),
    }
}

pub fn decompose(image: &Tensor, scales: usize) -> Result<StarletCoeffs> {
    let (h, w) = image_dims(image)?;
    check_scales(h, w, scales)?;
    let mut current = image.to_vec();
    let mut details = Vec::with_capacity(scales);
    for j in 0..scales {
        let next = smooth(&current, h, w, 1 << j);
        let detail: Vec<f64> = current.iter().zip(&next).map(|(a, b)| a - b).collect();
        details.push(Tensor::new(vec![h, w], detail)?);
        current = next;
    }
    Ok(StarletCoeffs {
        details,
        coarse: Tensor::new(vec![h, w], current)?,
    })
}

/// Detail planes only, stacked as a `scales × h × w` tensor.
pub fn forward_details(image: &Tensor, scales: usize) -> Result<Tensor> {
    let coeffs = decompose(image, scales)?;
    Tensor::stack(&coeffs.details)
}

pub fn reconstruct(coeffs: &StarletCoeffs) -> Result<Tensor> {
    let mut acc = coeffs.coarse.clone();
    for d in &coeffs.details {
        if d.dims() != acc.dims() {
            return Err(shape_err!(
                "detail plane {:?} vs coarse {:?}",
                d.dims(),
                acc.dims()
            ));
        }
        acc = acc.add(d)?;
    }
    Ok(acc)
}

/// Adjoint of the details-only forward map. `details` is `scales × h × w`.
pub fn adjoint_details(details: &Tensor) -> Result<Tensor> {
    let (scales, h, w) = match details.dims() {
        &[s, h, w] => (s, h, w),
        d => return Err(shape_err!("expected scales x h x w detail stack, got {d:?}")),
    };
    check_scales(h, w, scales)?;
    let plane = |s: usize| &details.data()[s * h * w..(s + 1) * h * w];
    // (I - S_j)^T u = u - S_j^T u
    let high_adj = |u: &[f64], j: usize| -> Vec<f64> {
        let su = smooth_adjoint(u, h, w, 1 << j);
        u.iter().zip(&su).map(|(a, b)| a - b).collect()
    };
    let mut acc = high_adj(plane(scales - 1), scales - 1);
    for j in (0..scales - 1).rev() {
        let carried = smooth_adjoint(&acc, h, w, 1 << j);
        let here = high_adj(plane(j), j);
        acc = here.iter().zip(&carried).map(|(a, b)| a + b).collect();
    }
    Tensor::new(vec![h, w], acc)
}

/// ℓ2 norm of each detail filter of a centered delta on an `h × w` grid.
pub fn detail_filter_norms(h: usize, w: usize, scales: usize) -> Result<Vec<f64>> {
    let mut delta = vec![0.0; h * w];
    delta[(h / 2) * w + w / 2] = 1.0;
    let coeffs = decompose(&Tensor::new(vec![h, w], delta)?, scales)?;
    Ok(coeffs.details.iter().map(Tensor::norm_fro).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::convolve2d_same;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn2(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn scale_bound() {
        assert_eq!(max_scales(16, 16), 3);
        assert_eq!(max_scales(41, 41), 4);
        assert_eq!(max_scales(8, 20), 2);
        assert!(decompose(&Tensor::zeros(&[16, 16]), 4).is_err());
        assert!(decompose(&Tensor::zeros(&[16, 16]), 0).is_err());
    }

    #[test]
    fn constant_image_has_zero_details() {
        let img = Tensor::filled(&[16, 16], 2.5);
        let c = decompose(&img, 3).unwrap();
        for d in &c.details {
            assert!(d.max_abs() < 1e-15);
        }
        assert!(c.coarse.max_abs_diff(&img).unwrap() < 1e-15);
    }

    #[test]
    fn zero_image_zero_coefficients() {
        let c = decompose(&Tensor::zeros(&[8, 8]), 2).unwrap();
        assert!(c.details.iter().all(|d| d.max_abs() == 0.0));
        assert_eq!(c.coarse.max_abs(), 0.0);
        let zero = StarletCoeffs {
            details: vec![Tensor::zeros(&[8, 8]); 2],
            coarse: Tensor::zeros(&[8, 8]),
        };
        assert_eq!(reconstruct(&zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn centered_delta_matches_explicit_filters() {
        // Away from the boundary, the scale-1 smoothing of a delta is the 5x5
        // B3 outer product and scale 2 is that convolved with the 9x9 holed
        // version of it. Built with plain convolution as the oracle.
        let n = 32;
        let mut delta = Tensor::zeros(&[n, n]).to_vec();
        delta[(n / 2) * n + n / 2] = 1.0;
        let delta = Tensor::new(vec![n, n], delta).unwrap();
        let k1 = Tensor::from_fn2(5, 5, |i, j| B3[i] * B3[j]);
        let k2 = Tensor::from_fn2(9, 9, |i, j| {
            if i % 2 == 0 && j % 2 == 0 {
                B3[i / 2] * B3[j / 2]
            } else {
                0.0
            }
        });
        let c1 = convolve2d_same(&delta, &k1).unwrap();
        let c2 = convolve2d_same(&c1, &k2).unwrap();
        let w1 = delta.sub(&c1).unwrap();
        let w2 = c1.sub(&c2).unwrap();
        let coeffs = decompose(&delta, 2).unwrap();
        assert!(coeffs.details[0].max_abs_diff(&w1).unwrap() < 1e-15);
        assert!(coeffs.details[1].max_abs_diff(&w2).unwrap() < 1e-15);
        assert!(coeffs.coarse.max_abs_diff(&c2).unwrap() < 1e-15);
        // Center value of the first detail: 1 - (6/16)^2.
        let center = coeffs.details[0].at(n / 2, n / 2);
        assert!((center - (1.0 - 36.0 / 256.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w, j) in [(16, 16, 3), (41, 41, 3), (9, 13, 2)] {
            let img = random_image(&mut rng, h, w);
            let back = reconstruct(&decompose(&img, j).unwrap()).unwrap();
            assert!(back.max_abs_diff(&img).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn adjoint_dot_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let x = random_image(&mut rng, 16, 16);
            let u = Tensor::new(
                vec![3, 16, 16],
                (0..3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = forward_details(&x, 3).unwrap().dot(&u).unwrap();
            let rhs = x.dot(&adjoint_details(&u).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300));
        }
    }

    #[test]
    fn adjoint_column_matches_explicit_matrix() {
        // Build the explicit (2*64) x 64 matrix of the details map on 8x8 by
        // pushing basis vectors through it; the adjoint of a unit coefficient
        // must equal the corresponding row of that matrix.
        let (h, w, scales) = (8, 8, 2);
        let n = h * w;
        let mut matrix = vec![vec![0.0; n]; scales * n];
        for col in 0..n {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            let d = forward_details(&Tensor::new(vec![h, w], e).unwrap(), scales).unwrap();
            for (row, v) in d.data().iter().enumerate() {
                matrix[row][col] = *v;
            }
        }
        let coeff_index = 0 * n + 4 * w + 4; // scale 1, center
        let mut u = vec![0.0; scales * n];
        u[coeff_index] = 1.0;
        let adj = adjoint_details(&Tensor::new(vec![scales, h, w], u).unwrap()).unwrap();
        for (k, v) in adj.data().iter().enumerate() {
            assert!((v - matrix[coeff_index][k]).abs() < 1e-15);
        }
        let zero = adjoint_details(&Tensor::zeros(&[scales, h, w])).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn shift_covariance_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, scales) = (48, 3);
        let img = random_image(&mut rng, n, n);
        let shifted = Tensor::from_fn2(n, n, |i, j| {
            if i >= 1 && j >= 2 {
                img.at(i - 1, j - 2)
            } else {
                0.0
            }
        });
        let a = decompose(&img, scales).unwrap();
        let b = decompose(&shifted, scales).unwrap();
        let margin = (1 << scales) * 2 + 2;
        for s in 0..scales {
            for i in margin..n - margin {
                for j in margin..n - margin {
                    let diff = b.details[s].at(i, j) - a.details[s].at(i - 1, j - 2);
                    assert!(diff.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn delta_filter_norms_are_positive_and_decreasing() {
        let norms = detail_filter_norms(41, 41, 3).unwrap();
        assert_eq!(norms.len(), 3);
        assert!(norms.windows(2).all(|w| w[0] > w[1]));
    }
}
