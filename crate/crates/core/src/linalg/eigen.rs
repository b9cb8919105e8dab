use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::skyline::SkylineCholesky;
use super::sparse::CsrMatrix;

/// Dense problems up to this size skip the iterative path.
pub const DENSE_LIMIT: usize = 400;

/// Solve `A v = λ M v` for symmetric `A` and SPD `M`.
///
/// Returns eigenvalues ascending and eigenvectors as columns normalized so
/// that `Vᵀ M V = I`.
pub fn dense_generalized_eig(
    a: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!(
            "eigenproblem: A {}x{}, M {}x{}",
            a.nrows(),
            a.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let ms = (m + m.transpose()) * 0.5;
    let chol = ms.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        row: 0,
        pivot: f64::NAN,
    })?;
    let l = chol.l();
    let as_ = (a + a.transpose()) * 0.5;
    // C = L⁻¹ A L⁻ᵀ
    let linv_a = l
        .solve_lower_triangular(&as_)
        .ok_or_else(|| Error::Singular("mass factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::Singular("mass factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lambda = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let w = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let v = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| Error::Singular("mass factor".into()))?;
    let (lambda, v) = refine_pairs(&as_, &ms, lambda, v);
    let v = normalize_sign(v);
    debug_assert!(
        eig_residual_ok(&as_, &ms, &lambda, &v),
        "generalized eigen residual too large"
    );
    Ok((lambda, v))
}

/// Fix the sign of each column so that its largest-magnitude entry is positive.
fn normalize_sign(mut v: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for x in col.iter() {
            if x.abs() > best + 1e-12 * best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Shifted inverse subspace iteration with Rayleigh-Ritz on each cluster of
/// nearly equal eigenvalues whose residual is above tolerance; widely
/// separated spectra lose digits in the small pairs.
fn refine_pairs(
    a: &DMatrix<f64>,
    m: &DMatrix<f64>,
    mut lambda: DVector<f64>,
    mut v: DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let an = a.amax();
    let mn = m.amax().max(f64::MIN_POSITIVE);
    let unit = an / mn;
    let residual = |lambda: &DVector<f64>, v: &DMatrix<f64>, i: usize| {
        let vi = v.column(i);
        let r = a * vi - m * vi * lambda[i];
        r.amax() / ((an + lambda[i].abs() * mn) * vi.amax()).max(f64::MIN_POSITIVE)
    };
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && lambda[end] - lambda[end - 1] <= 1e-6 * lambda[end].abs() + 1e-9 * unit {
            end += 1;
        }
        let k = end - start;
        for _ in 0..3 {
            if (start..end).all(|i| residual(&lambda, &v, i) <= 1e-13) {
                break;
            }
            let center = (start..end).map(|i| lambda[i]).sum::<f64>() / k as f64;
            let sigma = center - 1e-9 * (center.abs() + unit);
            let rhs = m * v.columns(start, k);
            let Some(y) = (a - m * sigma).lu().solve(&rhs) else {
                break;
            };
            let ar = y.transpose() * a * &y;
            let mr = y.transpose() * m * &y;
            let Some(chol) = ((&mr + mr.transpose()) * 0.5).cholesky() else {
                break;
            };
            let l = chol.l();
            let Some(t) = l.solve_lower_triangular(&((&ar + ar.transpose()) * 0.5)) else {
                break;
            };
            let Some(c) = l.solve_lower_triangular(&t.transpose()) else {
                break;
            };
            let eig = SymmetricEigen::new((&c + c.transpose()) * 0.5);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
            let w = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
            let Some(z) = l.transpose().solve_upper_triangular(&w) else {
                break;
            };
            let block = &y * z;
            if block.iter().any(|x| !x.is_finite()) {
                break;
            }
            for (c, &o) in order.iter().enumerate() {
                lambda[start + c] = eig.eigenvalues[o];
                v.set_column(start + c, &block.column(c));
            }
        }
        start = end;
    }
    (lambda, v)
}

fn eig_residual_ok(
    a: &DMatrix<f64>,
    m: &DMatrix<f64>,
    lambda: &DVector<f64>,
    v: &DMatrix<f64>,
) -> bool {
    let an = a.amax();
    let mn = m.amax();
    (0..lambda.len()).all(|i| {
        let vi = v.column(i);
        let r = a * vi - m * vi * lambda[i];
        let scale = (an + lambda[i].abs() * mn) * vi.amax() * (a.nrows() as f64);
        r.amax() <= 1e-10 * scale.max(f64::MIN_POSITIVE)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extreme {
    Max,
    Min,
}

/// Largest or smallest eigenvalue of the sparse pencil `(A, M)`.
///
/// Small problems are solved densely. Larger ones use Lanczos with full
/// reorthogonalization in the `M` inner product; the smallest eigenvalue is
/// obtained through the shift-inverted operator `(A + σM)⁻¹ M`.
pub fn extreme_generalized_eigenvalue(
    a: &CsrMatrix,
    m: &CsrMatrix,
    which: Extreme,
) -> Result<(f64, Vec<f64>)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n || m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!(
            "pencil of size {}x{} and {}x{}",
            n,
            a.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    if n <= DENSE_LIMIT {
        let (lam, v) = dense_generalized_eig(&a.to_dense(), &m.to_dense())?;
        let k = match which {
            Extreme::Max => n - 1,
            Extreme::Min => 0,
        };
        return Ok((lam[k], v.column(k).iter().copied().collect()));
    }
    let mchol = SkylineCholesky::factor(m)?;
    match which {
        Extreme::Max => {
            let op = |x: &[f64]| mchol.solve(&a.mul_vec(x));
            lanczos_max(n, op, |x| m.mul_vec(x), 1e-9, n)
        }
        Extreme::Min => {
            let sigma = 1e-6 * a.max_abs() / m.max_abs().max(f64::MIN_POSITIVE);
            let shifted = SkylineCholesky::factor(&a.lin_comb(1.0, m, sigma))?;
            let op = |x: &[f64]| shifted.solve(&m.mul_vec(x));
            let (mu, v) = lanczos_max(n, op, |x| m.mul_vec(x), 1e-10, n)?;
            Ok((1.0 / mu - sigma, v))
        }
    }
}

/// Largest eigenvalue of an operator self-adjoint in the `B` inner product.
///
/// `op` applies the operator, `bmul` applies `B`. Stops when the Ritz
/// residual estimate drops below `tol` relative to the Ritz value, or after
/// `max_iter` steps (at which point the Krylov space is exhausted if
/// `max_iter` equals the dimension).
pub fn lanczos_max(
    n: usize,
    op: impl Fn(&[f64]) -> Vec<f64>,
    bmul: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mut bq = bmul(&q);
    let nrm = dot(&q, &bq).sqrt();
    scale(&mut q, 1.0 / nrm);
    scale(&mut bq, 1.0 / nrm);
    let mut qs = vec![q];
    let mut bqs = vec![bq];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let max_iter = max_iter.min(n).max(1);
    let mut last = (0.0, f64::INFINITY);
    for j in 0..max_iter {
        let mut w = op(&qs[j]);
        let a = dot(&w, &bqs[j]);
        alpha.push(a);
        // Two passes of classical Gram-Schmidt keep the basis orthogonal.
        for _ in 0..2 {
            for (qi, bqi) in qs.iter().zip(&bqs) {
                let c = dot(&w, bqi);
                axpy(&mut w, -c, qi);
            }
        }
        let bw = bmul(&w);
        let b = dot(&w, &bw).max(0.0).sqrt();
        let (theta, s_last, s) = tridiag_max(&alpha, &beta);
        let res = b * s_last.abs();
        last = (theta, res);
        let done = res <= tol * theta.abs().max(f64::MIN_POSITIVE)
            || j + 1 == max_iter
            || b <= 1e-14 * theta.abs();
        if done && (j >= 2 || j + 1 == max_iter || b <= 1e-14 * theta.abs()) {
            let mut v = vec![0.0; n];
            for (qi, si) in qs.iter().zip(s.iter()) {
                axpy(&mut v, *si, qi);
            }
            return Ok((theta, v));
        }
        beta.push(b);
        let mut wn = w;
        let mut bwn = bw;
        scale(&mut wn, 1.0 / b);
        scale(&mut bwn, 1.0 / b);
        qs.push(wn);
        bqs.push(bwn);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: last.1,
    })
}

/// Largest eigenpair of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta`: Sturm bisection for the value, then
/// inverse iteration with a shift just above it.
fn tridiag_max(alpha: &[f64], beta: &[f64]) -> (f64, f64, Vec<f64>) {
    let k = alpha.len();
    let off = |i: usize| if i < beta.len() { beta[i].abs() } else { 0.0 };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let r = off(i) + if i > 0 { off(i - 1) } else { 0.0 };
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    // Number of eigenvalues strictly greater than x.
    let count_above = |x: f64| {
        let mut c = 0;
        let mut d = 1.0;
        for i in 0..k {
            let b2 = if i > 0 {
                beta[i - 1] * beta[i - 1]
            } else {
                0.0
            };
            d = alpha[i] - x - if i > 0 { b2 / d } else { 0.0 };
            if d == 0.0 {
                d = -f64::EPSILON * (x.abs() + 1.0);
            }
            if d > 0.0 {
                c += 1;
            }
        }
        c
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_above(mid) >= 1 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = hi;
    if k == 1 {
        return (alpha[0], 1.0, vec![1.0]);
    }
    let scale = alpha
        .iter()
        .chain(beta)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let sigma = theta + 1e-10 * scale;
    // (σI − T) is positive definite, so elimination without pivoting is stable.
    let mut y = vec![1.0; k];
    for _ in 0..3 {
        let mut diag: Vec<f64> = alpha.iter().map(|a| sigma - a).collect();
        let mut rhs = y.clone();
        for i in 1..k {
            let m = -beta[i - 1] / diag[i - 1];
            diag[i] -= m * -beta[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        y[k - 1] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            y[i] = (rhs[i] + beta[i] * y[i + 1]) / diag[i];
        }
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= n);
    }
    (theta, y[k - 1], y)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn scale(y: &mut [f64], a: f64) {
    y.iter_mut().for_each(|v| *v *= a);
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn check(a: &DMatrix<f64>, m: &DMatrix<f64>, lam: &DVector<f64>, v: &DMatrix<f64>) {
        let an = a.norm();
        for i in 0..lam.len() {
            let r = a * v.column(i) - m * v.column(i) * lam[i];
            assert!(r.norm() <= 1e-10 * an.max(1.0), "residual {}", r.norm());
        }
        let g = v.transpose() * m * v;
        assert!((g - DMatrix::identity(lam.len(), lam.len())).amax() < 1e-10);
        assert!(lam.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn trivial_pencils() {
        let i3 = DMatrix::identity(3, 3);
        let (l, v) = dense_generalized_eig(&i3, &i3).unwrap();
        assert!(l.iter().all(|x| (x - 1.0).abs() < 1e-14));
        check(&i3, &i3, &l, &v);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 2.0]));
        let (l, v) = dense_generalized_eig(&a, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(l.as_slice(), &[2.0, 5.0]);
        assert!((v[(1, 0)].abs() - 1.0).abs() < 1e-14 && (v[(0, 1)].abs() - 1.0).abs() < 1e-14);
    }

    /// Roots of det(A − λM) by bisection on sign changes of the determinant.
    fn charpoly_roots(a: &DMatrix<f64>, m: &DMatrix<f64>, lo: f64, hi: f64) -> Vec<f64> {
        let det = |x: f64| (a - m * x).determinant();
        let steps = 200_000;
        let mut roots = Vec::new();
        let mut x0 = lo;
        let mut f0 = det(x0);
        for k in 1..=steps {
            let x1 = lo + (hi - lo) * k as f64 / steps as f64;
            let f1 = det(x1);
            if f0 == 0.0 || f0.signum() != f1.signum() {
                let (mut l, mut r, mut fl) = (x0, x1, f0);
                for _ in 0..200 {
                    let mid = 0.5 * (l + r);
                    let fm = det(mid);
                    if fm.signum() == fl.signum() {
                        l = mid;
                        fl = fm;
                    } else {
                        r = mid;
                    }
                }
                roots.push(0.5 * (l + r));
            }
            x0 = x1;
            f0 = f1;
        }
        roots
    }

    #[test]
    fn random_pair_matches_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let h = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let a = &g + g.transpose();
        let m = h.transpose() * &h + DMatrix::identity(4, 4);
        let (l, v) = dense_generalized_eig(&a, &m).unwrap();
        check(&a, &m, &l, &v);
        let roots = charpoly_roots(&a, &m, l[0] - 1.0, l[3] + 1.0);
        assert_eq!(roots.len(), 4);
        for (r, x) in roots.iter().zip(l.iter()) {
            assert!((r - x).abs() < 1e-8, "{r} vs {x}");
        }
    }

    #[test]
    fn rejects_indefinite_mass() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(dense_generalized_eig(&DMatrix::identity(2, 2), &m).is_err());
    }

    fn laplace_1d(n: usize) -> (CsrMatrix, CsrMatrix) {
        let mut k = Vec::new();
        let mut mm = Vec::new();
        for i in 0..n {
            k.push((i, i, 2.0));
            mm.push((i, i, 4.0 / 6.0));
            if i + 1 < n {
                k.push((i, i + 1, -1.0));
                k.push((i + 1, i, -1.0));
                mm.push((i, i + 1, 1.0 / 6.0));
                mm.push((i + 1, i, 1.0 / 6.0));
            }
        }
        (
            CsrMatrix::from_triplets(n, n, &k),
            CsrMatrix::from_triplets(n, n, &mm),
        )
    }

    #[test]
    fn extreme_trivial() {
        let m = CsrMatrix::identity(5);
        assert!(
            (extreme_generalized_eigenvalue(&m, &m, Extreme::Max)
                .unwrap()
                .0
                - 1.0)
                .abs()
                < 1e-12
        );
        let n = 600;
        let d = CsrMatrix::from_diagonal(&(1..=n).map(|i| i as f64).collect::<Vec<_>>());
        let (lmax, _) =
            extreme_generalized_eigenvalue(&d, &CsrMatrix::identity(n), Extreme::Max).unwrap();
        assert!((lmax - n as f64).abs() < 1e-6 * n as f64);
        let (lmin, _) =
            extreme_generalized_eigenvalue(&d, &CsrMatrix::identity(n), Extreme::Min).unwrap();
        assert!((lmin - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lanczos_matches_closed_form() {
        let n = 500;
        let (k, m) = laplace_1d(n);
        let (lmax, v) = extreme_generalized_eigenvalue(&k, &m, Extreme::Max).unwrap();
        let (lmin, _) = extreme_generalized_eigenvalue(&k, &m, Extreme::Min).unwrap();
        let exact = |j: usize| {
            let c = (j as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos();
            (2.0 - 2.0 * c) / ((4.0 + 2.0 * c) / 6.0)
        };
        assert!(
            (lmax - exact(n)).abs() <= 1e-6 * exact(n),
            "{lmax} vs {}",
            exact(n)
        );
        assert!(
            (lmin - exact(1)).abs() <= 1e-6 * exact(1),
            "{lmin} vs {}",
            exact(1)
        );
        let kv = k.mul_vec(&v);
        let mv = m.mul_vec(&v);
        let r: f64 = kv
            .iter()
            .zip(&mv)
            .map(|(a, b)| (a - lmax * b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(r < 1e-4 * lmax * mv.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
}
