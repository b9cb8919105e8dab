use crate::error::{Error, Result};

use super::sparse::CsrMatrix;

/// Profile (skyline) Cholesky factor `A = L Lᵀ`.
///
/// Row `i` of `L` is stored densely from its first structural nonzero up to
/// the diagonal, so fill stays inside the envelope of `A`.
#[derive(Clone, Debug)]
pub struct SkylineCholesky {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    /// Factor the symmetric matrix `a`; only its lower triangle is read.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "{}x{} matrix is not square",
                n,
                a.ncols()
            )));
        }
        let mut first = vec![0usize; n];
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            let (cols, _) = a.row(i);
            first[i] = cols.first().copied().unwrap_or(i).min(i);
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j <= i {
                    data[start[i] + j - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let si = start[i];
            for j in fi..i {
                let fj = first[j];
                let sj = start[j];
                let k0 = fi.max(fj);
                let li = &data[si + k0 - fi..si + j - fi];
                let lj = &data[sj + k0 - fj..sj + j - fj];
                let dot: f64 = li.iter().zip(lj).map(|(a, b)| a * b).sum();
                let ljj = data[sj + j - fj];
                let idx = si + j - fi;
                data[idx] = (data[idx] - dot) / ljj;
            }
            let row = &data[si..si + i - fi];
            let dot: f64 = row.iter().map(|v| v * v).sum();
            let aii = data[si + i - fi];
            let d = aii - dot;
            if !(d > 1e-14 * aii.abs()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { row: i, pivot: d });
            }
            data[si + i - fi] = d.sqrt();
        }
        Ok(Self {
            n,
            first,
            start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries, a proxy for factorization memory.
    pub fn profile_len(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let dot: f64 = row[..i - fi]
                .iter()
                .zip(&x[fi..i])
                .map(|(a, b)| a * b)
                .sum();
            x[i] = (x[i] - dot) / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            x[i] /= row[i - fi];
            let xi = x[i];
            for (xk, l) in x[fi..i].iter_mut().zip(&row[..i - fi]) {
                *xk -= l * xi;
            }
        }
    }
}

/// Solve `A x = b` for symmetric positive definite `A` by profile Cholesky.
///
/// The residual is checked against `tol · ‖b‖`; a larger residual is reported
/// together with the achieved value.
pub fn solve_spd(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    solve_spd_tol(a, b, 1e-10)
}

pub fn solve_spd_tol(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    if b.len() != a.nrows() {
        return Err(Error::Dimension(format!(
            "right-hand side has length {}, matrix has {} rows",
            b.len(),
            a.nrows()
        )));
    }
    let f = SkylineCholesky::factor(a)?;
    let mut x = f.solve(b);
    let bn = norm(b);
    if bn == 0.0 {
        return Ok(x);
    }
    // One step of iterative refinement tightens ill-conditioned solves.
    for _ in 0..2 {
        let r = residual(a, &x, b);
        let rn = norm(&r);
        if rn <= tol * bn {
            return Ok(x);
        }
        let dx = f.solve(&r);
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
    }
    let rn = norm(&residual(a, &x, b));
    if rn <= tol * bn {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: 2,
            residual: rn / bn,
        })
    }
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(&ax).map(|(b, ax)| b - ax).collect()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let b = [1.0, -2.0, 3.5];
        assert_eq!(solve_spd(&CsrMatrix::identity(3), &b).unwrap(), b.to_vec());
        let d = CsrMatrix::from_diagonal(&[2.0, 4.0, 0.5]);
        let x = solve_spd(&d, &b).unwrap();
        assert!(
            (x[0] - 0.5).abs() < 1e-15 && (x[1] + 0.5).abs() < 1e-15 && (x[2] - 7.0).abs() < 1e-15
        );
    }

    #[test]
    fn random_spd_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = g.transpose() * &g + DMatrix::identity(n, n);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_spd(&CsrMatrix::from_dense(&a), &b).unwrap();
        let oracle = a
            .clone()
            .cholesky()
            .unwrap()
            .solve(&DVector::from_vec(b.clone()));
        for i in 0..n {
            assert!((x[i] - oracle[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn banded_profile_is_exploited() {
        let n = 200;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let f = SkylineCholesky::factor(&a).unwrap();
        assert_eq!(f.profile_len(), 2 * n - 1);
        let x = f.solve(&vec![1.0; n]);
        let r = residual(&a, &x, &vec![1.0; n]);
        assert!(norm(&r) < 1e-9);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(
            SkylineCholesky::factor(&a),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
    }
}
