use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::skyline::{norm, SkylineCholesky};
use super::sparse::CsrMatrix;

/// Solution of an equality-constrained quadratic program.
#[derive(Clone, Debug)]
pub struct SaddleSolution {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Solve `[[A, Bᵀ], [B, 0]] [x; μ] = [b; g]`.
///
/// `A` is symmetric positive semidefinite and may carry the constants as
/// its nullspace (pure Neumann stiffness). In that case one diagonal entry is
/// stiffened and the rank-one correction is folded back through a small dense
/// Schur system, so the answer is that of the unmodified problem.
pub fn solve_saddle(
    a: &CsrMatrix,
    bmat: &CsrMatrix,
    b: &[f64],
    g: &[f64],
) -> Result<SaddleSolution> {
    let n = a.nrows();
    let m = bmat.nrows();
    if a.ncols() != n || bmat.ncols() != n || b.len() != n || g.len() != m {
        return Err(Error::Dimension(format!(
            "saddle system: A {}x{}, B {}x{}, b {}, g {}",
            n,
            a.ncols(),
            m,
            bmat.ncols(),
            b.len(),
            g.len()
        )));
    }
    let ones = vec![1.0; n];
    let a_scale = a.max_abs().max(f64::MIN_POSITIVE);
    let floating = norm(&a.mul_vec(&ones)) <= 1e-10 * a_scale * (n as f64).sqrt();
    let pin = n - 1;
    let alpha = if floating {
        let d = a.get(pin, pin);
        if d > 0.0 {
            d
        } else {
            a_scale
        }
    } else {
        0.0
    };
    let chol = if floating {
        let shift = CsrMatrix::from_triplets(n, n, &[(pin, pin, alpha)]);
        SkylineCholesky::factor(&a.lin_comb(1.0, &shift, 1.0))?
    } else {
        SkylineCholesky::factor(a)?
    };

    // Columns of Z_B = A_p⁻¹ Bᵀ.
    let mut zb: Vec<Vec<f64>> = Vec::with_capacity(m);
    for r in 0..m {
        let mut col = vec![0.0; n];
        let (cols, vals) = bmat.row(r);
        for (&i, &v) in cols.iter().zip(vals) {
            col[i] = v;
        }
        chol.solve_in_place(&mut col);
        zb.push(col);
    }
    let ze = if floating {
        let mut e = vec![0.0; n];
        e[pin] = 1.0;
        chol.solve_in_place(&mut e);
        Some(e)
    } else {
        None
    };

    let k = m + usize::from(floating);
    let mut s = DMatrix::<f64>::zeros(k, k);
    for i in 0..m {
        for (j, zj) in zb.iter().enumerate() {
            s[(i, j)] = row_dot(bmat, i, zj);
        }
    }
    if let Some(ze) = &ze {
        for i in 0..m {
            s[(i, m)] = -alpha * row_dot(bmat, i, ze);
        }
        for (j, zj) in zb.iter().enumerate() {
            s[(m, j)] = zj[pin];
        }
        s[(m, m)] = 1.0 - alpha * ze[pin];
    }
    let lu = s.clone().lu();
    // The Schur block B A⁻¹ Bᵀ is singular exactly when B loses rank.
    let diag_max = (0..k).fold(0.0f64, |acc, i| acc.max(s[(i, i)].abs()));
    let u = lu.u();
    let piv_min = (0..k).fold(f64::INFINITY, |acc, i| acc.min(u[(i, i)].abs()));
    if k > 0 && !(piv_min > 1e-12 * diag_max) {
        return Err(Error::RankDeficient);
    }
    let apply = |b: &[f64], g: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut x = chol.solve(b);
        let bx0 = bmat.mul_vec(&x);
        let mut rhs = DVector::<f64>::zeros(k);
        for i in 0..m {
            rhs[i] = bx0[i] - g[i];
        }
        if floating {
            rhs[m] = x[pin];
        }
        let sol = lu.solve(&rhs).ok_or(Error::RankDeficient)?;
        for (j, zj) in zb.iter().enumerate() {
            let mu = sol[j];
            x.iter_mut().zip(zj).for_each(|(xi, z)| *xi -= mu * z);
        }
        if let Some(ze) = &ze {
            let sv = alpha * sol[m];
            x.iter_mut().zip(ze).for_each(|(xi, z)| *xi += sv * z);
        }
        Ok((x, (0..m).map(|j| sol[j]).collect()))
    };
    let (mut x, mut mu) = apply(b, g)?;
    for _ in 0..2 {
        let ax = a.mul_vec(&x);
        let btmu = bmat.mul_transpose_vec(&mu);
        let r1: Vec<f64> = (0..n).map(|i| b[i] - ax[i] - btmu[i]).collect();
        let bx = bmat.mul_vec(&x);
        let r2: Vec<f64> = (0..m).map(|i| g[i] - bx[i]).collect();
        let (dx, dmu) = apply(&r1, &r2)?;
        x.iter_mut().zip(&dx).for_each(|(v, d)| *v += d);
        mu.iter_mut().zip(&dmu).for_each(|(v, d)| *v += d);
    }

    let ax = a.mul_vec(&x);
    let btmu = bmat.mul_transpose_vec(&mu);
    let r1: Vec<f64> = (0..n).map(|i| ax[i] + btmu[i] - b[i]).collect();
    let bx = bmat.mul_vec(&x);
    let r2: Vec<f64> = (0..m).map(|i| bx[i] - g[i]).collect();
    let (bn, gn) = (norm(b), norm(g));
    let r1n = norm(&r1);
    let r2n = norm(&r2);
    let ok1 = r1n <= 1e-9 * (bn + gn) || r1n <= 1e-12 * a_scale * norm(&x).max(1.0);
    let ok2 = if gn == 0.0 {
        r2n <= 1e-12 * bmat.max_abs().max(1.0) * norm(&x).max(1.0)
    } else {
        r2n <= 1e-9 * gn
    };
    if !(ok1 && ok2) {
        return Err(Error::NoConvergence {
            iterations: 1,
            residual: r1n.max(r2n),
        });
    }
    Ok(SaddleSolution { x, mu })
}

fn row_dot(m: &CsrMatrix, i: usize, x: &[f64]) -> f64 {
    let (cols, vals) = m.row(i);
    cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
}
